"""Asynchronous BO loop with write-ahead trial history and resume."""

from __future__ import annotations

import configparser
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import gp
from .acquisition import AcqConfig, maximize_nei
from .evaluators import EvaluatorHandle, Observation
from .space import ParamSpace, decode, encode, load_space, sobol_points
from .workers import Completion, InlinePool, PoolError, SocketPool, ThreadPool

log = logging.getLogger(__name__)

STATES = ("proposed", "dispatched", "completed", "failed")
HISTORY_FORMAT = "neibo-history/1"


class OrchestratorError(RuntimeError):
    pass


class UnknownTrialError(OrchestratorError):
    pass


class DuplicateResultError(OrchestratorError):
    pass


class HistoryError(OrchestratorError):
    """History file is corrupt or belongs to a different run."""


@dataclass
class TrialRecord:
    trial_id: int
    candidate: dict
    state: str
    seed: int
    source: str = "model"  # "design" for initial-design points
    observation: Optional[Observation] = None
    worker_id: Optional[str] = None
    reason: str = ""
    proposed_at: float = 0.0
    completed_at: Optional[float] = None

    def __post_init__(self):
        if self.state not in STATES:
            raise ValueError(f"unknown trial state {self.state!r}")
        if (self.state == "completed") != (self.observation is not None):
            raise ValueError("a trial has an observation iff it is completed")

    def to_dict(self) -> dict:
        return {
            "record": "trial",
            "trial_id": self.trial_id,
            "state": self.state,
            "candidate": self.candidate,
            "seed": self.seed,
            "source": self.source,
            "observation": self.observation.to_dict() if self.observation else None,
            "worker_id": self.worker_id,
            "reason": self.reason,
            "proposed_at": self.proposed_at,
            "completed_at": self.completed_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        obs = d.get("observation")
        return cls(
            trial_id=int(d["trial_id"]),
            candidate={k: float(v) for k, v in d["candidate"].items()},
            state=d["state"],
            seed=int(d["seed"]),
            source=d.get("source", "model"),
            observation=Observation.from_dict(obs) if obs else None,
            worker_id=d.get("worker_id"),
            reason=d.get("reason", ""),
            proposed_at=float(d.get("proposed_at", 0.0)),
            completed_at=d.get("completed_at"),
        )


@dataclass(frozen=True)
class RunConfig:
    evaluator: EvaluatorHandle
    budget: int
    n_init: int
    acq: AcqConfig = AcqConfig()
    master_seed: int = 0
    max_in_flight: int = 1
    history_path: Optional[str] = None
    space_file: Optional[str] = None
    replicates: int = 1
    workers: str = "inline"
    heartbeat_timeout: float = 60.0
    lengthscale_max: float = 2.0  # upper lengthscale bound in encoded units

    def __post_init__(self):
        if not self.budget >= self.n_init >= 1:
            raise ValueError("need budget >= n_init >= 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.lengthscale_max > gp.LENGTHSCALE_BOUNDS[0]:
            raise ValueError("lengthscale_max must exceed the lower lengthscale bound")

    @property
    def space(self) -> ParamSpace:
        if self.space_file:
            return load_space(self.space_file)
        return self.evaluator.space

    def identity(self) -> dict:
        """Fields that must match for a history file to be resumable."""
        return {
            "evaluator": self.evaluator.to_dict(),
            "budget": self.budget,
            "n_init": self.n_init,
            "acq": {
                "fantasy_count": self.acq.fantasy_count,
                "restarts": self.acq.restarts,
                "raw_samples": self.acq.raw_samples,
            },
            "master_seed": self.master_seed,
            "max_in_flight": self.max_in_flight,
            "replicates": self.replicates,
            "lengthscale_max": self.lengthscale_max,
            "space": [[s.name, s.kind, s.lower, s.upper] for s in self.space],
        }


def trial_seed(master_seed: int, trial_id: int) -> int:
    """Per-trial seed, independent of scheduling order."""
    return int(np.random.SeedSequence([master_seed, trial_id]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# history file


class History:
    """Append-only line-delimited record log."""

    def __init__(self, path):
        self.path = Path(path)

    def exists(self) -> bool:
        return self.path.exists() and self.path.stat().st_size > 0

    def append(self, record: dict):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def read(self) -> tuple[Optional[dict], list[dict]]:
        header, records = None, []
        lines = self.path.read_text().splitlines(keepends=True)
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                if i == len(lines) - 1 and not line.endswith("\n"):
                    log.warning("dropping torn final line of %s", self.path)
                    break
                raise HistoryError(f"{self.path}:{i + 1}: not a JSON record") from None
            if rec.get("record") == "run":
                if header is not None:
                    raise HistoryError(f"{self.path}: more than one run header")
                header = rec
            elif rec.get("record") == "trial":
                records.append(rec)
            else:
                raise HistoryError(f"{self.path}:{i + 1}: unknown record kind")
        return header, records


def replay(records: Iterable[dict]) -> list[TrialRecord]:
    """Collapse a record log to the latest state of each trial."""
    latest: dict[int, TrialRecord] = {}
    for rec in records:
        try:
            t = TrialRecord.from_dict(rec)
        except (KeyError, ValueError, TypeError) as exc:
            raise HistoryError(f"invalid trial record: {exc}") from None
        if t.trial_id not in latest and t.trial_id != len(latest):
            raise HistoryError(f"trial ids not gapless: saw {t.trial_id} after {len(latest)} trials")
        latest[t.trial_id] = t
    return [latest[i] for i in range(len(latest))]


def load_history(path) -> list[TrialRecord]:
    _, records = History(path).read()
    return replay(records)


# ---------------------------------------------------------------------------
# loop state


@dataclass
class LoopState:
    history: list = field(default_factory=list)
    pending: set = field(default_factory=set)
    obj_model: Optional[gp.GpModel] = None
    con_model: Optional[gp.GpModel] = None
    fitted_on: tuple = ()
    fit_seed: Optional[int] = None

    def completed(self) -> list[TrialRecord]:
        return [t for t in self.history if t.state == "completed"]

    @property
    def n_completed(self) -> int:
        return sum(t.state == "completed" for t in self.history)


def handle_result(state: LoopState, trial_id: int, result, worker_id=None, now=None) -> LoopState:
    """Record a completion (`Observation`) or a failure (reason string / None)."""
    if trial_id < 0 or trial_id >= len(state.history):
        raise UnknownTrialError(f"unknown trial {trial_id}")
    t = state.history[trial_id]
    if t.state in ("completed", "failed"):
        raise DuplicateResultError(f"trial {trial_id} already {t.state}")
    if trial_id not in state.pending:
        raise UnknownTrialError(f"trial {trial_id} is not in flight")
    state.pending.discard(trial_id)
    t.worker_id = worker_id or t.worker_id
    t.completed_at = time.time() if now is None else now
    if isinstance(result, Observation):
        t.observation = result
        t.state = "completed"
    else:
        t.state = "failed"
        t.reason = str(result or "failed")
    return state


def best_feasible_trial(history: Iterable[TrialRecord]) -> Optional[TrialRecord]:
    """Feasible completion with the largest y; ties go to the lower trial id."""
    best = None
    for t in sorted(history, key=lambda t: t.trial_id):
        if t.state != "completed" or not t.observation.feasible:
            continue
        if best is None or t.observation.y > best.observation.y:
            best = t
    return best


def best_feasible(history: Iterable[TrialRecord]):
    """``(candidate, observation)`` of the best feasible completion, or None."""
    t = best_feasible_trial(history)
    return None if t is None else (t.candidate, t.observation)


def fit_models(trials: list[TrialRecord], space: ParamSpace, seed: int, lengthscale_max: float = 2.0):
    """Heteroskedastic objective GP and fixed-noise constraint GP on completed trials."""
    done = sorted((t for t in trials if t.state == "completed"), key=lambda t: t.trial_id)
    if not done:
        raise OrchestratorError("no completed trials to fit")
    X = np.array([encode(t.candidate, space) for t in done])
    obs = [t.observation for t in done]
    y = np.array([o.y for o in obs])
    y_var = np.array([o.y_var for o in obs])
    c = np.array([o.c for o in obs])
    c_var = np.array([o.c_var for o in obs])
    ls = (gp.LENGTHSCALE_BOUNDS[0], lengthscale_max)
    obj = gp.fit_heteroskedastic(X, y, y_var, seed=seed, lengthscale_bounds=ls)
    con = gp.fit(X, c, gp.NoiseSpec.fixed(c_var), seed=seed + 7, lengthscale_bounds=ls)
    return obj, con


# ---------------------------------------------------------------------------
# the loop


def make_pool(cfg: RunConfig):
    spec = cfg.workers
    kind, _, arg = spec.partition(":")
    if kind == "inline":
        return InlinePool(int(arg or cfg.max_in_flight))
    if kind == "threads":
        return ThreadPool(int(arg or cfg.max_in_flight))
    if kind == "socket":
        host, _, port = arg.rpartition(":")
        return SocketPool(host or "127.0.0.1", int(port or 0), cfg.heartbeat_timeout)
    raise ValueError(f"unknown worker pool {spec!r}")


class Coordinator:
    """Owns the loop state; every mutation happens on the calling thread."""

    def __init__(self, cfg: RunConfig, pool=None, clock: Callable[[], float] = time.time):
        self.cfg = cfg
        self.space = cfg.space
        self.pool = pool if pool is not None else make_pool(cfg)
        self.clock = clock
        self.state = LoopState()
        self.history = History(cfg.history_path) if cfg.history_path else None
        self.fits = 0
        self._design = None

    # persistence -----------------------------------------------------------

    def _persist(self, t: TrialRecord):
        if self.history is not None:
            self.history.append(t.to_dict())

    def _open_history(self, resume: bool):
        if self.history is None:
            return
        if self.history.exists():
            if not resume:
                raise HistoryError(f"{self.history.path} exists; pass resume to continue it")
            header, records = self.history.read()
            if header is None or header.get("format") != HISTORY_FORMAT:
                raise HistoryError(f"{self.history.path} has no run header")
            if header.get("config") != json.loads(json.dumps(self.cfg.identity())):
                raise HistoryError(f"{self.history.path} was written by a different run config")
            self.state.history = replay(records)
            return
        self.history.append({"record": "run", "format": HISTORY_FORMAT, "config": self.cfg.identity()})

    # proposals -------------------------------------------------------------

    def _design_point(self, index: int) -> dict:
        if self._design is None or index >= len(self._design):
            n = max(2 * self.cfg.n_init, index + 1, 8)
            self._design = sobol_points(self.space.dim, n, seed=self.cfg.master_seed)
        return decode(self._design[index], self.space)

    def _refit(self, seed):
        done = tuple(t.trial_id for t in self.state.history if t.state == "completed")
        if done != self.state.fitted_on:
            self.state.obj_model, self.state.con_model = fit_models(
                self.state.history, self.space, seed, self.cfg.lengthscale_max
            )
            self.state.fitted_on = done
            self.state.fit_seed = seed
            self.fits += 1

    def _next_trial(self) -> TrialRecord:
        tid = len(self.state.history)
        seed = trial_seed(self.cfg.master_seed, tid)
        live_design = sum(t.source == "design" and t.state != "failed" for t in self.state.history)
        if live_design < self.cfg.n_init or self.state.n_completed == 0:
            n_design = sum(t.source == "design" for t in self.state.history)
            cand, source = self._design_point(n_design), "design"
        else:
            self._refit(seed)
            pending = [self.state.history[i].candidate for i in sorted(self.state.pending)]
            cand, _, _ = maximize_nei(
                self.state.obj_model, self.state.con_model, self.space, pending,
                replace(self.cfg.acq, seed=seed),
            )
            source = "model"
        return TrialRecord(tid, cand, "proposed", seed, source, proposed_at=self.clock())

    def _dispatch(self, t: TrialRecord):
        t.state = "dispatched"
        self._persist(t)  # write-ahead
        self.state.pending.add(t.trial_id)
        self.pool.submit(t.trial_id, t.candidate, t.seed, self.cfg.evaluator, self.cfg.replicates)

    def _fill(self):
        cfg = self.cfg
        while (
            len(self.state.pending) < cfg.max_in_flight
            and self.state.n_completed + len(self.state.pending) < cfg.budget
            and self.pool.slots() > 0
        ):
            t = self._next_trial()
            self.state.history.append(t)
            self._persist(t)
            self._dispatch(t)

    def run(self, resume: bool = False) -> list[TrialRecord]:
        self._open_history(resume)
        self.pool.start()
        try:
            if isinstance(self.pool, SocketPool):
                self.pool.wait_ready()
            for t in self.state.history:
                if t.state in ("proposed", "dispatched"):
                    log.info("re-dispatching in-flight trial %d", t.trial_id)
                    self._dispatch(t)
            while self.state.n_completed < self.cfg.budget:
                self._fill()
                if not self.state.pending:
                    raise OrchestratorError("nothing in flight and budget not reached")
                n_failed = sum(t.state == "failed" for t in self.state.history)
                if n_failed > self.cfg.budget:
                    raise OrchestratorError(f"{n_failed} failed trials; giving up")
                ev: Completion = self.pool.next_event()
                result = ev.observation if not ev.failed else (ev.reason or "failed")
                handle_result(self.state, ev.trial_id, result, ev.worker_id, self.clock())
                t = self.state.history[ev.trial_id]
                self._persist(t)
                log.info("trial %d %s", t.trial_id, t.state)
        finally:
            self.pool.close()
        return self.state.history


def run_loop(cfg: RunConfig, resume: bool = False, pool=None) -> list[TrialRecord]:
    """Run (or resume) a BO loop until `cfg.budget` trials have completed."""
    return Coordinator(cfg, pool).run(resume=resume)


def random_search(cfg: RunConfig, pool=None) -> list[TrialRecord]:
    """Uniform random candidates under the same budget and trial seeds."""
    space = cfg.space
    rng = np.random.default_rng([cfg.master_seed, 0x5EED])
    pool = pool if pool is not None else InlinePool(1)
    pool.start()
    trials: list[TrialRecord] = []
    state = LoopState(history=trials)
    try:
        while state.n_completed < cfg.budget:
            tid = len(trials)
            t = TrialRecord(tid, decode(rng.random(space.dim), space), "dispatched",
                            trial_seed(cfg.master_seed, tid), "random")
            trials.append(t)
            state.pending.add(tid)
            pool.submit(tid, t.candidate, t.seed, cfg.evaluator, cfg.replicates)
            ev = pool.next_event()
            handle_result(state, ev.trial_id, ev.observation if not ev.failed else ev.reason, now=0.0)
    finally:
        pool.close()
    return trials


# ---------------------------------------------------------------------------
# config files


def _handle_from_section(sec) -> EvaluatorHandle:
    known = {"kind", "noise_sd", "gpu_budget"}
    options = {k: v for k, v in sec.items() if k not in known}
    return EvaluatorHandle(
        kind=sec["kind"],
        noise_sd=sec.getfloat("noise_sd", 0.0),
        gpu_budget=sec.getfloat("gpu_budget") if "gpu_budget" in sec else None,
        options=options,
    )


def acq_from_section(sec) -> AcqConfig:
    if sec is None:
        return AcqConfig()
    return AcqConfig(
        fantasy_count=sec.getint("fantasy_count", 64),
        restarts=sec.getint("restarts", 10),
        raw_samples=sec.getint("raw_samples", 512),
    )


def load_run_config(path, **overrides) -> RunConfig:
    """Read a run config: sections [run], [evaluator], optional [acquisition]."""
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(path):
        raise FileNotFoundError(path)
    run = cp["run"]
    handle = _handle_from_section(cp["evaluator"])
    space_file = run.get("space")
    base = Path(path).parent
    if space_file and (base / space_file).exists():
        space_file = str(base / space_file)
    space = load_space(space_file) if space_file else handle.space
    history = run.get("history")
    if history and not Path(history).is_absolute():
        history = str(base / history)
    kw = dict(
        evaluator=handle,
        budget=run.getint("budget"),
        n_init=run.getint("n_init", max(2 * space.dim, 8)),
        acq=acq_from_section(cp["acquisition"] if cp.has_section("acquisition") else None),
        master_seed=run.getint("seed", 0),
        max_in_flight=run.getint("max_in_flight", 1),
        history_path=history,
        space_file=space_file,
        replicates=run.getint("replicates", 1),
        workers=run.get("workers", "inline"),
        heartbeat_timeout=run.getfloat("heartbeat_timeout", 60.0),
        lengthscale_max=run.getfloat("lengthscale_max", 2.0),
    )
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**kw)
