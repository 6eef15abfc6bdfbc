"""BO-NEI versus random search over a set of seeds.

A suite is an INI file with a ``[suite]`` section (budget, n_init,
replicates, max_in_flight), an ``[evaluator]`` section and an optional
``[acquisition]`` section.  Suites shipped with the package can be named
without a path (``branin``, ``branin_constrained``, ``simulated_trainer``).

All values are on the engine's maximization scale: benchmark minima are
negated, so Branin's best value is ``-0.397887``.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .orchestrator import (
    RunConfig,
    TrialRecord,
    _handle_from_section,
    acq_from_section,
    best_feasible_trial,
    random_search,
    run_loop,
)
from .evaluators import true_constraint, true_value
from .stats import StatsError, convergence_trace, wilcoxon_signed_rank

METHODS = ("bo_nei", "random")
MIN_SEEDS = 5
SUITE_DIR = Path(__file__).parent / "suites"


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class Suite:
    name: str
    config: RunConfig


def load_suite(path_or_name) -> Suite:
    path = Path(path_or_name)
    if not path.exists():
        shipped = SUITE_DIR / f"{path_or_name}.conf"
        if not shipped.exists():
            raise FileNotFoundError(f"no suite file or shipped suite named {path_or_name!r}")
        path = shipped
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(path)
    sec = cp["suite"]
    handle = _handle_from_section(cp["evaluator"])
    cfg = RunConfig(
        evaluator=handle,
        budget=sec.getint("budget"),
        n_init=sec.getint("n_init", max(2 * handle.space.dim, 8)),
        acq=acq_from_section(cp["acquisition"] if cp.has_section("acquisition") else None),
        max_in_flight=sec.getint("max_in_flight", 1),
        replicates=sec.getint("replicates", 1),
        lengthscale_max=sec.getfloat("lengthscale_max", 2.0),
    )
    return Suite(sec.get("name", path.stem), cfg)


def history_trace(history: Sequence[TrialRecord]) -> list[tuple[int, Optional[float]]]:
    """(completion index, best feasible observed value so far) over completed trials."""
    done = [t for t in history if t.state == "completed"]
    done.sort(key=lambda t: (t.completed_at if t.completed_at is not None else 0.0, t.trial_id))
    vals = [t.observation.y if t.observation.feasible else None for t in done]
    return list(enumerate(convergence_trace(vals)))


def true_trace(history: Sequence[TrialRecord], handle) -> list[Optional[float]]:
    """Best noise-free value so far among truly feasible completed trials (trial-id order)."""
    vals = []
    for t in sorted(history, key=lambda t: t.trial_id):
        if t.state != "completed":
            continue
        ok = true_constraint(handle, t.candidate) <= 0
        vals.append(true_value(handle, t.candidate) if ok else None)
    return convergence_trace(vals)


@dataclass
class SeedRun:
    seed: int
    history: list
    true_best: list  # best-so-far noise-free value per completed trial
    observed_best: list  # best-so-far observed value per completed trial


@dataclass
class BenchmarkReport:
    suite: str
    seeds: tuple
    budget: int
    runs: dict = field(default_factory=dict)  # method -> list[SeedRun] in seed order
    wilcoxon_p: float = math.nan

    def trajectories(self, method: str) -> np.ndarray:
        """(seeds, budget) array of best-so-far true values, NaN before any feasible trial."""
        rows = [[math.nan if v is None else v for v in r.true_best] for r in self.runs[method]]
        return np.array(rows, dtype=float)

    def final(self, method: str) -> np.ndarray:
        return self.trajectories(method)[:, -1]

    def summary(self, method: str) -> dict:
        tr = self.trajectories(method)
        with np.errstate(all="ignore"):
            q = np.nanpercentile(np.where(np.isnan(tr), -np.inf, tr), [25, 50, 75], axis=0)
        q = np.where(np.isinf(q), np.nan, q)
        return {"q25": q[0], "median": q[1], "q75": q[2]}

    def best_candidates(self, method: str) -> list:
        out = []
        for r in self.runs[method]:
            t = best_feasible_trial(r.history)
            out.append(None if t is None else t.candidate)
        return out

    # serialization ------------------------------------------------------

    def trajectories_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "seed", "trial", "best_true", "best_observed"])
        for m in METHODS:
            for r in self.runs[m]:
                for i, (bt, bo) in enumerate(zip(r.true_best, r.observed_best)):
                    w.writerow([m, r.seed, i, _fmt(bt), _fmt(bo)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "trial", "q25", "median", "q75"])
        for m in METHODS:
            s = self.summary(m)
            for i in range(self.budget):
                w.writerow([m, i, _fmt(s["q25"][i]), _fmt(s["median"][i]), _fmt(s["q75"][i])])
        return buf.getvalue()

    def summary_json(self) -> str:
        body = {
            "suite": self.suite,
            "seeds": list(self.seeds),
            "budget": self.budget,
            "wilcoxon_p": _num(self.wilcoxon_p),
            "methods": {
                m: {
                    "final": [_num(v) for v in self.final(m)],
                    "final_median": _num(self.summary(m)["median"][-1]),
                    "final_iqr": [_num(self.summary(m)["q25"][-1]), _num(self.summary(m)["q75"][-1])],
                    "best_candidates": self.best_candidates(m),
                }
                for m in METHODS
            },
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, plots: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            f"{self.suite}_trajectories.csv": self.trajectories_csv(),
            f"{self.suite}_summary.csv": self.summary_csv(),
            f"{self.suite}_summary.json": self.summary_json(),
        }
        written = []
        for name, text in files.items():
            (out / name).write_text(text)
            written.append(out / name)
        if plots:
            from .plotting import plot_benchmark

            written.append(plot_benchmark(self, out / f"{self.suite}_convergence.png"))
        return written


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def _run_seed(suite: Suite, method: str, seed: int) -> SeedRun:
    cfg = replace(suite.config, master_seed=seed)
    hist = run_loop(cfg) if method == "bo_nei" else random_search(cfg)
    observed = [v for _, v in history_trace(hist)]
    return SeedRun(seed, hist, true_trace(hist, cfg.evaluator), observed)


def run_benchmark(suite, seeds: Sequence[int], methods: Sequence[str] = METHODS) -> BenchmarkReport:
    """Run every method on every seed and compare final best values.

    Parameters
    ----------
    suite : Suite, path or shipped suite name
    seeds : sequence of int
        At least five distinct master seeds.  Each seed gives both methods
        the same budget and the same per-trial evaluator seeds.

    Raises
    ------
    ValueError
        Fewer than five seeds, or repeated seeds.
    BenchmarkError
        A child run failed; the message names the seed and method.
    """
    if not isinstance(suite, Suite):
        suite = load_suite(suite)
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < MIN_SEEDS:
        raise ValueError(f"need at least {MIN_SEEDS} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    report = BenchmarkReport(suite.name, seeds, suite.config.budget)
    for m in methods:
        runs = []
        for s in seeds:
            try:
                runs.append(_run_seed(suite, m, s))
            except Exception as exc:
                raise BenchmarkError(f"{m} run for seed {s} failed: {exc}") from exc
        report.runs[m] = runs
    if set(METHODS) <= set(report.runs):
        a, b = report.final("bo_nei"), report.final("random")
        both = np.concatenate([a, b])
        if np.any(np.isnan(both)):
            # a seed without any feasible trial ranks below every feasible one
            floor = np.nanmin(both) - 1.0 if not np.all(np.isnan(both)) else 0.0
            a, b = np.nan_to_num(a, nan=floor), np.nan_to_num(b, nan=floor)
        try:
            report.wilcoxon_p = wilcoxon_signed_rank(a, b).p_value
        except StatsError:
            report.wilcoxon_p = 1.0  # no usable differences: no evidence either way
    return report
