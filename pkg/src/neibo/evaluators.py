"""Objective/constraint observations and desk-scale evaluators.

The engine maximizes.  Benchmark minimization problems are negated at the
handle boundary, so `observe` on Branin reports ``-branin(x)``.  Constraint
values are dimensionless with ``c <= 0`` feasible.
"""

from __future__ import annotations

import configparser
import importlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Mapping, Sequence

import numpy as np

from .space import (
    ParamSpace,
    ParamSpec,
    _require_valid,
    clip_to_space,
    encode,
    load_space,
    reference_candidates,
)

KINDS = ("branin", "hartmann6", "simulated_trainer", "external_worker")
N_FOLDS = 5

BRANIN_MIN = 0.397887357729738
BRANIN_ARGMINS = ((-math.pi, 12.275), (math.pi, 2.275), (9.42477796076938, 2.475))
HARTMANN6_MIN = -3.32236801141551
HARTMANN6_ARGMIN = (0.20168952, 0.15001069, 0.47687398, 0.27533243, 0.31165162, 0.65730054)


@dataclass(frozen=True)
class Observation:
    y: float
    y_var: float = 0.0
    c: float = -1.0
    c_var: float = 0.0

    def __post_init__(self):
        vals = (self.y, self.y_var, self.c, self.c_var)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"observation fields must be finite: {vals}")
        if self.y_var < 0 or self.c_var < 0:
            raise ValueError("observation variances must be >= 0")

    @property
    def feasible(self) -> bool:
        return self.c <= 0.0

    def to_dict(self) -> dict:
        return {"y": self.y, "y_var": self.y_var, "c": self.c, "c_var": self.c_var}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Observation":
        return cls(float(d["y"]), float(d["y_var"]), float(d["c"]), float(d["c_var"]))


@dataclass(frozen=True)
class FoldEvaluation:
    fold_index: int
    losses: tuple

    def __post_init__(self):
        if not 1 <= self.fold_index <= N_FOLDS:
            raise ValueError(f"fold_index must be in 1..{N_FOLDS}")
        losses = tuple(float(v) for v in self.losses)
        if any(not math.isfinite(v) or v < 0 for v in losses):
            raise ValueError("losses must be finite and >= 0")
        object.__setattr__(self, "losses", losses)


def mv_objective(folds: Sequence[FoldEvaluation], n_total: int) -> float:
    """One minus the mean per-item test loss across all folds."""
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    count = sum(len(f.losses) for f in folds)
    if count != n_total:
        raise ValueError(f"n_total={n_total} but folds hold {count} loss items")
    return 1.0 - math.fsum(v for f in folds for v in f.losses) / n_total


def fold_variance(folds: Sequence[FoldEvaluation]) -> float:
    """Variance of the MV estimate from the spread of per-fold mean losses."""
    means = np.array([np.mean(f.losses) for f in folds if f.losses])
    if means.size < 2:
        return 0.0
    return float(np.var(means, ddof=1) / means.size)


# ---------------------------------------------------------------------------
# closed-form benchmarks (minimization form)


def branin(x) -> float:
    x1, x2 = np.asarray(x, dtype=float)
    if not (-5.0 <= x1 <= 10.0 and 0.0 <= x2 <= 15.0):
        raise ValueError(f"branin input {x} outside [-5, 10] x [0, 15]")
    b = 5.1 / (4 * math.pi**2)
    c = 5.0 / math.pi
    t = 1.0 / (8 * math.pi)
    return (x2 - b * x1**2 + c * x1 - 6.0) ** 2 + 10.0 * (1 - t) * math.cos(x1) + 10.0


_H6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_H6_A = np.array(
    [
        [10, 3, 17, 3.5, 1.7, 8],
        [0.05, 10, 17, 0.1, 8, 14],
        [3, 3.5, 1.7, 10, 17, 8],
        [17, 8, 0.05, 10, 0.1, 14],
    ]
)
_H6_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)


def hartmann6(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (6,) or np.any(x < 0) or np.any(x > 1):
        raise ValueError("hartmann6 input must be a 6-vector in [0, 1]^6")
    inner = np.sum(_H6_A * (x - _H6_P) ** 2, axis=1)
    return float(-np.sum(_H6_ALPHA * np.exp(-inner)))


def branin_space() -> ParamSpace:
    return ParamSpace(
        (ParamSpec("x1", "continuous", -5.0, 10.0), ParamSpec("x2", "continuous", 0.0, 15.0))
    )


def hartmann6_space() -> ParamSpace:
    return ParamSpace(tuple(ParamSpec(f"x{i + 1}", "continuous", 0.0, 1.0) for i in range(6)))


# ---------------------------------------------------------------------------
# simulated trainer


def _floats(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split(",")])


@dataclass(frozen=True)
class SurfaceConfig:
    centers: np.ndarray  # (2, d) encoded
    heights: np.ndarray
    widths: np.ndarray  # (2, d)
    bowl: float
    per_filter: float
    per_batch: float
    budget: float
    amplitudes: np.ndarray = field(init=False)

    def __post_init__(self):
        # amplitudes chosen so the surface passes exactly through the heights
        G = np.array([[_bump(c, ci, wi) for ci, wi in zip(self.centers, self.widths)]
                      for c in self.centers])
        rhs = self.heights + np.array([_bowl(c, self.centers[0], self.bowl) for c in self.centers])
        object.__setattr__(self, "amplitudes", np.linalg.solve(G, rhs))


def _bump(u, center, width):
    return math.exp(-0.5 * float(np.sum(((u - center) / width) ** 2)))


def _bowl(u, center, coef):
    return coef * float(np.sum((u - center) ** 2)) / u.size


def gpu_usage(candidate: Mapping[str, float], per_filter: float, per_batch: float) -> float:
    filters = sum(v for k, v in candidate.items() if k.startswith("n_filter"))
    return per_filter * filters + per_batch * float(candidate["batch_size"])


def load_surface_config(text: str | None = None, space: ParamSpace | None = None) -> SurfaceConfig:
    if text is None:
        text = resources.files("neibo").joinpath("data", "simulated_trainer.conf").read_text()
    space = space or load_space("camus_unet")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    s, g = cp["surface"], cp["gpu"]
    refs = reference_candidates()
    names = [t.strip() for t in s["centers"].split(",")]
    centers = np.array([encode(clip_to_space(refs[n], space), space) for n in names])
    widths = np.array([_floats(s[f"widths_{i}"]) for i in range(len(names))])
    per_filter, per_batch = float(g["per_filter"]), float(g["per_batch"])
    published = clip_to_space(refs["published"], space)
    budget = gpu_usage(published, per_filter, per_batch) / float(g["published_fraction"])
    return SurfaceConfig(
        centers=centers,
        heights=_floats(s["heights"]),
        widths=widths,
        bowl=float(s["bowl"]),
        per_filter=per_filter,
        per_batch=per_batch,
        budget=budget,
    )


@lru_cache(maxsize=1)
def _default_surface() -> SurfaceConfig:
    return load_surface_config()


@lru_cache(maxsize=1)
def _camus_space() -> ParamSpace:
    return load_space("camus_unet")


def surface_value(u, cfg: SurfaceConfig) -> float:
    """Noise-free simulated MV at encoded point `u`."""
    u = np.asarray(u, dtype=float)
    total = sum(a * _bump(u, c, w) for a, c, w in zip(cfg.amplitudes, cfg.centers, cfg.widths))
    return total - _bowl(u, cfg.centers[0], cfg.bowl)


def simulated_trainer(candidate, seed: int, noise_sd: float = 0.0, config: SurfaceConfig | None = None):
    """Simulated training run: ``(mv_value, gpu_units)``.

    The value is the configured smooth surface plus N(0, noise_sd^2) noise
    drawn from `seed`; gpu units are affine in the filter counts and batch
    size.
    """
    cfg = config or _default_surface()
    space = _camus_space()
    u = encode(candidate, space)
    value = surface_value(u, cfg)
    if noise_sd > 0:
        value += noise_sd * np.random.default_rng(seed).standard_normal()
    return float(value), gpu_usage(candidate, cfg.per_filter, cfg.per_batch)


# ---------------------------------------------------------------------------
# handles


@dataclass(frozen=True)
class EvaluatorHandle:
    """What to evaluate and how noisily.

    options
        branin: ``exclude_minimum`` (index into BRANIN_ARGMINS) and
        ``exclude_radius`` make a disk around that minimum infeasible.
        external_worker: ``target`` names a ``module:callable`` taking
        ``(candidate, seed)`` and returning a mapping with y, y_var, c, c_var.
    """

    kind: str
    noise_sd: float = 0.0
    gpu_budget: float | None = None
    options: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown evaluator kind {self.kind!r}")
        if not math.isfinite(self.noise_sd) or self.noise_sd < 0:
            raise ValueError("noise_sd must be finite and >= 0")
        if self.gpu_budget is not None and not self.gpu_budget > 0:
            raise ValueError("gpu_budget must be positive")
        if isinstance(self.options, Mapping):
            object.__setattr__(self, "options", tuple(sorted(self.options.items())))

    @property
    def opts(self) -> dict:
        return dict(self.options)

    @property
    def space(self) -> ParamSpace:
        if self.kind == "branin":
            return branin_space()
        if self.kind == "hartmann6":
            return hartmann6_space()
        if self.kind == "simulated_trainer":
            return _camus_space()
        return load_space(self.opts.get("space", "camus_unet"))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "noise_sd": self.noise_sd,
            "gpu_budget": self.gpu_budget,
            "options": self.opts,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvaluatorHandle":
        return cls(
            kind=d["kind"],
            noise_sd=float(d.get("noise_sd", 0.0)),
            gpu_budget=d.get("gpu_budget"),
            options=dict(d.get("options") or {}),
        )


def _branin_constraint(h: EvaluatorHandle, x) -> float:
    opts = h.opts
    if "exclude_minimum" not in opts:
        return -1.0
    cx, cy = BRANIN_ARGMINS[int(opts["exclude_minimum"])]
    r0 = float(opts.get("exclude_radius", 3.0))
    d2 = (x[0] - cx) ** 2 + (x[1] - cy) ** 2
    return 1.0 - d2 / r0**2


def _noise_free(h: EvaluatorHandle, candidate) -> tuple[float, float]:
    """(maximization-sign objective, constraint) without observation noise."""
    if h.kind == "branin":
        x = (candidate["x1"], candidate["x2"])
        return -branin(x), _branin_constraint(h, x)
    if h.kind == "hartmann6":
        x = [candidate[f"x{i + 1}"] for i in range(6)]
        return -hartmann6(x), -1.0
    if h.kind == "simulated_trainer":
        value, units = simulated_trainer(candidate, 0, 0.0)
        budget = h.gpu_budget or _default_surface().budget
        return value, (units - budget) / budget
    raise ValueError(f"{h.kind} has no closed-form value")


def true_value(h: EvaluatorHandle, candidate) -> float:
    """Noise-free objective (maximization sign) at a candidate."""
    return _noise_free(h, candidate)[0]


def true_constraint(h: EvaluatorHandle, candidate) -> float:
    """Noise-free constraint value at a candidate (feasible when <= 0)."""
    return _noise_free(h, candidate)[1]


def _resolve_target(spec: str) -> Callable:
    module, _, attr = spec.partition(":")
    if not module or not attr:
        raise ValueError(f"target must look like 'module:callable', got {spec!r}")
    return getattr(importlib.import_module(module), attr)


def observe(h: EvaluatorHandle, candidate, replicates: int = 1, seed: int = 0) -> Observation:
    """Evaluate a candidate `replicates` times and summarize.

    ``y`` is the replicate mean and ``y_var`` its variance estimate (sample
    variance over replicates divided by their count).  With a single
    replicate the sample variance is undefined and ``noise_sd**2`` is
    reported instead.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    _require_valid(candidate, h.space)
    if h.kind == "external_worker":
        target = h.opts.get("target")
        if not target:
            raise ValueError("external_worker handle needs a 'target' option")
        return Observation.from_dict(_resolve_target(target)(dict(candidate), seed))
    f, c = _noise_free(h, candidate)
    rng = np.random.default_rng(seed)
    draws = f + h.noise_sd * rng.standard_normal(replicates)
    y = float(np.mean(draws))
    if replicates == 1:
        y_var = h.noise_sd**2
    else:
        y_var = float(np.var(draws, ddof=1) / replicates)
    return Observation(y=y, y_var=y_var, c=float(c), c_var=0.0)
