"""Expected improvement, constraint weighting and noisy EI by fantasy averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit
from scipy.stats import norm

from . import gp
from .space import ParamSpace, decode, encode, snap, sobol_points


@dataclass(frozen=True)
class AcqConfig:
    fantasy_count: int = 64
    restarts: int = 10
    raw_samples: int = 512
    seed: int = 0
    step_init: float = 0.1
    step_min: float = 1e-4

    def __post_init__(self):
        if self.fantasy_count < 1 or self.restarts < 1:
            raise ValueError("fantasy_count and restarts must be >= 1")
        if self.raw_samples < self.restarts:
            raise ValueError("raw_samples must be >= restarts")


def expected_improvement(mean, std, best):
    """Closed-form EI of a Gaussian over `best`; vectorized over inputs."""
    mean, std, best = np.broadcast_arrays(
        np.asarray(mean, dtype=float), np.asarray(std, dtype=float), np.asarray(best, dtype=float)
    )
    if np.any(std < 0):
        raise ValueError("std must be >= 0")
    shape = mean.shape
    mean, std, best = (np.atleast_1d(a).ravel() for a in (mean, std, best))
    delta = mean - best
    out = np.maximum(delta, 0.0)
    pos = std > 0
    if np.any(pos):
        s = std[pos]
        z = delta[pos] / s
        out[pos] = delta[pos] * norm.cdf(z) + s * norm.pdf(z)
    out = np.maximum(out, 0.0).reshape(shape)
    return out.item() if out.ndim == 0 else out


def feasibility_weight(c_val):
    """1 - sigmoid(c): near 1 for c << 0, near 0 for c >> 0."""
    return expit(-np.asarray(c_val, dtype=float))


def weighted_objective(f_val, c_val):
    """f * (1 - 1 / (1 + exp(-c)))."""
    out = np.asarray(f_val, dtype=float) * (1.0 - expit(np.asarray(c_val, dtype=float)))
    return out.item() if out.ndim == 0 else out


class FantasyEnsemble:
    """`k` paired objective/constraint fantasy models.

    Pair ``i`` is the objective (constraint) model conditioned without
    noise on the ``i``-th joint posterior draw at the observed inputs.  Once
    the latent values at the observed inputs are pinned, the original noisy
    rows carry no further information, so every pair reduces to a
    noiseless GP on ``(X, draw_i)`` with the base hyperparameters: all
    pairs share one factorization.  Pending inputs are added at each
    fantasy's own posterior mean, which leaves means unchanged and shrinks
    the objective variance around them.
    """

    def __init__(self, obj: gp.GpModel, con: gp.GpModel, k: int, seed: int, pending=None):
        if k < 1:
            raise ValueError("k must be >= 1")
        if obj.X.shape != con.X.shape or not np.allclose(obj.X, con.X):
            raise ValueError("objective and constraint must share training inputs")
        self.k = k
        self.seed = seed
        self.obj, self.con = obj, con
        X = obj.X
        ss = np.random.SeedSequence(seed).spawn(2)
        f_seed = int(ss[0].generate_state(1)[0])
        c_seed = int(ss[1].generate_state(1)[0])
        # standardized units of each base model
        self.F = obj.standardize(gp.sample_observed(obj, k, f_seed))
        self.C = gp.sample_observed(con, k, c_seed)

        self._obj = _SharedNoiseless(obj.kernel, X, self.F)
        self._con = _SharedNoiseless(con.kernel, X, con.standardize(self.C))
        self._obj_var = self._obj
        if pending is not None and len(pending):
            P = np.atleast_2d(np.asarray(pending, dtype=float))
            P_mean = self._obj.mean(P)  # (k, p)
            self._obj_var = _SharedNoiseless(
                obj.kernel, np.vstack([X, P]), np.hstack([self.F, P_mean])
            )

        # worst observed value maps to zero so the weight acts as a penalty
        self.anchor = float(obj.standardize(np.min(obj.y)))
        c_raw = self.C
        self.best = np.max(
            weighted_objective(self.F - self.anchor, c_raw), axis=1
        )  # (k,)

    def pair_means(self, Xq):
        """Per-pair objective (standardized, anchored) and raw constraint means."""
        f = self._obj.mean(Xq) - self.anchor
        c = self.con.y_mean + self.con.y_std * self._con.mean(Xq)
        return f, c

    def objective_std(self, Xq):
        return np.sqrt(self._obj_var.var(Xq))

    def nei(self, Xq) -> np.ndarray:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        f, c = self.pair_means(Xq)  # (k, m)
        sd = self.objective_std(Xq)  # (m,)
        w = feasibility_weight(c)
        ei = expected_improvement(f * w, sd[None, :] * w, self.best[:, None])
        # ordered mean over pairs, output units
        return self.obj.y_std * np.mean(ei, axis=0)


class _SharedNoiseless:
    """Noiseless GP posteriors for several target vectors at the same inputs."""

    def __init__(self, kernel: gp.KernelParams, X, Y):
        self.kernel = kernel
        self.X = X
        K = gp.kernel_matrix(X, X, kernel)
        self.L, _ = gp._cholesky(K)
        Y = np.atleast_2d(Y)
        self.A = linalg.cho_solve((self.L, True), (Y - kernel.constant_mean).T)  # (n, k)

    def mean(self, Xq):
        Kq = gp.kernel_matrix(Xq, self.X, self.kernel)
        return self.kernel.constant_mean + (Kq @ self.A).T

    def var(self, Xq):
        Kq = gp.kernel_matrix(Xq, self.X, self.kernel)
        v = linalg.solve_triangular(self.L, Kq.T, lower=True, check_finite=False)
        return np.maximum(self.kernel.signal_variance - np.sum(v**2, axis=0), 0.0)


def nei(obj: gp.GpModel, con: gp.GpModel, Xq, cfg: AcqConfig, pending=None) -> np.ndarray:
    """Noisy expected improvement of the constraint-weighted objective at `Xq`."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if Xq.shape[0] == 0:
        raise ValueError("Xq must be nonempty")
    return FantasyEnsemble(obj, con, cfg.fantasy_count, cfg.seed, pending).nei(Xq)


def pattern_search(fun, starts, step_init=0.1, step_min=1e-4, max_iter=500):
    """Maximize `fun` over [0, 1]^d by compass search from each start.

    `fun` maps an (m, d) array to m values.  Every start polls +/- step
    along each coordinate, moves to its best improving poll, and halves
    its step when nothing improves.  Starts are searched in lockstep so
    each iteration is one batched call.
    """
    x = np.array(starts, dtype=float)
    s, d = x.shape
    fx = np.asarray(fun(x), dtype=float)
    step = np.full(s, float(step_init))
    eye = np.eye(d)
    for _ in range(max_iter):
        active = np.flatnonzero(step >= step_min)
        if active.size == 0:
            break
        dirs = np.concatenate([eye, -eye])  # (2d, d)
        polls = np.clip(x[active, None, :] + step[active, None, None] * dirs[None], 0.0, 1.0)
        vals = np.asarray(fun(polls.reshape(-1, d)), dtype=float).reshape(active.size, 2 * d)
        j = np.argmax(vals, axis=1)
        best = vals[np.arange(active.size), j]
        improved = best > fx[active]
        moved = active[improved]
        x[moved] = polls[improved, j[improved]]
        fx[moved] = best[improved]
        step[active[~improved]] *= 0.5
    return x, fx


def maximize_nei(
    obj: gp.GpModel,
    con: gp.GpModel,
    space: ParamSpace,
    pending: Sequence[dict] = (),
    cfg: AcqConfig = AcqConfig(),
):
    """Argmax of NEI over the encoded space: ``(candidate, encoded, nei)``.

    Raw low-discrepancy samples seed a compass search from the best
    `cfg.restarts` of them; the refined points are snapped to the
    integer/binary grid and the best snapped point is decoded.
    """
    if obj is None or obj.n < 1:
        raise ValueError("propose needs at least one completed observation")
    P = np.array([encode(c, space) for c in pending]) if len(pending) else None
    ens = FantasyEnsemble(obj, con, cfg.fantasy_count, cfg.seed, P)
    raw = sobol_points(space.dim, cfg.raw_samples, seed=cfg.seed)
    vals = ens.nei(raw)
    top = raw[np.argsort(-vals, kind="stable")[: cfg.restarts]]
    # the best observed inputs are good starts once the model is informative
    order = np.argsort(-obj.y, kind="stable")[: max(1, cfg.restarts // 2)]
    starts = np.vstack([top, np.clip(obj.X[order], 0.0, 1.0)])
    x, _ = pattern_search(ens.nei, starts, cfg.step_init, cfg.step_min)
    snapped = np.array([snap(u, space) for u in x])
    snapped = np.vstack([snapped, _binary_flips(snapped, space)])
    scores = ens.nei(snapped)
    best = int(np.argmax(scores))
    return decode(snapped[best], space), snapped[best], float(scores[best])


def _binary_flips(U, space: ParamSpace) -> np.ndarray:
    """Copies of each row with one binary coordinate toggled."""
    cols = [j for j, p in enumerate(space.specs) if p.kind == "binary"]
    out = []
    for j in cols:
        V = U.copy()
        V[:, j] = 1.0 - np.round(V[:, j])
        out.append(V)
    return np.vstack(out) if out else np.empty((0, U.shape[1]))


def propose(obj, con, space, pending=(), cfg: AcqConfig = AcqConfig()) -> dict:
    """Next candidate to evaluate, given completed data and in-flight candidates."""
    return maximize_nei(obj, con, space, pending, cfg)[0]
