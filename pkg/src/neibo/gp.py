"""Exact Gaussian-process regression with an ARD Matern 5/2 kernel.

Three noise models are supported: a learned homoskedastic variance, fixed
per-point variances, and a heteroskedastic model whose per-point variances
come from a second GP fitted to log-variances.

Targets are standardized before fitting.  Kernel hyperparameters
(`KernelParams`) live in standardized units; `GpModel.prior_mean` and
`GpModel.prior_variance` give the corresponding output-scale values.
Models are immutable: `fit`, `condition` and friends return new objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

SQRT5 = np.sqrt(5.0)

LENGTHSCALE_BOUNDS = (1e-3, 1e3)
SIGNAL_VARIANCE_BOUNDS = (1e-6, 1e3)
NOISE_VARIANCE_BOUNDS = (1e-8, 1e1)
N_RESTARTS = 5
JITTER_REL = 1e-10
JITTER_MAX_REL = 1e-4
LOG_VAR_FLOOR = 1e-12
DUPLICATE_TOL = 1e-10


class SingularModelError(np.linalg.LinAlgError):
    """Covariance could not be factorized within the jitter budget."""


@dataclass(frozen=True)
class KernelParams:
    signal_variance: float
    lengthscales: np.ndarray
    constant_mean: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    """Observation-noise model.

    kind is one of ``"homoskedastic"`` (``variance`` learned, output units),
    ``"fixed"`` (``variances`` per training point, output units) or
    ``"heteroskedastic"`` (``inner`` is a GpModel over log-variance).
    """

    kind: str
    variance: float = 0.0
    variances: Optional[np.ndarray] = None
    inner: Optional["GpModel"] = None

    def __post_init__(self):
        if self.kind not in ("homoskedastic", "fixed", "heteroskedastic"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "fixed":
            v = np.asarray(self.variances, dtype=float)
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError("fixed noise variances must be finite and >= 0")
            object.__setattr__(self, "variances", v)
        if self.kind == "heteroskedastic" and self.inner is None:
            raise ValueError("heteroskedastic noise needs an inner model")

    @classmethod
    def fixed(cls, variances) -> "NoiseSpec":
        return cls("fixed", variances=np.asarray(variances, dtype=float))

    @classmethod
    def homoskedastic(cls) -> "NoiseSpec":
        return cls("homoskedastic")


@dataclass(frozen=True)
class PosteriorDistribution:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()


@dataclass(frozen=True, eq=False)
class GpModel:
    X: np.ndarray
    y: np.ndarray  # output units
    kernel: KernelParams
    noise: NoiseSpec
    noise_var: np.ndarray  # per-point, standardized units
    y_mean: float
    y_std: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    fit_trace: tuple = field(default=(), repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def prior_mean(self) -> float:
        return self.y_mean + self.y_std * self.kernel.constant_mean

    @property
    def prior_variance(self) -> float:
        return self.y_std**2 * self.kernel.signal_variance

    @property
    def diag(self) -> np.ndarray:
        """Per-point diagonal added to K(X, X), standardized units (noise + jitter)."""
        return self.noise_var + self.jitter

    def standardize(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def log_marginal_likelihood(self) -> float:
        r = self.standardize(self.y) - self.kernel.constant_mean
        return float(
            -0.5 * r @ self.alpha
            - np.sum(np.log(np.diag(self.chol)))
            - 0.5 * self.n * np.log(2 * np.pi)
        )


# ---------------------------------------------------------------------------
# kernel


def matern52(a, b, k: KernelParams) -> float:
    """Matern 5/2 covariance between two points."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.shape != k.lengthscales.shape:
        raise ValueError("dimension mismatch between points and lengthscales")
    r = np.sqrt(np.sum(((a - b) / k.lengthscales) ** 2))
    return float(k.signal_variance * (1 + SQRT5 * r + 5.0 * r**2 / 3.0) * np.exp(-SQRT5 * r))


def _scaled_sqdist(A, B, lengthscales):
    A = A / lengthscales
    B = B / lengthscales
    d2 = (
        np.sum(A**2, axis=1)[:, None]
        + np.sum(B**2, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    return np.maximum(d2, 0.0)


def kernel_matrix(A, B, k: KernelParams) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != k.lengthscales.size or B.shape[1] != k.lengthscales.size:
        raise ValueError("dimension mismatch between inputs and lengthscales")
    r = np.sqrt(_scaled_sqdist(A, B, k.lengthscales))
    return k.signal_variance * (1 + SQRT5 * r + (5.0 / 3.0) * r**2) * np.exp(-SQRT5 * r)


def _sq_diffs(X):
    """Per-dimension squared differences, (n, n, d)."""
    return (X[:, None, :] - X[None, :, :]) ** 2


# ---------------------------------------------------------------------------
# factorization


def _cholesky(K, base_scale=None):
    """Cholesky with escalating diagonal jitter; returns (L, jitter)."""
    n = K.shape[0]
    scale = base_scale if base_scale is not None else max(np.trace(K) / n, 1e-300)
    jitter = JITTER_REL * scale
    while True:
        try:
            L = linalg.cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            return L, jitter
        except linalg.LinAlgError:
            pass
        jitter *= 10.0
        if jitter > JITTER_MAX_REL * scale * (1 + 1e-9):
            raise SingularModelError("covariance not positive definite after jitter escalation")


def _check_duplicates(X, y_std_units, noise_var):
    """Noiseless rows at the same input must agree on their value."""
    quiet = np.flatnonzero(noise_var <= LOG_VAR_FLOOR)
    if quiet.size < 2:
        return
    Xq = X[quiet]
    d2 = np.sum((Xq[:, None, :] - Xq[None, :, :]) ** 2, axis=-1)
    ii, jj = np.nonzero(np.triu(d2 <= DUPLICATE_TOL**2, k=1))
    for i, j in zip(ii, jj):
        if abs(y_std_units[quiet[i]] - y_std_units[quiet[j]]) > 1e-8:
            raise SingularModelError(
                "conflicting noiseless observations at the same input"
            )


def _build(X, y, kernel, noise, noise_var, y_mean, y_std, fit_trace=()):
    X = np.asarray(X, dtype=float)
    ys = (np.asarray(y, dtype=float) - y_mean) / y_std
    _check_duplicates(X, ys, noise_var)
    K = kernel_matrix(X, X, kernel) + np.diag(noise_var)
    L, jitter = _cholesky(K)
    alpha = linalg.cho_solve((L, True), ys - kernel.constant_mean, check_finite=False)
    return GpModel(
        X=X,
        y=np.asarray(y, dtype=float),
        kernel=kernel,
        noise=noise,
        noise_var=np.asarray(noise_var, dtype=float),
        y_mean=float(y_mean),
        y_std=float(y_std),
        chol=L,
        alpha=alpha,
        jitter=jitter,
        fit_trace=tuple(fit_trace),
    )


# ---------------------------------------------------------------------------
# hyperparameter fitting


def _neg_lml(theta, D2, ys, fixed_noise, learn_noise):
    n, _, d = D2.shape
    inv_l2 = np.exp(-2.0 * theta[:d])
    s = np.exp(theta[d])
    mean = theta[d + 1]
    r = np.sqrt(np.tensordot(D2, inv_l2, axes=1))
    e = np.exp(-SQRT5 * r)
    K = s * (1 + SQRT5 * r + (5.0 / 3.0) * r**2) * e
    if learn_noise:
        noise = np.full(n, np.exp(theta[d + 2]))
    else:
        noise = fixed_noise
    try:
        L, _ = _cholesky(K + np.diag(noise))
    except SingularModelError:
        return 1e25, np.zeros_like(theta)
    resid = ys - mean
    alpha = linalg.cho_solve((L, True), resid, check_finite=False)
    lml = -0.5 * resid @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
    Kinv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    # dK/dlog(l_k) = s * 5/3 * (1 + sqrt5 r) e^{-sqrt5 r} * D2_k / l_k^2
    common = W * (s * (5.0 / 3.0) * (1 + SQRT5 * r) * e)
    grad = np.empty_like(theta)
    grad[:d] = 0.5 * np.tensordot(common, D2, axes=2) * inv_l2
    grad[d] = 0.5 * np.sum(W * K)
    grad[d + 1] = np.sum(alpha)
    if learn_noise:
        grad[d + 2] = 0.5 * np.trace(W) * noise[0]
    return -lml, -grad


def _theta_bounds(d, learn_noise, lengthscale_bounds=LENGTHSCALE_BOUNDS):
    b = [tuple(np.log(lengthscale_bounds))] * d
    b.append(tuple(np.log(SIGNAL_VARIANCE_BOUNDS)))
    b.append((-10.0, 10.0))
    if learn_noise:
        b.append(tuple(np.log(NOISE_VARIANCE_BOUNDS)))
    return b


def _initial_thetas(d, learn_noise, rng, n_restarts):
    first = [np.log(0.5)] * d + [0.0, 0.0]
    if learn_noise:
        first.append(np.log(1e-2))
    inits = [np.array(first)]
    for _ in range(n_restarts - 1):
        t = list(rng.uniform(np.log(0.05), np.log(2.0), size=d))
        t.append(rng.uniform(np.log(0.2), np.log(5.0)))
        t.append(rng.normal(0.0, 0.5))
        if learn_noise:
            t.append(rng.uniform(np.log(1e-6), np.log(0.5)))
        inits.append(np.array(t))
    return inits


def _standardization(y):
    y = np.asarray(y, dtype=float)
    mu = float(np.mean(y))
    sd = float(np.std(y))
    if not sd > 1e-12 * max(1.0, abs(mu)):
        sd = 1.0
    return mu, sd


def fit(
    X,
    y,
    noise: NoiseSpec | None = None,
    seed: int = 0,
    n_restarts: int = N_RESTARTS,
    lengthscale_bounds: tuple[float, float] = LENGTHSCALE_BOUNDS,
) -> GpModel:
    """Fit kernel hyperparameters by maximizing the log marginal likelihood.

    Parameters
    ----------
    X : (n, d) array
        Inputs, normally encoded to the unit cube.
    y : (n,) array
        Targets in output units.
    noise : NoiseSpec, optional
        ``NoiseSpec.fixed(variances)`` or ``NoiseSpec.homoskedastic()``
        (default).  Fixed variances are in output units.
    seed : int
        Seeds the random restarts; the first restart is always a fixed
        default point.
    n_restarts : int
        Number of local L-BFGS-B runs.
    lengthscale_bounds : (float, float)
        Box for every lengthscale.  On unit-cube inputs an upper bound of a
        few units keeps weakly sampled dimensions from being switched off.

    Returns
    -------
    GpModel
        Model at the best restart.  ``fit_trace`` holds one
        ``(initial_lml, final_lml)`` pair per restart.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size or y.size < 1:
        raise ValueError("X and y must have the same, nonzero number of rows")
    if noise is None:
        noise = NoiseSpec.homoskedastic()
    n, d = X.shape
    y_mean, y_std = _standardization(y)
    ys = (y - y_mean) / y_std
    learn_noise = noise.kind == "homoskedastic"
    if noise.kind == "fixed":
        if noise.variances.shape != (n,):
            raise ValueError("fixed noise needs one variance per training point")
        fixed = noise.variances / y_std**2
    elif noise.kind == "heteroskedastic":
        fixed = predict_noise(noise.inner, X) / y_std**2
    else:
        fixed = None
    if fixed is not None:
        _check_duplicates(X, ys, fixed)

    rng = np.random.default_rng(seed)
    D2 = _sq_diffs(X)
    bounds = _theta_bounds(d, learn_noise, lengthscale_bounds)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    best_theta, best_val = None, np.inf
    trace = []
    for theta0 in _initial_thetas(d, learn_noise, rng, n_restarts):
        theta0 = np.clip(theta0, lo, hi)
        f0, _ = _neg_lml(theta0, D2, ys, fixed, learn_noise)
        res = minimize(
            _neg_lml,
            theta0,
            args=(D2, ys, fixed, learn_noise),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": 200},
        )
        theta, val = (res.x, float(res.fun)) if res.fun <= f0 else (theta0, f0)
        trace.append((-f0, -val))
        if val < best_val:
            best_theta, best_val = theta, val
    if best_theta is None or not np.isfinite(best_val) or best_val >= 1e25:
        raise SingularModelError("no restart produced a factorizable covariance")

    kernel = KernelParams(
        signal_variance=float(np.exp(best_theta[d])),
        lengthscales=np.exp(best_theta[:d]),
        constant_mean=float(best_theta[d + 1]),
    )
    if learn_noise:
        nv = float(np.exp(best_theta[d + 2]))
        noise = NoiseSpec("homoskedastic", variance=nv * y_std**2)
        noise_var = np.full(n, nv)
    else:
        noise_var = fixed
    return _build(X, y, kernel, noise, noise_var, y_mean, y_std, trace)


def from_hyperparameters(X, y, kernel: KernelParams, noise: NoiseSpec, y_mean=None, y_std=None) -> GpModel:
    """Build a model with given hyperparameters (no optimization)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y_mean is None or y_std is None:
        y_mean, y_std = _standardization(y)
    n = y.size
    if noise.kind == "fixed":
        noise_var = noise.variances / y_std**2
    elif noise.kind == "heteroskedastic":
        noise_var = predict_noise(noise.inner, X) / y_std**2
    else:
        noise_var = np.full(n, noise.variance / y_std**2)
    return _build(X, y, kernel, noise, noise_var, y_mean, y_std)


def fit_heteroskedastic(X, y, var_y, seed: int = 0, lengthscale_bounds=LENGTHSCALE_BOUNDS) -> GpModel:
    """Outer GP whose per-point noise is predicted by an inner GP on log-variance."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    var_y = np.asarray(var_y, dtype=float).ravel()
    if np.any(var_y < 0) or var_y.size != np.size(y):
        raise ValueError("var_y must be >= 0 and match y")
    inner = fit(X, np.log(var_y + LOG_VAR_FLOOR), NoiseSpec.homoskedastic(), seed=seed,
                lengthscale_bounds=lengthscale_bounds)
    return fit(X, y, NoiseSpec("heteroskedastic", inner=inner), seed=seed + 1,
               lengthscale_bounds=lengthscale_bounds)


def predict_noise(model: GpModel, Xq) -> np.ndarray:
    """Noise variance predicted by a log-variance model, floored at LOG_VAR_FLOOR."""
    mean, _ = predict(model, Xq)
    return np.maximum(np.exp(mean), LOG_VAR_FLOOR)


def noise_variance(model: GpModel, Xq) -> np.ndarray:
    """Observation-noise variance of `model` at `Xq`, output units."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if model.noise.kind == "heteroskedastic":
        return predict_noise(model.noise.inner, Xq)
    if model.noise.kind == "homoskedastic":
        return np.full(Xq.shape[0], model.noise.variance)
    raise ValueError("fixed-noise models have no noise prediction off the training set")


# ---------------------------------------------------------------------------
# prediction


def _check_query(model, Xq):
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if Xq.shape[1] != model.dim or Xq.shape[0] == 0:
        raise ValueError(f"query must be a nonempty (m, {model.dim}) array")
    return Xq


def predict(model: GpModel, Xq):
    """Latent posterior mean and marginal variance, output units."""
    Xq = _check_query(model, Xq)
    Kq = kernel_matrix(Xq, model.X, model.kernel)
    mean = model.kernel.constant_mean + Kq @ model.alpha
    v = linalg.solve_triangular(model.chol, Kq.T, lower=True, check_finite=False)
    var = np.maximum(model.kernel.signal_variance - np.sum(v**2, axis=0), 0.0)
    return model.y_mean + model.y_std * mean, model.y_std**2 * var


def posterior(model: GpModel, Xq) -> PosteriorDistribution:
    """Joint latent posterior at `Xq` (observation noise excluded), output units."""
    Xq = _check_query(model, Xq)
    Kq = kernel_matrix(Xq, model.X, model.kernel)
    mean = model.kernel.constant_mean + Kq @ model.alpha
    v = linalg.solve_triangular(model.chol, Kq.T, lower=True, check_finite=False)
    cov = kernel_matrix(Xq, Xq, model.kernel) - v.T @ v
    cov = 0.5 * (cov + cov.T)
    return PosteriorDistribution(
        mean=model.y_mean + model.y_std * mean, covariance=model.y_std**2 * cov
    )


def sample_joint(model: GpModel, Xq, count: int, seed: int) -> np.ndarray:
    """`count` joint draws of the latent function at `Xq`; shape (count, m)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    post = posterior(model, Xq)
    m = post.mean.size
    scale = max(np.trace(post.covariance) / m, model.prior_variance)
    L, _ = _cholesky(post.covariance, base_scale=scale)
    z = np.random.default_rng(seed).standard_normal((count, m))
    return post.mean[None, :] + z @ L.T


def sample_observed(model: GpModel, count: int, seed: int) -> np.ndarray:
    """Joint latent draws at the training inputs; shape (count, n).

    Uses K - K B^-1 K = D - D B^-1 D (B = K + D) with D the observation
    noise only, so jitter never leaks in as noise: rows observed without
    noise are reproduced exactly.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    nv = model.noise_var
    mean = model.standardize(model.y) - nv * model.alpha
    root = np.sqrt(nv)
    S = linalg.cho_solve((model.chol, True), np.diag(root), check_finite=False)
    M = np.eye(model.n) - root[:, None] * S
    M = 0.5 * (M + M.T)
    L, _ = _cholesky(M, base_scale=1.0)
    z = np.random.default_rng(seed).standard_normal((count, model.n))
    draws = mean[None, :] + (z @ L.T) * root[None, :]
    return model.y_mean + model.y_std * draws


def condition(model: GpModel, Xf, yf) -> GpModel:
    """Add noiseless observations without refitting hyperparameters."""
    Xf = np.atleast_2d(np.asarray(Xf, dtype=float)).reshape(-1, model.dim)
    yf = np.asarray(yf, dtype=float).ravel()
    if Xf.shape[0] != yf.size:
        raise ValueError("Xf and yf must have the same number of rows")
    if yf.size == 0:
        return model
    return _build(
        np.vstack([model.X, Xf]),
        np.concatenate([model.y, yf]),
        model.kernel,
        model.noise,
        np.concatenate([model.noise_var, np.zeros(yf.size)]),
        model.y_mean,
        model.y_std,
    )


def with_kernel(model: GpModel, **changes) -> GpModel:
    """Rebuild a model with some kernel fields replaced (testing helper)."""
    return _build(
        model.X, model.y, replace(model.kernel, **changes), model.noise,
        model.noise_var, model.y_mean, model.y_std,
    )


# ---------------------------------------------------------------------------
# serialization


def to_dict(model: GpModel) -> dict:
    out = {
        "X": model.X.tolist(),
        "y": model.y.tolist(),
        "signal_variance": model.kernel.signal_variance,
        "lengthscales": model.kernel.lengthscales.tolist(),
        "constant_mean": model.kernel.constant_mean,
        "y_mean": model.y_mean,
        "y_std": model.y_std,
        "noise_kind": model.noise.kind,
    }
    if model.noise.kind == "fixed":
        out["noise_variances"] = model.noise.variances.tolist()
    elif model.noise.kind == "homoskedastic":
        out["noise_variance"] = model.noise.variance
    else:
        out["inner"] = to_dict(model.noise.inner)
    return out


def from_dict(d: dict) -> GpModel:
    kind = d["noise_kind"]
    if kind == "fixed":
        noise = NoiseSpec.fixed(d["noise_variances"])
    elif kind == "homoskedastic":
        noise = NoiseSpec("homoskedastic", variance=d["noise_variance"])
    else:
        noise = NoiseSpec("heteroskedastic", inner=from_dict(d["inner"]))
    kernel = KernelParams(d["signal_variance"], np.asarray(d["lengthscales"]), d["constant_mean"])
    return from_hyperparameters(d["X"], d["y"], kernel, noise, d["y_mean"], d["y_std"])
