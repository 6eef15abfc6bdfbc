import math

import numpy as np
import pytest
from scipy.optimize import minimize

from neibo.evaluators import (
    BRANIN_ARGMINS,
    BRANIN_MIN,
    HARTMANN6_MIN,
    EvaluatorHandle,
    FoldEvaluation,
    Observation,
    branin,
    fold_variance,
    gpu_usage,
    hartmann6,
    load_surface_config,
    mv_objective,
    observe,
    simulated_trainer,
    true_constraint,
    true_value,
)
from neibo.space import clip_to_space, encode, load_space, reference_candidates


def branin_oracle():
    """Minima of Branin by a dense grid and local refinement of each basin."""
    x1 = np.linspace(-5, 10, 601)
    x2 = np.linspace(0, 15, 601)
    G1, G2 = np.meshgrid(x1, x2, indexing="ij")
    b, c, t = 5.1 / (4 * math.pi**2), 5 / math.pi, 1 / (8 * math.pi)
    F = (G2 - b * G1**2 + c * G1 - 6) ** 2 + 10 * (1 - t) * np.cos(G1) + 10
    # local minima of the grid, then polish with Nelder-Mead
    found = []
    for i in range(1, 600):
        for j in range(1, 600):
            patch = F[i - 1:i + 2, j - 1:j + 2]
            if F[i, j] == patch.min() and F[i, j] < 1.0:
                res = minimize(lambda z: branin(np.clip(z, [-5, 0], [10, 15])), [G1[i, j], G2[i, j]],
                               method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
                if all(math.dist(res.x, x) > 1e-3 for _, x in found):
                    found.append((res.fun, tuple(res.x)))
    return found


def _mv(cand):
    return simulated_trainer(cand, 0)[0]


class TestBranin:
    def test_oracle_minima(self):
        found = branin_oracle()
        assert len(found) == 3
        for val, x in found:
            assert val == pytest.approx(BRANIN_MIN, abs=1e-9)
            assert min(math.dist(x, a) for a in BRANIN_ARGMINS) < 1e-4

    def test_known_minima(self):
        vals = [branin(a) for a in BRANIN_ARGMINS]
        for v in vals:
            assert v == pytest.approx(0.397887, abs=1e-5)
        assert max(vals) - min(vals) < 1e-5

    def test_domain(self):
        with pytest.raises(ValueError):
            branin([-6.0, 1.0])
        with pytest.raises(ValueError):
            branin([0.0, 15.5])


class TestHartmann6:
    def test_multistart_oracle(self):
        rng = np.random.default_rng(0)
        best = math.inf
        for x0 in rng.random((40, 6)):
            res = minimize(lambda z: hartmann6(np.clip(z, 0, 1)), x0, method="L-BFGS-B",
                           bounds=[(0, 1)] * 6)
            best = min(best, res.fun)
        assert best == pytest.approx(HARTMANN6_MIN, abs=1e-5)
        assert best == pytest.approx(-3.32237, abs=1e-5)

    def test_domain(self):
        with pytest.raises(ValueError):
            hartmann6([0.5] * 5)
        with pytest.raises(ValueError):
            hartmann6([1.1] + [0.5] * 5)


class TestMvObjective:
    def test_perfect(self):
        folds = [FoldEvaluation(j, [0.0] * 3) for j in range(1, 6)]
        assert mv_objective(folds, 15) == 1.0

    def test_arithmetic(self):
        assert mv_objective([FoldEvaluation(1, [0.3, 0.3, 0.3, 0.3])], 4) == pytest.approx(0.7, abs=1e-15)

    def test_mixed_counts(self):
        counts = [3, 5, 2, 7, 3]
        folds, flat = [], []
        rng = np.random.default_rng(0)
        for j, n in enumerate(counts, start=1):
            losses = rng.uniform(0, 1, n)
            folds.append(FoldEvaluation(j, losses))
            flat.extend(losses)
        flat = np.array(flat)
        flat = flat * (0.42 / flat.mean())  # grand mean 0.42
        folds, k = [], 0
        for j, n in enumerate(counts, start=1):
            folds.append(FoldEvaluation(j, flat[k:k + n]))
            k += n
        assert mv_objective(folds, 20) == pytest.approx(0.58, abs=1e-12)

    def test_random_partitions(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(5, 60))
            losses = rng.exponential(0.5, n)
            cuts = np.sort(rng.choice(np.arange(1, n), 4, replace=False))
            parts = np.split(losses, cuts)
            folds = [FoldEvaluation(j + 1, p) for j, p in enumerate(parts)]
            assert abs(mv_objective(folds, n) - (1 - losses.mean())) <= 1e-12

    def test_monotone_and_bounded(self):
        base = [FoldEvaluation(1, [0.1, 0.2]), FoldEvaluation(2, [0.3])]
        worse = [FoldEvaluation(1, [0.1, 0.25]), FoldEvaluation(2, [0.3])]
        assert mv_objective(worse, 3) < mv_objective(base, 3) < 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            mv_objective([FoldEvaluation(1, [0.1])], 2)
        with pytest.raises(ValueError):
            mv_objective([], 0)
        with pytest.raises(ValueError):
            FoldEvaluation(6, [0.1])
        with pytest.raises(ValueError):
            FoldEvaluation(1, [-0.1])

    def test_fold_variance(self):
        folds = [FoldEvaluation(j, [m]) for j, m in enumerate([0.1, 0.2, 0.3], start=1)]
        assert fold_variance(folds) == pytest.approx(np.var([0.1, 0.2, 0.3], ddof=1) / 3)


class TestObservation:
    def test_rejects_bad_fields(self):
        with pytest.raises(ValueError):
            Observation(math.nan)
        with pytest.raises(ValueError):
            Observation(1.0, y_var=-1.0)

    def test_roundtrip(self):
        o = Observation(0.5, 0.01, -0.2, 0.0)
        assert Observation.from_dict(o.to_dict()) == o
        assert o.feasible and not Observation(0.5, c=0.1).feasible


class TestObserve:
    def test_branin_minimum(self):
        h = EvaluatorHandle("branin")
        o = observe(h, {"x1": math.pi, "x2": 2.275}, replicates=3, seed=0)
        assert o.y == pytest.approx(-0.397887, abs=1e-6)
        assert o.y_var == 0.0 and o.c < 0

    def test_single_replicate_fallback(self):
        h = EvaluatorHandle("branin", noise_sd=0.7)
        o = observe(h, {"x1": 0.0, "x2": 5.0}, replicates=1, seed=3)
        assert o.y_var == pytest.approx(0.49)

    def test_deterministic(self):
        h = EvaluatorHandle("hartmann6", noise_sd=0.1)
        c = {f"x{i + 1}": 0.3 for i in range(6)}
        assert observe(h, c, 4, 11) == observe(h, c, 4, 11)
        assert observe(h, c, 4, 11) != observe(h, c, 4, 12)

    def test_variance_scaling(self):
        h = EvaluatorHandle("branin", noise_sd=2.0)
        cand = {"x1": 1.0, "x2": 3.0}
        r = 4
        v = np.array([observe(h, cand, r, s).y_var for s in range(200)])
        # each y_var is chi^2_{r-1} * sd^2 / ((r - 1) r)
        expected = 4.0 / r
        se = expected * math.sqrt(2.0 / (r - 1)) / math.sqrt(200)
        assert abs(v.mean() - expected) < 3 * se

    def test_mean_variance(self):
        h = EvaluatorHandle("branin", noise_sd=2.0)
        cand = {"x1": 1.0, "x2": 3.0}
        ys = np.array([observe(h, cand, 4, s).y for s in range(2000)])
        assert ys.var(ddof=1) == pytest.approx(1.0, rel=0.1)
        assert ys.mean() == pytest.approx(-branin([1.0, 3.0]), abs=3 * 1 / math.sqrt(2000))

    def test_invalid_candidate(self):
        with pytest.raises(ValueError):
            observe(EvaluatorHandle("branin"), {"x1": 20.0, "x2": 1.0})

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            EvaluatorHandle("rosenbrock")

    def test_constrained_branin(self):
        h = EvaluatorHandle("branin", options={"exclude_minimum": "0", "exclude_radius": "3"})
        assert true_constraint(h, {"x1": -math.pi, "x2": 12.275}) == pytest.approx(1.0)
        assert true_constraint(h, {"x1": math.pi, "x2": 2.275}) < 0
        assert true_constraint(h, {"x1": -math.pi + 3.0, "x2": 12.275}) == pytest.approx(0.0)

    def test_external_worker(self):
        h = EvaluatorHandle("external_worker", options={"target": "tests.helpers:fake_trainer"})
        cand = clip_to_space(reference_candidates()["ap2_optimal"], load_space("camus_unet"))
        o = observe(h, cand, 1, 5)
        assert o.y == pytest.approx(0.5 + 5e-3)

    def test_handle_roundtrip(self):
        h = EvaluatorHandle("branin", 1.0, None, {"exclude_minimum": "1"})
        assert EvaluatorHandle.from_dict(h.to_dict()) == h


class TestSimulatedTrainer:
    def test_peak_value(self):
        refs = reference_candidates()
        assert _mv(refs["ap2_optimal"]) == pytest.approx(0.90, abs=1e-12)

    def test_published_value(self):
        space = load_space("camus_unet")
        pub = clip_to_space(reference_candidates()["published"], space)
        assert _mv(pub) == pytest.approx(0.84, abs=1e-12)

    def test_optimum_beats_published(self):
        space = load_space("camus_unet")
        refs = reference_candidates()
        assert _mv(refs["ap2_optimal"]) > _mv(clip_to_space(refs["published"], space))

    def test_deterministic(self):
        c = reference_candidates()["ap4_optimal"]
        assert simulated_trainer(c, 4, 0.02) == simulated_trainer(c, 4, 0.02)

    def test_noise_level(self):
        c = reference_candidates()["ap4_optimal"]
        vals = np.array([simulated_trainer(c, s, 0.02)[0] for s in range(4000)])
        assert vals.std(ddof=1) == pytest.approx(0.02, rel=0.05)

    def test_gpu_monotone(self):
        space = load_space("camus_unet")
        c = dict(reference_candidates()["ap2_optimal"])
        base = simulated_trainer(c, 0)[1]
        for k in range(1, 6):
            d = dict(c)
            d[f"n_filter_{k}"] = min(d[f"n_filter_{k}"] + 1, space[f"n_filter_{k}"].upper)
            assert simulated_trainer(d, 0)[1] > base

    def test_published_at_eighty_percent(self):
        cfg = load_surface_config()
        pub = clip_to_space(reference_candidates()["published"], load_space("camus_unet"))
        assert gpu_usage(pub, cfg.per_filter, cfg.per_batch) / cfg.budget == pytest.approx(0.8)
        h = EvaluatorHandle("simulated_trainer")
        assert true_constraint(h, pub) == pytest.approx(-0.2)

    def test_optimum_feasible(self):
        h = EvaluatorHandle("simulated_trainer")
        assert true_constraint(h, reference_candidates()["ap2_optimal"]) <= 0

    def test_true_value_matches(self):
        h = EvaluatorHandle("simulated_trainer")
        c = reference_candidates()["ap4_optimal"]
        assert true_value(h, c) == simulated_trainer(c, 0)[0]

    def test_peak_is_near_global(self):
        space = load_space("camus_unet")
        cfg = load_surface_config()
        rng = np.random.default_rng(0)
        from neibo.evaluators import surface_value

        vals = [surface_value(u, cfg) for u in rng.random((5000, space.dim))]
        assert max(vals) < 0.90
