"""Importable callables for external-worker evaluator tests."""


def fake_trainer(candidate, seed):
    return {"y": 0.5 + 1e-3 * seed, "y_var": 1e-4, "c": -0.5, "c_var": 0.0}


def crashing_trainer(candidate, seed):
    raise MemoryError("simulated out-of-memory")
