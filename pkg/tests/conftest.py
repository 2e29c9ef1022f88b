import numpy as np
import pytest


def numeric_grad(f, arrays, wrt, eps=1e-5):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[wrt].

    Kept deliberately independent of the autodiff engine: the function is
    re-evaluated from scratch for every perturbed element.
    """
    a = arrays[wrt]
    g = np.zeros_like(a, dtype=np.float64)
    for i in range(a.size):
        orig = a.flat[i]
        a.flat[i] = orig + eps
        fp = float(f(*arrays))
        a.flat[i] = orig - eps
        fm = float(f(*arrays))
        a.flat[i] = orig
        g.flat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_err(analytic, numeric):
    """Largest deviation relative to the gradient's overall magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
