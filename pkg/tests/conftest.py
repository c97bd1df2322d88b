import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def central_difference(fun, x, step=1e-6, stencil=3):
    """Finite-difference gradient of a scalar function of a vector.

    ``stencil=5`` uses the fourth-order five-point rule, which tolerates a
    larger step and so survives ill-conditioned objectives.
    """
    x = np.asarray(x, float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        h = step * max(1.0, abs(x[i]))
        e[i] = h
        if stencil == 5:
            out[i] = (-fun(x + 2 * e) + 8 * fun(x + e) - 8 * fun(x - e) + fun(x - 2 * e)) / (12 * h)
        else:
            out[i] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return out


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))
