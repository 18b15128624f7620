"""Shared finite-difference gradient oracle for the test suite.

The numeric side never touches the autodiff tape: it re-runs the forward
function on perturbed copies of the raw arrays, which keeps the oracle
independent of the code path it checks.
"""

import numpy as np

from protopart.tensor import Tensor, backward

FD_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar-valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grad(make_loss, leaves: dict, tol: float = 1e-4) -> float:
    """Compare analytic and numeric gradients for every leaf.

    ``make_loss`` receives a dict of Tensors keyed like ``leaves`` (built
    fresh per call from raw arrays) and returns a scalar Tensor.
    Returns the worst relative error observed.
    """
    arrays = {k: np.asarray(v, dtype=np.float64).copy() for k, v in leaves.items()}
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = make_loss(tensors)
    backward(loss)

    worst = 0.0
    for name, arr in arrays.items():
        def f(x, _name=name):
            trial = {k: Tensor(v) for k, v in arrays.items()}
            trial[_name] = Tensor(x)
            return make_loss(trial).item()

        num = numeric_grad(f, arr)
        ana = tensors[name].grad
        assert ana is not None, f"no gradient reached leaf {name!r}"
        err = rel_err(ana, num)
        assert err < tol, f"gradient mismatch on {name!r}: rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst
