"""Shared test helpers: finite-difference gradient oracle and error metrics."""

from __future__ import annotations

import numpy as np

from s3net import autodiff as ad


def fd_grad(fn, arrays, wrt: int, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar fn(*arrays) wrt arrays[wrt].

    Runs entirely in float64 (the "shadow" precision); fn must be a pure
    function of its array arguments.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    x = arrays[wrt]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = x[ix]
        x[ix] = orig + h
        fp = fn(*arrays)
        x[ix] = orig - h
        fm = fn(*arrays)
        x[ix] = orig
        g[ix] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(ga: np.ndarray, gn: np.ndarray) -> float:
    """Max absolute deviation relative to the gradient's magnitude scale."""
    denom = max(1e-8, float(np.max(np.abs(gn))), float(np.max(np.abs(ga))))
    return float(np.max(np.abs(np.asarray(ga, dtype=np.float64) - gn))) / denom


def check_grads(build_loss, arrays, h: float = 1e-3, tol: float = 1e-4) -> float:
    """Compare reverse-mode gradients of build_loss(*tensors) against the
    finite-difference oracle for every input; returns the worst relative error.

    build_loss receives one Tensor per input array and must return a scalar
    Tensor; any randomness inside must be re-seeded per call.
    """
    tensors = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    grads = ad.backward(loss)

    def fn(*arrs):
        return float(build_loss(*[ad.constant(a) for a in arrs]).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        gn = fd_grad(fn, arrays, i, h)
        assert t in grads, f"no gradient returned for input {i}"
        err = max_rel_err(grads[t], gn)
        assert err < tol, f"gradient mismatch for input {i}: rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst
