"""Finite-difference gradient verification.

Central differences per coordinate; comparison uses a symmetric relative
error so the check is scale-free. Verifies the recorded-graph backward pass
against an estimate that never touches the graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one probe per element."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-8)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(build: Callable[[Sequence[Tensor]], Tensor],
               inputs: Sequence[np.ndarray],
               eps: float = 1e-5,
               tol: float = 1e-4) -> dict:
    """Compare analytic gradients of `build` against finite differences.

    build maps a list of Tensors (requires_grad set here) to a scalar Tensor.
    Inputs are evaluated in float64. Returns a report dict with per-input
    relative errors and a boolean `ok`; raises nothing on failure so callers
    can inspect.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    errors = []
    for idx in range(len(inputs)):
        def probe(x, _idx=idx):
            args = [Tensor(v.copy()) for v in inputs]
            args[_idx] = Tensor(x.copy())
            with no_grad():
                return build(args).item()

        fd = fd_gradient(probe, inputs[idx], eps)
        errors.append(rel_error(analytic[idx], fd))

    return {
        "ok": all(e < tol for e in errors),
        "errors": errors,
        "max_error": max(errors) if errors else 0.0,
        "tol": tol,
    }
