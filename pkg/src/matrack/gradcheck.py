"""Central finite-difference gradient checking utilities."""

from __future__ import annotations

from collections.abc import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. every entry of param.

    f is re-evaluated with param.data perturbed in place; the caller's
    graph state is untouched because evaluation runs under no_grad.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(param.data.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise relative error with an absolute floor for near-zero entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    step: float = 1e-5,
    tol: float = 1e-5,
) -> dict[str, float]:
    """Compare autodiff gradients of loss_fn against central differences.

    Returns {param_name: max relative error}; raises AssertionError on the
    first parameter exceeding tol.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    for name, p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(loss_fn, p, step)
        err = max_rel_error(analytic, numeric)
        errors[name] = err
        if err >= tol:
            raise AssertionError(f"gradient check failed for {name}: rel err {err:.3e} >= {tol}")
    return errors
