"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tol: float
    n_checked: int

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} rel_err={self.max_rel_error:.3e} abs_err={self.max_abs_error:.1e} "
                f"(tol {self.tol:g}, {self.n_checked} coords)")


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(x.copy())).item()
            flat[i] = orig - step
            fm = f(Tensor(x.copy())).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5, tol: float = 1e-4,
               atol: float = 0.0) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central differences.

    The error is ``max|g_ad - g_fd| / (max|g_ad| + max|g_fd| + 1e-12)``, i.e.
    the largest discrepancy relative to the gradient scale. With ``atol > 0`` a
    check also passes when the absolute discrepancy is below it; this is only
    meant for gradients that are zero by construction (e.g. attention key
    biases), where the ratio measures finite-difference round-off. Runs in
    float64.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with no_grad():
        first = f(Tensor(x0.copy())).data
        second = f(Tensor(x0.copy())).data
    if first.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {first.shape}")
    if not np.array_equal(first, second):
        raise ValueError("grad_check: function is not deterministic (repeated forward differs)")

    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        backward(out)
    g_ad = xt.grad if xt.grad is not None else np.zeros_like(x0)
    g_fd = numerical_grad(f, x0, step)
    diff = np.abs(g_ad - g_fd).max() if x0.size else 0.0
    scale = np.abs(g_ad).max() + np.abs(g_fd).max() + 1e-12 if x0.size else 1.0
    rel = float(diff / scale)
    return GradCheckReport(rel, float(diff), bool(rel < tol or diff < atol), tol, int(x0.size))
