"""Central finite-difference oracle for the gradient tape."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import UsageError
from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    kinks: np.ndarray  # coordinates where one-sided slopes disagree

    @property
    def max_rel_error(self) -> float:
        ok = ~self.kinks
        return float(self.rel_error[ok].max()) if ok.any() else 0.0

    @property
    def has_kinks(self) -> bool:
        return bool(self.kinks.any())


def analytic_grad(fn: Callable[[Tensor], Tensor], point) -> np.ndarray:
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    out = fn(x)
    backward(out)
    return np.zeros_like(x.data) if x.grad is None else x.grad


def finite_diff_report(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5,
                       kink_tol: float = 1e-3) -> GradCheckReport:
    if h <= 0:
        raise UsageError("finite difference step must be positive")
    base = np.array(point, dtype=np.float64, copy=True)
    ana = analytic_grad(fn, base)
    num = np.empty_like(base)
    kinks = np.zeros(base.shape, dtype=bool)
    flat = base.reshape(-1)
    with no_grad():
        f0 = fn(Tensor(base)).item()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(Tensor(base)).item()
            flat[i] = orig - h
            fm = fn(Tensor(base)).item()
            flat[i] = orig
            num.flat[i] = (fp - fm) / (2.0 * h)
            right, left = (fp - f0) / h, (f0 - fm) / h
            scale = max(abs(right), abs(left), 1.0)
            # a smooth function's one-sided slopes differ by O(h); a kink by O(1)
            kinks.flat[i] = abs(right - left) > kink_tol * scale
    rel = np.abs(ana - num) / (np.abs(num) + 1e-12)
    return GradCheckReport(ana, num, rel, kinks)


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / (|central| + 1e-12)``.

    Coordinates sitting on a kink are excluded and reported through
    :func:`finite_diff_report` instead.
    """
    return finite_diff_report(fn, point, h).max_rel_error
