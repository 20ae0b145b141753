"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NotScalar
from .tensor import Tensor


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst_index: Optional[tuple] = None
    analytic: float = 0.0
    numeric: float = 0.0
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "pass": self.passed,
            "checked": self.checked,
            "worst_index": list(self.worst_index) if self.worst_index is not None else None,
        }


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    When ``x`` has more than ``max_coords`` entries a seeded random subset of
    coordinates is probed instead of all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise NotScalar(f"gradcheck target must be scalar, got {y.shape}")
    y.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    flat_n = base.size
    if max_coords is not None and flat_n > max_coords:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(flat_n, size=max_coords, replace=False))
    else:
        coords = np.arange(flat_n)

    report = GradcheckReport(max_rel_err=0.0, passed=True, checked=len(coords))
    work = base.copy()
    flat = work.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        fp = float(f(Tensor(work.copy())).data.reshape(-1)[0])
        flat[c] = orig - eps
        fm = float(f(Tensor(work.copy())).data.reshape(-1)[0])
        flat[c] = orig
        num = (fp - fm) / (2 * eps)
        ana = float(analytic.reshape(-1)[c])
        err = rel_err(ana, num)
        idx = tuple(int(i) for i in np.unravel_index(c, base.shape))
        if err > report.max_rel_err:
            report.max_rel_err = err
            report.worst_index = idx
            report.analytic, report.numeric = ana, num
        if err > tol:
            report.failures.append((idx, ana, num, err))
    report.passed = not report.failures
    return report
