"""
Central finite-difference gradient checker.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from src.autodiff.tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    failures: List[Tuple[Tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "ok" if self.passed else f"{len(self.failures)} entries above tol"
        return f"checked {self.checked} entries, max rel. error {self.max_rel_error:.3e} ({status})"


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    tol: float = 1e-4,
    samples: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """
    Compare the analytic gradient of scalar ``f`` at ``x`` with
    (f(x+eps) − f(x−eps)) / (2·eps) per coordinate.

    The relative error of a coordinate is |a − n| / max(|a|, |n|, floor).
    With ``samples`` set, a seeded random subset of coordinates is checked.
    ``x`` must be a leaf with requires_grad; its data is restored afterwards.
    """
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat_size = x.data.size
    if samples is None or samples >= flat_size:
        positions = np.arange(flat_size)
    else:
        positions = np.sort(np.random.default_rng(seed).choice(flat_size, size=samples, replace=False))

    failures = []
    max_err = 0.0
    with no_grad():
        for pos in positions:
            idx = np.unravel_index(pos, x.shape)
            original = x.data[idx]
            x.data[idx] = original + eps
            f_plus = float(f(x).data)
            x.data[idx] = original - eps
            f_minus = float(f(x).data)
            x.data[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            max_err = max(max_err, err)
            if err > tol:
                failures.append((tuple(int(i) for i in idx), a, numeric, err))
    x.zero_grad()
    return GradCheckReport(max_rel_error=max_err, tol=tol, checked=len(positions), failures=failures)
