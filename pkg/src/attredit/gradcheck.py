"""Finite-difference verification of analytic gradients.

Central differences at 64-bit are the independent oracle for the whole
autodiff stack; 32-bit runs are too noisy for this, so the harness
insists on float64 parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from .errors import HarnessError
from .tensor import Parameter, Tensor, backward, zero_grad


@dataclass
class GradCheckReport:
    tol: float
    h: float
    per_param: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.per_param.values())

    def __str__(self):
        lines = [f"grad check (h={self.h:g}, tol={self.tol:g}):"]
        for name, err in sorted(self.per_param.items()):
            mark = "ok " if err < self.tol else "FAIL"
            lines.append(f"  [{mark}] {name}: max rel err {err:.3e}")
        return "\n".join(lines)


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``f`` must be a deterministic scalar-valued closure over ``params``.
    Non-determinism is detected by re-evaluation and rejected, since it
    would poison the differences.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise HarnessError(f"grad_check requires float64 params; {p.name} is {p.data.dtype}")

    v1 = f().item()
    v2 = f().item()
    if v1 != v2:
        raise HarnessError(f"closure is not deterministic: {v1!r} != {v2!r}")

    zero_grad(params)
    backward(f())
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}

    report = GradCheckReport(tol=tol, h=h)
    for p in params:
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        report.per_param[p.name] = _rel_err(analytic[p.name], num)
    zero_grad(params)
    return report
