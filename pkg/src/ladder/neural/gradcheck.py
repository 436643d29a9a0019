"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4
    skipped: dict[str, int] = field(default_factory=dict)  # probes that straddled a kink

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def __str__(self):
        rows = [f"{k:>20s}  {v:.2e}  ({self.checked[k]} entries)" for k, v in self.max_rel_error.items()]
        return "\n".join(rows + [f"worst {self.worst:.2e} / tol {self.tolerance:.0e}"])


def rel_error(a, n, floor=1e-8):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def grad_check(
    f: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    pattern: Callable[[], bytes] | None = None,
) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``f``.

    ``f`` takes no arguments and reads the arrays in ``params``, which are
    perturbed in place (and restored). Arrays must be float64. With
    ``max_entries`` only a random subset of each array is probed.

    ``pattern`` (optional) returns a fingerprint of the piecewise-linear
    state (ReLU masks, pooling argmaxes) after the latest ``f()`` call. A
    probe whose two sides see different patterns crossed a kink, where the
    central difference is not a derivative; it is skipped and counted.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks need float64, got {arr.dtype}")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx]
        num = np.empty(len(idx))
        keep = np.ones(len(idx), dtype=bool)
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            pp = pattern() if pattern is not None else None
            flat[i] = old - step
            fm = f()
            if pattern is not None and pattern() != pp:
                keep[k] = False
            flat[i] = old
            num[k] = (fp - fm) / (2.0 * step)
        err = rel_error(a, num)[keep]
        report.max_rel_error[name] = float(err.max()) if len(err) else 0.0
        report.checked[name] = int(keep.sum())
        report.skipped[name] = int((~keep).sum())
    return report
