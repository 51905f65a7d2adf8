"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

STEP = 1e-5


@dataclass
class GroupError:
    name: str
    max_abs: float
    max_rel: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    threshold: float
    groups: list[GroupError] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def max_rel(self) -> float:
        return max((g.max_rel for g in self.groups), default=0.0)

    def merge(self, other: "GradCheckReport", prefix: str = "") -> None:
        for g in other.groups:
            self.groups.append(GroupError(prefix + g.name, g.max_abs, g.max_rel, g.checked,
                                          g.max_rel < self.threshold))

    def table(self) -> str:
        width = max([len(g.name) for g in self.groups] + [5])
        lines = [f"{'group':<{width}}  {'entries':>7}  {'max_abs_err':>12}  {'max_rel_err':>12}  result"]
        for g in self.groups:
            lines.append(
                f"{g.name:<{width}}  {g.checked:>7d}  {g.max_abs:>12.3e}  {g.max_rel:>12.3e}  "
                f"{'pass' if g.passed else 'FAIL'}"
            )
        lines.append(f"threshold {self.threshold:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, entries, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. selected flat entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.empty(len(entries))
    for j, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * step)
    return out


def check_gradients(
    f: Callable[[], float],
    arrays: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    threshold: float = 1e-6,
    step: float = STEP,
    max_entries: int | None = None,
    rng=None,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``f``.

    ``f`` must read the arrays in ``arrays`` (which are perturbed in place).
    Relative error is the largest entry error divided by the group's largest
    gradient magnitude, so near-zero entries don't dominate.  With
    ``max_entries`` only a random subset of each group is probed.
    """
    rng = np.random.default_rng(rng)
    report = GradCheckReport(threshold)
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 arrays, {name} is {arr.dtype}")
        size = arr.size
        if max_entries is None or size <= max_entries:
            entries = np.arange(size)
        else:
            entries = np.sort(rng.choice(size, max_entries, replace=False))
        num = numeric_grad(f, arr, entries, step)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[entries]
        err = np.abs(ana - num)
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
        max_abs = float(err.max(initial=0.0))
        rel = max_abs / scale
        report.groups.append(GroupError(name, max_abs, rel, len(entries), rel < threshold))
    return report
