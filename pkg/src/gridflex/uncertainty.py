"""Box-and-budget forecast uncertainty.

The admissible set is  W = { w : |w_k| <= 1,  sum |w_k| <= budget },
and an uncertain injection at node k deviates by ``level * w_k * h_k`` from
its forecast midpoint, with ``h_k`` the interval half-width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = ["UncertaintyModel", "budget_dual_norm", "worst_case_vector", "is_admissible"]


@dataclass(frozen=True)
class UncertaintyModel:
    level: float  # alpha
    budget: float  # Gamma
    half_widths: Mapping[str, tuple[float, float]] = field(default_factory=dict)  # bus -> (h_p, h_q)
    max_level: float = 1.0

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("uncertainty budget must be non-negative")
        if abs(self.level) > self.max_level:
            raise ValueError(f"|level| = {abs(self.level)} exceeds {self.max_level}")
        for bus, (hp, hq) in self.half_widths.items():
            if hp < 0 or hq < 0:
                raise ValueError(f"negative half-width at {bus!r}")

    @property
    def nodes(self) -> list[str]:
        return [b for b, (hp, hq) in self.half_widths.items() if hp > 0 or hq > 0]


def budget_dual_norm(a, budget: float) -> float:
    """max { a.w : |w|_inf <= 1, |w|_1 <= budget }.

    The ``floor(budget)`` largest |a_k| count fully and the next one with the
    fractional remainder.
    """
    mags = np.sort(np.abs(np.asarray(a, dtype=float).ravel()))[::-1]
    if budget <= 0 or len(mags) == 0:
        return 0.0
    full = min(int(math.floor(budget)), len(mags))
    total = float(np.sum(mags[:full]))
    if full < len(mags):
        total += (budget - full) * float(mags[full])
    return total


def worst_case_vector(weights, budget: float, sign: float = 1.0) -> np.ndarray:
    """Vertex of W maximising sign * weights.w (greedy on |weights|)."""
    weights = np.asarray(weights, dtype=float)
    w = np.zeros(len(weights))
    left = budget
    for k in np.argsort(-np.abs(weights), kind="stable"):
        if left <= 0:
            break
        take = min(1.0, left)
        w[k] = sign * take * (1.0 if weights[k] >= 0 else -1.0)
        left -= take
    return w


def is_admissible(w, budget: float, tol: float = 1e-12) -> bool:
    w = np.asarray(w, dtype=float)
    return bool(np.all(np.abs(w) <= 1 + tol) and np.sum(np.abs(w)) <= budget + tol)
