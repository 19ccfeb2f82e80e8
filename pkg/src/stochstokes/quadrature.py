"""Symmetric 12-point rule on triangles, exact for total degree 6."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np

# orbit parameters refined to 40 digits from the moment equations
_A1 = 0.24928674517091042129
_A2 = 0.06308901449150222834
_B1 = 0.053145049844816947353
_B2 = 0.31035245103378440542
_W1 = 0.11678627572637936603
_W2 = 0.050844906370206816921
_W3 = 0.082851075618373575194


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Barycentric points and weights on the reference triangle (area 1/2)."""

    points: np.ndarray
    weights: np.ndarray
    degree: int = 6

    def __len__(self) -> int:
        return len(self.weights)

    def integrate_reference(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))


@lru_cache(maxsize=None)
def quadrature_rule() -> QuadratureRule:
    pts = []
    wts = []
    for a, w in ((_A1, _W1), (_A2, _W2)):
        c = 1.0 - 2.0 * a
        pts += [(c, a, a), (a, c, a), (a, a, c)]
        wts += [w] * 3
    c = 1.0 - _B1 - _B2
    for p in ((_B1, _B2, c), (_B2, c, _B1), (c, _B1, _B2), (_B2, _B1, c), (_B1, c, _B2), (c, _B2, _B1)):
        pts.append(p)
        wts.append(_W3)
    points = np.array(pts)
    weights = 0.5 * np.array(wts)
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(points=points, weights=weights)


def monomial_integral(a: int, b: int, c: int, area: float = 0.5) -> float:
    """Exact integral of l1^a l2^b l3^c over a triangle of the given area."""
    return 2.0 * area * factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 2)
