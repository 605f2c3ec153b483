"""Quadrature rules on the reference triangle and the unit interval.

The reference triangle has vertices (0, 0), (1, 0), (0, 1).  Triangle rules
are conical (Stroud) products of a Gauss-Jacobi rule and a Gauss-Legendre
rule and therefore exist for every polynomial degree.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 40


@dataclass(frozen=True)
class QuadratureRule:
    """Points (reference coordinates) and weights; ``degree`` is the exactness."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def barycentric(self) -> np.ndarray:
        x, y = self.points[:, 0], self.points[:, 1]
        return np.column_stack([1.0 - x - y, x, y])

    def __len__(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def quadrature_rule(degree: int) -> QuadratureRule:
    """Rule integrating all bivariate polynomials of total ``degree`` exactly.

    Raises
    ------
    ValueError
        If ``degree`` is negative or exceeds :data:`MAX_DEGREE`.
    """
    degree = int(degree)
    if degree < 0:
        raise ValueError("quadrature degree must be non-negative")
    if degree > MAX_DEGREE:
        raise ValueError(f"quadrature degree {degree} exceeds the maximum {MAX_DEGREE}")
    n = degree // 2 + 1
    # weight (1 - t) on [-1, 1] absorbs the Duffy Jacobian
    tj, wj = roots_jacobi(n, 1.0, 0.0)
    tl, wl = np.polynomial.legendre.leggauss(n)
    u = 0.5 * (1.0 + tj)
    v = 0.5 * (1.0 + tl)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(0.25 * wj, 0.5 * wl)
    pts = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    rule = QuadratureRule(pts, W.ravel(), degree)
    rule.points.flags.writeable = False
    rule.weights.flags.writeable = False
    return rule


@lru_cache(maxsize=None)
def line_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights on [0, 1] exact up to ``degree``."""
    n = max(int(degree), 0) // 2 + 1
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (1.0 + t), 0.5 * w
