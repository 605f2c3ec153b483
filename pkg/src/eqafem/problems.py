"""Model problems: domains, data, and exact solutions where known."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mesh import Mesh, build_initial_mesh
from .spaces import DiscreteField, project_L2


@dataclass(frozen=True)
class Problem:
    """Poisson problem ``-lap u = f`` in the domain, ``u = g`` on the boundary.

    ``f_degree`` is the polynomial degree of ``f`` on every element of the
    initial mesh (None if ``f`` is not piecewise polynomial).
    """

    name: str
    domain: str
    f: Callable
    g: Optional[Callable] = None
    u_exact: Optional[Callable] = None
    grad_exact: Optional[Callable] = None
    corner: Optional[tuple] = None
    f_degree: Optional[int] = None
    homogeneous: bool = True

    def initial_mesh(self) -> Mesh:
        return build_initial_mesh(self.domain)

    @property
    def has_exact(self) -> bool:
        return self.grad_exact is not None


def _zero(x, y):
    return np.zeros(np.broadcast(x, y).shape)


def _one(x, y):
    return np.ones(np.broadcast(x, y).shape)


def lshape_angle(x, y):
    """Polar angle in ``[0, 2 pi)``, zero along the edge ``{x > 0, y = 0}``."""
    return np.mod(np.arctan2(y, x), 2 * np.pi)


def lshape_u(x, y):
    r = np.hypot(x, y)
    return r ** (2 / 3) * np.sin(2 * lshape_angle(x, y) / 3)


def lshape_grad(x, y):
    r = np.hypot(x, y)
    t = lshape_angle(x, y)
    c = (2 / 3) * r ** (-1 / 3)
    return np.stack([-c * np.sin(t / 3), c * np.cos(t / 3)], axis=-1)


def square_u(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def square_f(x, y):
    return 2 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y)


def square_grad(x, y):
    return np.pi * np.stack([np.cos(np.pi * x) * np.sin(np.pi * y),
                             np.sin(np.pi * x) * np.cos(np.pi * y)], axis=-1)


class PiecewisePolynomial:
    """Callable wrapper of a broken polynomial field on a fixed coarse mesh.

    Points are located by barycentric coordinates; the coarse mesh is meant
    to be small (it is searched exhaustively).
    """

    def __init__(self, field: DiscreteField):
        self.field = field
        self.mesh = field.mesh

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        P = np.stack([x.ravel(), y.ravel()], axis=-1)
        m = self.mesh
        ref = np.einsum("eij,enj->eni", m.inv_jacobians,
                        P[None, :, :] - m.vertices[m.elements[:, 0]][:, None, :])
        lam = np.minimum(np.minimum(ref[..., 0], ref[..., 1]), 1 - ref.sum(-1))  # (ne, n)
        el = np.argmax(lam, axis=0)
        out = self.field.values_at(el, ref[el, np.arange(P.shape[0])])
        return out.reshape(x.shape)


def make_problem(name: str, p: int = 1) -> Problem:
    """Build a named problem.

    ``lshape``: singular solution on the L-shaped domain, f = 0.
    ``square``: smooth solution on the unit square, homogeneous data.
    ``square_projected``: square load projected onto broken P^{p-1} of the
    initial mesh, so that the load is piecewise polynomial of degree p - 1.
    ``cross``: f = 1 on the cross-shaped domain.
    """
    if name == "lshape":
        return Problem("lshape", "lshape", _zero, lshape_u, lshape_u, lshape_grad,
                       corner=(0.0, 0.0), f_degree=0, homogeneous=False)
    if name == "square":
        return Problem("square", "unit_square", square_f, _zero, square_u, square_grad)
    if name == "square_projected":
        mesh0 = build_initial_mesh("unit_square")
        fp = PiecewisePolynomial(project_L2(square_f, mesh0, max(p - 1, 0), degree=30))
        return Problem("square_projected", "unit_square", fp, _zero, f_degree=max(p - 1, 0))
    if name == "cross":
        return Problem("cross", "cross", _one, _zero, f_degree=0)
    raise ValueError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}")


PROBLEMS = ("lshape", "square", "square_projected", "cross")
