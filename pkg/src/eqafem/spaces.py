"""Polynomial finite element spaces on triangular meshes.

Reference elements are built from monomial spanning sets by inverting the
matrix of degrees of freedom.  Scalar fields are continuous (``ScalarSpace``)
or broken (``DGSpace``) Lagrange spaces with equispaced nodes; fluxes live in
Raviart-Thomas spaces (``RTSpace``) mapped by the contravariant Piola map.
"""
from __future__ import annotations

from functools import cached_property, lru_cache
from typing import Callable

import numpy as np

from .mesh import EDGE_ZERO_TRACE, Mesh, PatchSubmesh
from .quadrature import line_rule, quadrature_rule

MAX_LAGRANGE_DEGREE = 8


def _exponents(p: int) -> list[tuple[int, int]]:
    return [(i - j, j) for i in range(p + 1) for j in range(i + 1)]


def _monomials(points, exps, deriv=0):
    """Monomials and their derivatives at ``points`` (n, 2).

    Returns a list ``[val]``, ``[val, dx, dy]`` or ``[val, dx, dy, dxx, dxy, dyy]``
    of (n, len(exps)) arrays.
    """
    x = points[:, 0][:, None]
    y = points[:, 1][:, None]
    a = np.array([e[0] for e in exps])[None, :]
    b = np.array([e[1] for e in exps])[None, :]

    def pw(z, k):
        return np.where(k >= 0, z ** np.maximum(k, 0), 0.0)

    out = [pw(x, a) * pw(y, b)]
    if deriv >= 1:
        out.append(a * pw(x, a - 1) * pw(y, b))
        out.append(b * pw(x, a) * pw(y, b - 1))
    if deriv >= 2:
        out.append(a * (a - 1) * pw(x, a - 2) * pw(y, b))
        out.append(a * b * pw(x, a - 1) * pw(y, b - 1))
        out.append(b * (b - 1) * pw(x, a) * pw(y, b - 2))
    return out


class LagrangeElement:
    """Degree-``p`` Lagrange element on the reference triangle.

    Local nodes: the three vertices, then ``p - 1`` nodes on each local edge
    ``(v_k, v_k+1)`` ordered from ``v_k``, then interior nodes.
    """

    def __init__(self, p: int):
        if not 0 <= p <= MAX_LAGRANGE_DEGREE:
            raise ValueError(f"Lagrange degree {p} unsupported (maximum {MAX_LAGRANGE_DEGREE})")
        self.p = p
        self.exps = _exponents(p)
        self.nodes = self._make_nodes(p)
        V = _monomials(self.nodes, self.exps)[0]
        self.coeffs = np.linalg.inv(V)
        self.n_basis = len(self.exps)

    @staticmethod
    def _make_nodes(p):
        if p == 0:
            return np.array([[1 / 3, 1 / 3]])
        verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        nodes = [v for v in verts]
        for k in range(3):
            a, b = verts[k], verts[(k + 1) % 3]
            for i in range(1, p):
                nodes.append(a + (i / p) * (b - a))
        for j in range(1, p):
            for i in range(1, p - j):
                nodes.append(np.array([i / p, j / p]))
        return np.array(nodes)

    @property
    def n_interior(self) -> int:
        return max(self.p - 1, 0) * max(self.p - 2, 0) // 2 if self.p >= 1 else 1

    def eval(self, pts) -> np.ndarray:
        return _monomials(np.atleast_2d(pts), self.exps)[0] @ self.coeffs

    def grad(self, pts) -> np.ndarray:
        _, dx, dy = _monomials(np.atleast_2d(pts), self.exps, 1)
        return np.stack([dx @ self.coeffs, dy @ self.coeffs], axis=-1)

    def hess(self, pts) -> np.ndarray:
        m = _monomials(np.atleast_2d(pts), self.exps, 2)
        xx, xy, yy = (m[i] @ self.coeffs for i in (3, 4, 5))
        return np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)

    @cached_property
    def mass(self) -> np.ndarray:
        rule = quadrature_rule(2 * self.p)
        phi = self.eval(rule.points)
        return (phi * rule.weights[:, None]).T @ phi

    @cached_property
    def mass_inv(self) -> np.ndarray:
        return np.linalg.inv(self.mass)


# monomials for the RT span are centred at the reference centroid (better conditioning)
_CENTER = np.array([1.0 / 3.0, 1.0 / 3.0])


class RaviartThomasElement:
    """Degree-``p`` Raviart-Thomas element on the reference triangle.

    DoFs: ``p + 1`` outward normal moments per local edge against Legendre
    polynomials in the edge parameter running from ``v_k`` to ``v_k+1``,
    then ``p (p + 1)`` interior moments against ``[P^{p-1}]^2``.
    """

    def __init__(self, p: int):
        self.p = p
        exps = _exponents(p + 1)
        pos = {e: i for i, e in enumerate(exps)}
        span = []
        for (a, b) in _exponents(p):
            for c in range(2):
                P = np.zeros((2, len(exps)))
                P[c, pos[(a, b)]] = 1.0
                span.append(P)
        for (a, b) in _exponents(p):
            if a + b == p:
                P = np.zeros((2, len(exps)))
                P[0, pos[(a + 1, b)]] = 1.0
                P[1, pos[(a, b + 1)]] = 1.0
                span.append(P)
        self.exps = exps
        self.span = np.array(span)  # (nrt, 2, nmono)
        self.n_basis = len(span)
        self.n_edge = p + 1
        self.n_interior = p * (p + 1)
        D = self._dof_matrix()
        self.coeffs = np.linalg.solve(D, np.eye(self.n_basis)).T  # basis r = sum_s C[r,s] span_s
        # polynomial coefficients of the basis, (nrt, 2, nmono)
        self.poly = np.einsum("rs,scm->rcm", self.coeffs, self.span)

    def _eval_span(self, pts, deriv=False):
        m = _monomials(np.atleast_2d(pts) - _CENTER, self.exps, 1 if deriv else 0)
        val = np.einsum("qm,scm->qsc", m[0], self.span)
        if not deriv:
            return val
        div = m[1] @ self.span[:, 0, :].T + m[2] @ self.span[:, 1, :].T
        return val, div

    def _dof_matrix(self):
        p = self.p
        t, w = line_rule(2 * p + 2)
        verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        rows = []
        leg = np.stack([np.polynomial.legendre.Legendre.basis(j)(2 * t - 1) for j in range(p + 1)])
        for k in range(3):
            a, b = verts[k], verts[(k + 1) % 3]
            d = b - a
            nrm = np.array([d[1], -d[0]])  # |e| times outward normal
            pts = a[None, :] + t[:, None] * d[None, :]
            val = self._eval_span(pts)  # (nq, nrt, 2)
            flux = val @ nrm  # (nq, nrt)
            for j in range(p + 1):
                rows.append((w * leg[j]) @ flux)
        if p >= 1:
            rule = quadrature_rule(2 * p + 1)
            val = self._eval_span(rule.points)
            mono = _monomials(rule.points, _exponents(p - 1))[0]
            for i in range(mono.shape[1]):
                for c in range(2):
                    rows.append((rule.weights * mono[:, i]) @ val[:, :, c])
        return np.array(rows)

    def eval(self, pts) -> np.ndarray:
        """(nq, nrt, 2) reference basis values."""
        m = _monomials(np.atleast_2d(pts) - _CENTER, self.exps)[0]
        return np.einsum("qm,rcm->qrc", m, self.poly)

    def div(self, pts) -> np.ndarray:
        """(nq, nrt) reference divergences."""
        m = _monomials(np.atleast_2d(pts) - _CENTER, self.exps, 1)
        return m[1] @ self.poly[:, 0, :].T + m[2] @ self.poly[:, 1, :].T


@lru_cache(maxsize=None)
def lagrange_element(p: int) -> LagrangeElement:
    return LagrangeElement(p)


@lru_cache(maxsize=None)
def rt_element(p: int) -> RaviartThomasElement:
    return RaviartThomasElement(p)


# -- global spaces ------------------------------------------------------------

class ScalarSpace:
    """Continuous piecewise polynomials of degree ``p`` on ``mesh``.

    Global numbering: vertices, then ``p - 1`` DoFs per edge (from the lower
    to the higher vertex id), then interior DoFs element by element.
    """

    def __init__(self, mesh: Mesh, p: int, dirichlet=True):
        if p < 1:
            raise ValueError("continuous Lagrange spaces need p >= 1")
        self.mesh = mesh
        self.p = p
        self.element = lagrange_element(p)
        nv, nE, ne = mesh.n_vertices, mesh.n_edges, mesh.n_elements
        ni = (p - 1) * (p - 2) // 2
        dofs = np.empty((ne, self.element.n_basis), dtype=np.int64)
        dofs[:, :3] = mesh.elements
        col = 3
        el = mesh.elements
        for k in range(3):
            e = mesh.element_edges[:, k]
            forward = el[:, k] < el[:, (k + 1) % 3]
            for i in range(p - 1):
                pos = np.where(forward, i, p - 2 - i)
                dofs[:, col + i] = nv + e * (p - 1) + pos
            col += p - 1
        if ni:
            dofs[:, col:] = nv + nE * (p - 1) + np.arange(ne)[:, None] * ni + np.arange(ni)[None, :]
        self.element_dofs = dofs
        self.n_dofs = nv + nE * (p - 1) + ne * ni
        self.dirichlet = self._dirichlet_mask(dirichlet)

    @cached_property
    def dof_coordinates(self) -> np.ndarray:
        X = self.mesh.map_to_physical(self.element.nodes)
        out = np.empty((self.n_dofs, 2))
        out[self.element_dofs.ravel()] = X.reshape(-1, 2)
        return out

    @cached_property
    def boundary_dofs(self) -> np.ndarray:
        m = self.mesh
        mask = np.zeros(self.n_dofs, dtype=bool)
        mask[m.edges[m.boundary_edges].ravel()] = True
        be = np.flatnonzero(m.boundary_edges)
        if self.p > 1:
            base = m.n_vertices + be[:, None] * (self.p - 1) + np.arange(self.p - 1)[None, :]
            mask[base.ravel()] = True
        return mask

    def _dirichlet_mask(self, dirichlet):
        if dirichlet is True:
            return self.boundary_dofs.copy()
        if dirichlet is None or dirichlet is False:
            return np.zeros(self.n_dofs, dtype=bool)
        if callable(dirichlet):
            b = self.boundary_dofs.copy()
            X = self.dof_coordinates[b]
            b[b] = np.asarray(dirichlet(X[:, 0], X[:, 1]), dtype=bool)
            return b
        mask = np.asarray(dirichlet, dtype=bool)
        if mask.shape != (self.n_dofs,):
            raise ValueError("dirichlet mask must have one entry per DoF")
        return mask

    @property
    def free_dofs(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet)

    @property
    def n_free(self) -> int:
        return int(self.n_dofs - self.dirichlet.sum())

    def interpolate(self, g: Callable) -> np.ndarray:
        X = self.dof_coordinates
        return np.asarray(g(X[:, 0], X[:, 1]), dtype=float) * np.ones(self.n_dofs)


class DGSpace:
    """Broken (discontinuous) piecewise polynomials of degree ``p``."""

    def __init__(self, mesh: Mesh, p: int):
        self.mesh = mesh
        self.p = p
        self.element = lagrange_element(p)
        nb = self.element.n_basis
        self.element_dofs = np.arange(mesh.n_elements * nb).reshape(-1, nb)
        self.n_dofs = mesh.n_elements * nb


class RTSpace:
    """Raviart-Thomas space of degree ``p``, H(div)-conforming across edges.

    Edge DoFs are normal moments with respect to the global edge normal
    (tangent from lower to higher vertex id rotated clockwise); local basis
    functions are multiplied by ``element_signs`` to obtain global ones.
    ``constrained`` marks DoFs forced to zero (zero normal trace).
    """

    def __init__(self, mesh: Mesh, p: int, zero_trace_edges=None):
        self.mesh = mesh
        self.p = p
        self.element = rt_element(p)
        ne, nE = mesh.n_elements, mesh.n_edges
        npe, ni = p + 1, p * (p + 1)
        dofs = np.empty((ne, self.element.n_basis), dtype=np.int64)
        signs = np.ones((ne, self.element.n_basis))
        el = mesh.elements
        j = np.arange(npe)
        for k in range(3):
            e = mesh.element_edges[:, k]
            forward = el[:, k] < el[:, (k + 1) % 3]
            dofs[:, k * npe:(k + 1) * npe] = e[:, None] * npe + j[None, :]
            flip = np.where((j + 1) % 2 == 0, 1.0, -1.0)  # (-1)^(j+1)
            signs[:, k * npe:(k + 1) * npe] = np.where(forward[:, None], 1.0, flip[None, :])
        dofs[:, 3 * npe:] = nE * npe + np.arange(ne)[:, None] * ni + np.arange(ni)[None, :]
        self.element_dofs = dofs
        self.element_signs = signs
        self.n_dofs = nE * npe + ne * ni
        self.constrained = np.zeros(self.n_dofs, dtype=bool)
        if zero_trace_edges is not None:
            ze = np.flatnonzero(np.asarray(zero_trace_edges, dtype=bool))
            self.constrained[(ze[:, None] * npe + j[None, :]).ravel()] = True

    @property
    def n_free(self) -> int:
        return int(self.n_dofs - self.constrained.sum())


def build_scalar_space(mesh: Mesh, p: int, dirichlet=True) -> ScalarSpace:
    return ScalarSpace(mesh, p, dirichlet)


def build_rt_space(patch: PatchSubmesh, p: int) -> RTSpace:
    """RT space on a vertex patch with zero normal trace where the hat function vanishes."""
    return RTSpace(patch.mesh, p, zero_trace_edges=patch.edge_kind == EDGE_ZERO_TRACE)


# -- fields -------------------------------------------------------------------

class DiscreteField:
    """Coefficient vector of a field in ``space``."""

    def __init__(self, space, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.n_dofs,):
            raise ValueError(f"expected {space.n_dofs} coefficients, got {coeffs.shape}")
        self.space = space
        self.coeffs = coeffs

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    @property
    def is_flux(self) -> bool:
        return isinstance(self.space, RTSpace)

    def local_coefficients(self) -> np.ndarray:
        """(ne, nb) element-local coefficients (signs applied for fluxes)."""
        c = self.coeffs[self.space.element_dofs]
        if self.is_flux:
            c = c * self.space.element_signs
        return c

    def values(self, ref_points) -> np.ndarray:
        """Values at reference points on every element: (ne, nq) or (ne, nq, 2)."""
        c = self.local_coefficients()
        if self.is_flux:
            tau = self.space.element.eval(ref_points)
            v = np.einsum("qrc,er->eqc", tau, c)
            J = self.mesh.jacobians
            return np.einsum("eij,eqj->eqi", J, v) / self.mesh.det_jacobians[:, None, None]
        return c @ self.space.element.eval(ref_points).T

    def gradients(self, ref_points) -> np.ndarray:
        """(ne, nq, 2) physical gradients of a scalar field."""
        gr = self.space.element.grad(ref_points)  # (nq, nb, 2)
        nq, nb = gr.shape[:2]
        g = (self.local_coefficients() @ gr.transpose(1, 0, 2).reshape(nb, -1)).reshape(-1, nq, 2)
        return g @ self.mesh.inv_jacobians

    def laplacians(self, ref_points) -> np.ndarray:
        """(ne, nq) elementwise Laplacian of a scalar field."""
        H = np.einsum("qbij,eb->eqij", self.space.element.hess(ref_points), self.local_coefficients())
        G = self.mesh.inv_jacobians
        return np.einsum("eki,eqkl,eli->eq", G, H, G)

    def divergence(self, ref_points) -> np.ndarray:
        """(ne, nq) divergence of a flux field."""
        d = self.space.element.div(ref_points)
        return (self.local_coefficients() @ d.T) / self.mesh.det_jacobians[:, None]

    def gradients_at(self, elements, ref_points) -> np.ndarray:
        """Gradients at one reference point per entry: (n, 2)."""
        elements = np.asarray(elements)
        c = self.local_coefficients()[elements]
        g = np.einsum("nbd,nb->nd", self.space.element.grad(ref_points), c)
        return np.einsum("nji,nj->ni", self.mesh.inv_jacobians[elements], g)

    def values_at(self, elements, ref_points) -> np.ndarray:
        elements = np.asarray(elements)
        c = self.local_coefficients()[elements]
        return np.einsum("nb,nb->n", self.space.element.eval(ref_points), c)


def data_degree(p: int) -> int:
    """Quadrature degree for integrands involving analytic data."""
    return 2 * p + 6


def project_L2(f: Callable, mesh: Mesh, p: int, degree: int | None = None) -> DiscreteField:
    """Elementwise L2 projection of ``f(x, y)`` onto broken polynomials of degree ``p``."""
    space = DGSpace(mesh, p)
    rule = quadrature_rule(data_degree(p) if degree is None else degree)
    X = mesh.map_to_physical(rule.points)
    fv = np.asarray(f(X[..., 0], X[..., 1]), dtype=float) * np.ones(X.shape[:2])
    phi = space.element.eval(rule.points)
    rhs = (fv * rule.weights[None, :]) @ phi  # reference moments; detJ cancels
    if not np.all(np.isfinite(mesh.det_jacobians)) or np.any(mesh.det_jacobians <= 0):
        raise np.linalg.LinAlgError("degenerate element in L2 projection")
    coeffs = rhs @ space.element.mass_inv.T
    return DiscreteField(space, coeffs.ravel())


def element_l2_norms(values, rule, mesh: Mesh) -> np.ndarray:
    """Elementwise L2 norms of quadrature values (ne, nq) or (ne, nq, 2)."""
    v = values ** 2
    if v.ndim == 3:
        v = v.sum(axis=2)
    return np.sqrt(np.maximum(v @ rule.weights * mesh.det_jacobians, 0.0))
