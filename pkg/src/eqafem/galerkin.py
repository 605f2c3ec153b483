"""Global Poisson Galerkin problem: assembly, solve, and error evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh
from .quadrature import QuadratureRule, quadrature_rule
from .spaces import DiscreteField, ScalarSpace, data_degree

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-12
CORNER_DEPTH = 12


class SolverError(RuntimeError):
    """Raised when the linear solve cannot meet the residual tolerance."""


def eval_data(f, X) -> np.ndarray:
    """Evaluate ``f(x, y)`` (callable or constant) at points ``X[..., 2]``."""
    if callable(f):
        v = f(X[..., 0], X[..., 1])
    else:
        v = f
    return np.broadcast_to(np.asarray(v, dtype=float), X.shape[:-1]).copy()


@lru_cache(maxsize=None)
def reference_stiffness(p: int) -> np.ndarray:
    """(2, 2, nb, nb) reference integrals of products of partial derivatives."""
    from .spaces import lagrange_element
    el = lagrange_element(p)
    rule = quadrature_rule(max(2 * p - 2, 0))
    g = el.grad(rule.points)  # (nq, nb, 2)
    return np.einsum("q,qid,qje->deij", rule.weights, g, g)


def element_stiffness(mesh: Mesh, p: int) -> np.ndarray:
    """(ne, nb, nb) element stiffness matrices."""
    G = mesh.inv_jacobians
    C = (G @ G.transpose(0, 2, 1)) * mesh.det_jacobians[:, None, None]
    K = reference_stiffness(p)
    n = K.shape[-1]
    return (C.reshape(-1, 4) @ K.reshape(4, n * n)).reshape(-1, n, n)


def element_load(space: ScalarSpace, f, degree: int | None = None) -> np.ndarray:
    rule = quadrature_rule(data_degree(space.p) if degree is None else degree)
    fv = eval_data(f, space.mesh.map_to_physical(rule.points))
    phi = space.element.eval(rule.points)
    return ((fv * rule.weights) @ phi) * space.mesh.det_jacobians[:, None]


@dataclass
class LinearSystem:
    """Full stiffness matrix and load plus the Dirichlet lift."""

    space: ScalarSpace
    matrix: sp.csr_matrix
    load: np.ndarray
    lift: np.ndarray

    @property
    def free(self) -> np.ndarray:
        return self.space.free_dofs

    def reduced(self):
        """Free block ``A_ff`` and right-hand side ``b_f - A_fd g_d``."""
        fr = self.free
        A = self.matrix[fr][:, fr]
        b = self.load[fr] - (self.matrix @ self.lift)[fr]
        return A.tocsc(), b


def assemble_poisson(space: ScalarSpace, f, g=None, degree: int | None = None) -> LinearSystem:
    """Assemble ``(grad u, grad v) = (f, v)`` with ``u = g`` at Dirichlet DoFs."""
    Ke = element_stiffness(space.mesh, space.p)
    dofs = space.element_dofs
    nb = dofs.shape[1]
    rows = np.repeat(dofs, nb, axis=1).ravel()
    cols = np.tile(dofs, (1, nb)).ravel()
    A = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(space.n_dofs,) * 2)
    A = (A + A.T) * 0.5
    Fe = element_load(space, f, degree)
    F = np.bincount(dofs.ravel(), weights=Fe.ravel(), minlength=space.n_dofs)
    lift = np.zeros(space.n_dofs)
    if g is not None and space.dirichlet.any():
        X = space.dof_coordinates[space.dirichlet]
        lift[space.dirichlet] = eval_data(g, X)
    return LinearSystem(space, A.tocsr(), F, lift)


def _residual(A, x, b):
    """``b - A x`` accumulated in extended precision (rows of A must be non-empty)."""
    A = A.tocsr()
    prod = A.data.astype(np.longdouble) * x.astype(np.longdouble)[A.indices]
    return b.astype(np.longdouble) - np.add.reduceat(prod, A.indptr[:-1])


def _relres(A, x, b):
    nb = np.linalg.norm(b)
    r = float(np.sqrt(np.sum(_residual(A, x, b) ** 2)))
    return r / nb if nb > 0 else r


def solve_reduced(A, b) -> np.ndarray:
    """Solve an SPD sparse system to relative residual ``RESIDUAL_TOL``.

    Iterative refinement uses extended-precision residuals so that strongly
    graded high-order systems reach the tolerance.
    """
    n = A.shape[0]
    if n == 0 or not np.any(b):
        return np.zeros(n)
    A = A.tocsr()
    try:
        lu = spla.splu(A.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed ({exc}); system size {n}") from exc
    x = lu.solve(b)
    res = _relres(A, x, b)
    for _ in range(4):
        if res <= RESIDUAL_TOL:
            return x
        x = x + lu.solve(_residual(A, x, b).astype(float))
        res = _relres(A, x, b)
    if res <= RESIDUAL_TOL:
        return x
    logger.warning("direct solve residual %.3e, falling back to CG", res)
    diag = A.diagonal()
    if np.any(diag <= 0):
        bad = int(np.flatnonzero(diag <= 0)[0])
        raise SolverError(f"non-positive pivot at free DoF {bad}")
    M = sp.diags(1.0 / diag)
    x, info = spla.cg(A, b, x0=x, rtol=RESIDUAL_TOL * 0.1, atol=0.0, M=M, maxiter=20 * n)
    res = _relres(A, x, b)
    if res > RESIDUAL_TOL:
        raise SolverError(f"residual {res:.3e} above {RESIDUAL_TOL:g} after CG (info={info})")
    return x


def solve_spd(system: LinearSystem) -> DiscreteField:
    A, b = system.reduced()
    u = system.lift.copy()
    u[system.free] = solve_reduced(A, b)
    return DiscreteField(system.space, u)


def solve_poisson(mesh: Mesh, p: int, f, g=None, degree: int | None = None) -> DiscreteField:
    space = ScalarSpace(mesh, p, dirichlet=True)
    return solve_spd(assemble_poisson(space, f, g, degree))


def energy_norm(u: DiscreteField) -> float:
    Ke = element_stiffness(u.mesh, u.space.p)
    c = u.local_coefficients()
    return float(np.sqrt(max(np.einsum("ei,eij,ej->", c, Ke, c), 0.0)))


# -- errors ---------------------------------------------------------------------

@lru_cache(maxsize=None)
def corner_rule(degree: int, vertex: int, depth: int = CORNER_DEPTH) -> QuadratureRule:
    """Composite rule on the reference triangle graded toward local ``vertex``.

    The triangle is split into four similar children; the child at the
    vertex is split again, ``depth`` times.
    """
    base = quadrature_rule(degree)
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    c = verts[vertex]
    o1, o2 = verts[(vertex + 1) % 3], verts[(vertex + 2) % 3]
    pts, wts = [], []
    A, B, C = c, o1, o2
    for level in range(depth + 1):
        mAB, mAC, mBC = (A + B) / 2, (A + C) / 2, (B + C) / 2
        cells = [(mAB, B, mBC), (mAC, mBC, C), (mBC, mAC, mAB)]
        if level == depth:
            cells.append((A, mAB, mAC))
        for P0, P1, P2 in cells:
            J = np.column_stack([P1 - P0, P2 - P0])
            pts.append(P0 + base.points @ J.T)
            wts.append(base.weights * abs(np.linalg.det(J)))
        B, C = mAB, mAC
    return QuadratureRule(np.vstack(pts), np.concatenate(wts), degree)


def _corner_elements(mesh: Mesh, corner, tol=1e-12):
    """Elements having ``corner`` as a vertex and the local index of it."""
    if corner is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    d = np.linalg.norm(mesh.vertices - np.asarray(corner, dtype=float), axis=1)
    hits = np.flatnonzero(d <= tol * max(1.0, np.abs(mesh.vertices).max()))
    if hits.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    mask = np.isin(mesh.elements, hits)
    els, loc = np.nonzero(mask)
    return els, loc


def energy_error_squared(grad_exact: Callable, u: DiscreteField, corner=None,
                         degree: int | None = None) -> np.ndarray:
    """Per-element ``||grad u_exact - grad u||_T^2``."""
    mesh = u.mesh
    deg = data_degree(u.space.p) if degree is None else degree
    rule = quadrature_rule(deg)
    X = mesh.map_to_physical(rule.points)
    diff = np.asarray(grad_exact(X[..., 0], X[..., 1])) - u.gradients(rule.points)
    out = (diff ** 2).sum(-1) @ rule.weights * mesh.det_jacobians
    els, loc = _corner_elements(mesh, corner)
    for k in range(3):
        sel = els[loc == k]
        if sel.size == 0:
            continue
        cr = corner_rule(deg, k)
        Xs = mesh.map_to_physical(cr.points, sel)
        gh = np.einsum("qbd,eb->eqd", u.space.element.grad(cr.points), u.local_coefficients()[sel])
        gh = np.einsum("eji,eqj->eqi", mesh.inv_jacobians[sel], gh)
        d = np.asarray(grad_exact(Xs[..., 0], Xs[..., 1])) - gh
        out[sel] = (d ** 2).sum(-1) @ cr.weights * mesh.det_jacobians[sel]
    return out


def energy_error(grad_exact: Callable, u: DiscreteField, corner=None, degree: int | None = None) -> float:
    """``||grad(u_exact - u_h)||`` over the domain."""
    return float(np.sqrt(energy_error_squared(grad_exact, u, corner, degree).sum()))


# -- transfer between nested meshes --------------------------------------------------

def prolongate(u: DiscreteField, fine: Mesh, parent: np.ndarray | None = None) -> DiscreteField:
    """Express a field on a coarse mesh exactly in the space on a nested finer mesh.

    ``parent`` maps fine elements to coarse elements (defaults to ``fine.parent``).
    Dirichlet values are copied from the interpolant, so the result lies in the
    fine space whenever the coarse field does.
    """
    coarse = u.mesh
    parent = fine.parent if parent is None else np.asarray(parent)
    if parent is None:
        raise ValueError("fine mesh carries no parent map")
    space = ScalarSpace(fine, u.space.p, dirichlet=True)
    X = fine.map_to_physical(space.element.nodes)  # (ne, nb, 2)
    par = np.repeat(parent, X.shape[1])
    ref = np.einsum("nij,nj->ni", coarse.inv_jacobians[par],
                    X.reshape(-1, 2) - coarse.vertices[coarse.elements[par, 0]])
    vals = u.values_at(par, ref)
    coeffs = np.empty(space.n_dofs)
    coeffs[space.element_dofs.ravel()] = vals
    return DiscreteField(space, coeffs)


def energy_difference(u_fine: DiscreteField, u_coarse: DiscreteField, parent=None) -> float:
    """``||grad(u_fine - u_coarse)||`` for nested meshes."""
    up = prolongate(u_coarse, u_fine.mesh, parent)
    d = DiscreteField(u_fine.space, u_fine.coeffs - up.coeffs)
    return energy_norm(d)
