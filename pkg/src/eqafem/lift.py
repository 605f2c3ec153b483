"""Residual liftings on trial refinements of vertex patches.

A trial refinement bisects every patch element ``beta`` times.  The lifting
``r`` solves the local residual problem

    (grad r, grad v) = (f, v) - (grad u_h, grad v)   for all v

in the degree-``p`` Lagrange space on the trial mesh vanishing on the whole
patch boundary.  The ratio ``eta(a) / ||grad r||`` bounds the discrete
efficiency of the vertex indicator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.linalg as sla
from scipy.spatial import cKDTree

from .galerkin import element_load, element_stiffness
from .mesh import Mesh, PatchSubmesh, bisect, vertex_patch
from .quadrature import quadrature_rule
from .spaces import DiscreteField, ScalarSpace

ZERO_RESIDUAL = 1e-12


@dataclass(frozen=True)
class TrialPatch:
    """A refinement of a vertex patch.

    ``mesh.parent`` maps refined elements to elements of ``patch.mesh``;
    ``beta`` is the number of bisection rounds, or None for the restriction
    of an actual refined mesh.
    """

    patch: PatchSubmesh
    beta: int | None
    mesh: Mesh

    @property
    def global_parent(self) -> np.ndarray:
        """Element of the global mesh containing each trial element."""
        return self.patch.elements[self.mesh.parent]


@dataclass
class LiftingResult:
    vertex: int
    beta: int
    lift_norm: float
    clb: float
    eta: float = float("nan")
    trial_vertices: np.ndarray | None = field(default=None, repr=False)
    history: list = field(default_factory=list, repr=False)

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.clb)


def clb(eta_a: float, lift_norm: float) -> float:
    """``eta_a / lift_norm`` with x/0 = inf for x > 0 and 0/0 = 0."""
    if eta_a < 0 or lift_norm < 0:
        raise ValueError("clb arguments must be nonnegative")
    if lift_norm == 0:
        return math.inf if eta_a > 0 else 0.0
    return eta_a / lift_norm


def trial_refine_patch(patch: PatchSubmesh, beta: int) -> TrialPatch:
    """Bisect all elements of the patch ``beta`` times (with closure inside the patch)."""
    if beta < 1:
        raise ValueError("beta must be at least 1")
    m = patch.mesh
    return TrialPatch(patch, int(beta), bisect(m, {t: beta for t in range(m.n_elements)}))


def restrict_to_patch(fine: Mesh, patch: PatchSubmesh, parent=None) -> TrialPatch:
    """Elements of a refinement of the patch's mesh that lie in the patch.

    ``parent`` maps fine elements to elements of the coarse global mesh
    (defaults to ``fine.parent``).
    """
    parent = fine.parent if parent is None else np.asarray(parent)
    local = -np.ones(int(max(parent.max(), patch.elements.max())) + 1, dtype=np.int64)
    local[patch.elements] = np.arange(len(patch.elements))
    sel = np.flatnonzero(local[parent] >= 0)
    els = fine.elements[sel]
    vmap, inv = np.unique(els, return_inverse=True)
    sub = Mesh(fine.vertices[vmap], inv.reshape(-1, 3), fine.generation[sel], local[parent[sel]])
    return TrialPatch(patch, None, sub)


def residual_lifting(trial: TrialPatch, u: DiscreteField, f, degree: int | None = None,
                     return_field: bool = False):
    """Norm of the lifting of the Galerkin residual on a trial patch mesh.

    Returns ``||grad r||`` (and the field if ``return_field``).  The norm is
    computed as ``sqrt(b . r)``, which equals ``sqrt(r . A r)`` for the exact
    discrete solution.
    """
    p = u.space.p
    mt = trial.mesh
    space = ScalarSpace(mt, p, dirichlet=True)
    free = space.free_dofs
    if free.size == 0:
        z = DiscreteField(space, np.zeros(space.n_dofs))
        return (0.0, z) if return_field else 0.0
    Ke = element_stiffness(mt, p)
    load = element_load(space, f, degree)
    # (grad u_h, grad phi_i) with u_h evaluated on its own (coarse) element
    rule = quadrature_rule(2 * p)
    X = mt.map_to_physical(rule.points)
    par = np.repeat(trial.global_parent, len(rule))
    cm = u.mesh
    ref = np.einsum("nij,nj->ni", cm.inv_jacobians[par],
                    X.reshape(-1, 2) - cm.vertices[cm.elements[par, 0]])
    gu = u.gradients_at(par, ref).reshape(mt.n_elements, len(rule), 2)
    gphi = np.einsum("tji,qbj->tqbi", mt.inv_jacobians, space.element.grad(rule.points))
    load -= np.einsum("q,tqd,tqbd->tb", rule.weights, gu, gphi) * mt.det_jacobians[:, None]
    n = space.n_dofs
    dofs = space.element_dofs
    b = np.bincount(dofs.ravel(), weights=load.ravel(), minlength=n)
    # a residual at rounding level of its summands vanishes on the trial space
    scale = np.bincount(dofs.ravel(), weights=np.abs(load).ravel(), minlength=n)[free]
    if np.linalg.norm(b[free]) <= ZERO_RESIDUAL * np.linalg.norm(scale):
        z = DiscreteField(space, np.zeros(n))
        return (0.0, z) if return_field else 0.0
    pos = -np.ones(n, dtype=np.int64)
    pos[free] = np.arange(free.size)
    A = np.zeros((free.size + 1, free.size + 1))
    lp = np.where(pos[dofs] >= 0, pos[dofs], free.size)
    nb = dofs.shape[1]
    np.add.at(A, (np.repeat(lp, nb, axis=1).ravel(), np.tile(lp, (1, nb)).ravel()), Ke.ravel())
    A = A[:-1, :-1]
    A = 0.5 * (A + A.T)
    bf = b[free]
    try:
        r = sla.cho_solve(sla.cho_factor(A), bf)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"lifting system of vertex {trial.patch.center} is not SPD") from exc
    norm = float(np.sqrt(max(bf @ r, 0.0)))
    if return_field:
        full = np.zeros(n)
        full[free] = r
        return norm, DiscreteField(space, full)
    return norm


def select_beta(a: int, u: DiscreteField, f, beta_max: int, clb_max: float, eta_a: float,
                degree: int | None = None, patch: PatchSubmesh | None = None) -> LiftingResult:
    """Smallest ``beta <= beta_max`` whose trial lifting gives ``C_lb <= clb_max``."""
    patch = vertex_patch(u.mesh, a) if patch is None else patch
    history = []
    for beta in range(1, int(beta_max) + 1):
        trial = trial_refine_patch(patch, beta)
        norm = residual_lifting(trial, u, f, degree)
        c = clb(eta_a, norm)
        history.append((beta, norm, c))
        if c <= clb_max or beta == beta_max:
            return LiftingResult(int(a), beta, norm, c, eta_a, trial.mesh.vertices.copy(), history)
    raise ValueError("beta_max must be at least 1")


def refine_to_cover(mesh: Mesh, plan: Mapping[int, int]) -> Mesh:
    """Refine so that each planned patch is at least as fine as its trial mesh."""
    if not plan:
        return bisect(mesh, {})
    marks: dict[int, int] = {}
    for a, beta in plan.items():
        els, _ = mesh.vertex_elements(int(a))
        for t in els.tolist():
            marks[t] = max(marks.get(t, 0), int(beta))
    return bisect(mesh, marks)


def uncovered_vertices(mesh: Mesh, points, tol: float = 1e-11) -> np.ndarray:
    """Indices of ``points`` that are not vertices of ``mesh``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.size == 0:
        return np.zeros(0, dtype=np.int64)
    d, _ = cKDTree(mesh.vertices).query(pts)
    scale = max(np.ptp(mesh.vertices, axis=0).max(), 1.0)
    return np.flatnonzero(d > tol * scale)


def has_interior_nodes(patch: PatchSubmesh, trial_mesh: Mesh, tol: float = 1e-12) -> bool:
    """Whether every patch element has a trial vertex strictly inside it and
    every interior patch edge has a trial vertex in its relative interior."""
    m = patch.mesh
    V = trial_mesh.vertices
    ref = np.einsum("eij,enj->eni", m.inv_jacobians, V[None] - m.vertices[m.elements[:, 0]][:, None])
    lam = np.stack([1 - ref.sum(-1), ref[..., 0], ref[..., 1]], -1)
    inside = np.all(lam > tol, axis=-1).any(axis=1)
    if not inside.all():
        return False
    from .mesh import EDGE_INTERIOR
    for e in np.flatnonzero(patch.edge_kind == EDGE_INTERIOR):
        a, b = m.vertices[m.edges[e]]
        d = b - a
        s = (V - a) @ d / (d @ d)
        off = np.abs((V - a) @ np.array([d[1], -d[0]])) / np.linalg.norm(d)
        if not np.any((s > tol) & (s < 1 - tol) & (off <= tol * max(1.0, np.linalg.norm(d)))):
            return False
    return True
