"""Equilibrated fluxes from vertex patches and the resulting error indicators.

For every vertex ``a`` the patch problem is a mixed Raviart-Thomas system:
find ``sigma`` with zero normal trace where the hat function ``psi_a``
vanishes and ``q`` broken of degree ``p`` such that

    (sigma, tau) - (q, div tau) = -(psi_a grad u_h, tau)
    (div sigma, w)              = (g_a, w),
    g_a = Pi^p(psi_a f) - grad psi_a . grad u_h.

For interior vertices ``q`` is fixed by a zero-mean multiplier.  Patches
with the same size and interior/boundary type share the linear-system
shape and are solved together as a dense batch.  All pairs (element,
local vertex) are indexed as ``3 * element + local``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .galerkin import eval_data
from .mesh import Mesh, PatchSubmesh, face_adjacency, vertex_adjacency, vertex_patch
from .quadrature import line_rule, quadrature_rule
from .spaces import (DiscreteField, RTSpace, ScalarSpace, build_rt_space, data_degree,
                     lagrange_element, rt_element)

logger = logging.getLogger(__name__)

DIV_TOL = 1e-10
COMPAT_TOL = 1e-10
BATCH_ENTRIES = 2 ** 24
# relative entrywise tolerance for patches to share one factorization
SHARE_TOL = 1e-13

_LAMBDA_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


class EquilibrationError(RuntimeError):
    """Patch data incompatible or patch system singular."""


class IndicatorSet:
    """Nonnegative values per element or vertex with squared-sum aggregation."""

    def __init__(self, kind: str, values):
        if kind not in ("element", "vertex"):
            raise ValueError("kind must be 'element' or 'vertex'")
        v = np.asarray(values, dtype=float)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("indicator values must be finite and nonnegative")
        self.kind = kind
        self.values = v

    def __len__(self):
        return len(self.values)

    def __getitem__(self, idx):
        return self.values[idx]

    @cached_property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.values ** 2)))

    def subset_total(self, ids) -> float:
        return float(np.sqrt(np.sum(self.values[np.asarray(ids, dtype=np.int64)] ** 2)))

    def __repr__(self):
        return f"IndicatorSet({self.kind}, n={len(self)}, total={self.total:.6g})"


def _lambda(points):
    return np.column_stack([1 - points[:, 0] - points[:, 1], points[:, 0], points[:, 1]])


class _Kernels:
    """Element and (element, vertex) pair quantities shared by all patches."""

    def __init__(self, u: DiscreteField, f, degree: int | None = None):
        mesh = u.mesh
        p = u.space.p
        self.mesh, self.u, self.f, self.p = mesh, u, f, p
        self.rt = rt_element(p)
        self.lag = lagrange_element(p)
        self.rule = quadrature_rule(2 * p + 2)
        self.drule = quadrature_rule(data_degree(p) if degree is None else degree)
        self.space = RTSpace(mesh, p)
        r, dr = self.rule, self.drule
        self.tau = self.rt.eval(r.points)  # (nq, nrt, 2)
        self.Mhat = np.einsum("q,qid,qje->deij", r.weights, self.tau, self.tau)
        phi = self.lag.eval(r.points)
        self.Dhat = np.einsum("q,qw,qi->wi", r.weights, phi, self.rt.div(r.points))
        self.phi_int = self.lag.mass.sum(axis=1)
        detJ = mesh.det_jacobians
        coef = u.local_coefficients()
        nq, nb = len(r), self.lag.n_basis
        self.gref = (coef @ self.lag.grad(r.points).transpose(1, 0, 2).reshape(nb, -1)).reshape(-1, nq, 2)
        lam = _lambda(r.points)
        # -(psi_a grad u_h, tau_i) for local vertex k
        W = np.einsum("q,qk,qid->qdki", r.weights, lam, self.tau).reshape(nq * 2, -1)
        self.F = -(self.gref.reshape(-1, nq * 2) @ W).reshape(mesh.n_elements, 3, -1)
        # (psi_a f, w) and (grad psi_a . grad u_h, w)
        Xd = mesh.map_to_physical(dr.points)
        self.fvals = eval_data(f, Xd)
        self.dlam = _lambda(dr.points)
        self.dphi = self.lag.eval(dr.points)
        Wd = np.einsum("q,qk,qw->qkw", dr.weights, self.dlam, self.dphi).reshape(len(dr), -1)
        G1 = (self.fvals @ Wd).reshape(mesh.n_elements, 3, nb) * detJ[:, None, None]
        Ginv = mesh.inv_jacobians
        Cinv = Ginv @ Ginv.transpose(0, 2, 1)
        gg = (_LAMBDA_GRAD @ Cinv) @ self.gref.transpose(0, 2, 1)  # (ne, 3, nq)
        G2 = (gg @ (r.weights[:, None] * phi)) * detJ[:, None, None]
        self.G1 = G1
        self.G = G1 - G2
        self.Minv = self.lag.mass_inv

    def element_A(self, els):
        J = self.mesh.jacobians[els]
        JtJ = J.transpose(0, 2, 1) @ J
        n = self.Mhat.shape[-1]
        A = JtJ.reshape(-1, 4) @ self.Mhat.reshape(4, n * n)
        return A.reshape(-1, n, n) / self.mesh.det_jacobians[els, None, None]

    def proj_psi_f(self):
        """(ne, 3, nb) Lagrange coefficients of Pi^p(psi_a f) per pair."""
        return np.einsum("wv,tkv->tkw", self.Minv, self.G1) / self.mesh.det_jacobians[:, None, None]

    def g_coeffs(self):
        """(ne, 3, nb) Lagrange coefficients of g_a per pair."""
        return np.einsum("wv,tkv->tkw", self.Minv, self.G) / self.mesh.det_jacobians[:, None, None]


@dataclass
class EquilibratedFluxes:
    """All patch fluxes for one discrete solution.

    ``pair_coeffs[t, k]`` holds the element-local RT coefficients on element
    ``t`` of the flux of the patch around ``mesh.elements[t, k]``.
    """

    mesh: Mesh
    u: DiscreteField
    f: object
    p: int
    pair_coeffs: np.ndarray
    pair_flux_norm: np.ndarray
    pair_osc: np.ndarray
    div_residual: np.ndarray
    compatibility: np.ndarray
    vertices: np.ndarray
    kernels: _Kernels

    def patch_flux(self, a: int) -> "PatchFlux":
        patch = vertex_patch(self.mesh, a)
        space = build_rt_space(patch, self.p)
        c = self.pair_coeffs[patch.elements, patch.center_index]
        coeffs = np.zeros(space.n_dofs)
        coeffs[space.element_dofs.ravel()] = (c * space.element_signs).ravel()
        return PatchFlux(patch, DiscreteField(space, coeffs))

    def vertex_values(self) -> np.ndarray:
        """eta(a) for the computed vertices (full vertex array, zero elsewhere)."""
        h = self.mesh.diameters[:, None]
        per_pair = (self.pair_flux_norm + h / np.pi * self.pair_osc) ** 2
        out = np.bincount(self.mesh.elements.ravel(), weights=per_pair.ravel(),
                          minlength=self.mesh.n_vertices)
        return np.sqrt(out)

    def osc_vertex_values(self) -> np.ndarray:
        h = self.mesh.diameters[:, None]
        per_pair = (h / np.pi * self.pair_osc) ** 2
        return np.sqrt(np.bincount(self.mesh.elements.ravel(), weights=per_pair.ravel(),
                                   minlength=self.mesh.n_vertices))


@dataclass
class PatchFlux:
    patch: PatchSubmesh
    field: DiscreteField

    @property
    def center(self) -> int:
        return self.patch.center


@dataclass
class PatchRHS:
    """Divergence data of one patch problem.

    ``coeffs`` are Lagrange coefficients of g_a on each patch element;
    ``compatibility`` is ``|int g_a|`` (NaN for boundary vertices).
    """

    center: int
    elements: np.ndarray
    coeffs: np.ndarray
    integral: float
    norm: float
    area: float
    interior: bool

    @property
    def compatibility(self) -> float:
        return abs(self.integral) if self.interior else float("nan")


def _check_compat(integral, norm, area, a):
    if abs(integral) > COMPAT_TOL * max(norm, np.finfo(float).tiny) * np.sqrt(area) and abs(integral) > 1e-300:
        raise EquilibrationError(
            f"patch {a}: |int g_a| = {abs(integral):.3e} exceeds compatibility tolerance "
            f"({COMPAT_TOL:g} * {norm:.3e} * {np.sqrt(area):.3e}); the Galerkin solve is inconsistent")


def patch_rhs(a: int, u: DiscreteField, f, degree: int | None = None, check: bool = True,
              kernels: _Kernels | None = None) -> PatchRHS:
    """Right-hand side ``g_a`` of the patch divergence constraint."""
    K = kernels or _Kernels(u, f, degree)
    mesh = u.mesh
    els, loc = mesh.vertex_elements(int(a))
    G = K.G[els, loc]
    detJ = mesh.det_jacobians[els]
    coeffs = G @ K.Minv.T / detJ[:, None]
    integral = float(G.sum())
    norm = float(np.sqrt(max(np.einsum("tw,wv,tv->", G / detJ[:, None], K.Minv, G), 0.0)))
    interior = not bool(mesh.boundary_vertices[a])
    area = float(mesh.areas[els].sum())
    if check and interior:
        _check_compat(integral, norm, area, a)
    return PatchRHS(int(a), els, coeffs, integral, norm, area, interior)


def _patch_groups(mesh: Mesh, vertices):
    indptr, el, loc = mesh.vertex_element_csr
    counts = np.diff(indptr)[vertices]
    interior = ~mesh.boundary_vertices[vertices]
    groups = {}
    for k in np.unique(counts):
        for flag in (True, False):
            sel = vertices[(counts == k) & (interior == flag)]
            if sel.size:
                groups[(int(k), flag)] = sel
    return groups


def _element_shapes(mesh: Mesh, E):
    """Scale- and rotation-invariant ``J^T J / det J`` entries (..., 3) of elements."""
    J = mesh.jacobians[E]
    C = (J.transpose(*range(J.ndim - 2), J.ndim - 1, J.ndim - 2) @ J) / mesh.det_jacobians[E][..., None, None]
    return C.reshape(*E.shape, 4)[..., [0, 1, 3]]


def _canonical_order(mesh: Mesh, verts, E, L):
    """Reorder patch elements counter-clockwise, starting where the sequence of
    element shape codes is lexicographically smallest.

    Returns the reordered ``(E, L)`` and the integer shape codes.
    """
    P, k = E.shape
    d = mesh.centroids[E] - mesh.vertices[verts][:, None, :]
    order = np.argsort(np.arctan2(d[..., 1], d[..., 0]), axis=1, kind="stable")
    E, L = np.take_along_axis(E, order, 1), np.take_along_axis(L, order, 1)
    shape = np.column_stack([L.ravel(), np.round(_element_shapes(mesh, E).reshape(-1, 3) * 1e6)])
    code = np.unique(shape, axis=0, return_inverse=True)[1].reshape(P, k)
    rot = (np.arange(k)[:, None] + np.arange(k)[None, :]) % k  # (rotation, position)
    seqs = code[:, rot]  # (P, k rotations, k)
    best = np.zeros(P, dtype=np.int64)
    for r in range(1, k):
        cand, cur = seqs[:, r], seqs[np.arange(P), best]
        diff = cand != cur
        first = np.argmax(diff, axis=1)
        smaller = diff.any(axis=1) & (np.take_along_axis(cand, first[:, None], 1)[:, 0]
                                      < np.take_along_axis(cur, first[:, None], 1)[:, 0])
        best[smaller] = r
    perm = rot[best]
    return (np.take_along_axis(E, perm, 1), np.take_along_axis(L, perm, 1),
            np.take_along_axis(code, perm, 1))


def _patch_classes(keys, feats):
    """Group patches with equal integer ``keys`` rows and matching ``feats``.

    Returns a list of index arrays; the first index of each is the
    representative whose matrix is shared by the whole class.
    """
    _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    classes = []
    scale = np.abs(feats).max(axis=1)
    for c in np.argsort(first):
        idx = np.flatnonzero(inv == c)
        while idx.size:
            r = idx[0]
            close = np.abs(feats[idx] - feats[r]).max(axis=1) <= SHARE_TOL * scale[r]
            classes.append(idx[close])
            idx = idx[~close]
    return classes


def _solve_group(K: _Kernels, verts, k, interior):
    """Solve all patch systems of one size.

    Returns the canonically ordered patch elements and local vertex indices
    ``(E, L)`` (P, k) and the (P, k, nrt) local flux coefficients.

    Patches whose matrices coincide (NVB produces few similarity classes)
    share one factorization.
    """
    mesh, p = K.mesh, K.p
    space = K.space
    nrt, nb = K.rt.n_basis, K.lag.n_basis
    npe = p + 1
    indptr, el_all, loc_all = mesh.vertex_element_csr
    P = len(verts)
    pos = indptr[verts][:, None] + np.arange(k)[None, :]
    E, L, code = _canonical_order(mesh, verts, el_all[pos], loc_all[pos])  # (P, k)
    gd = space.element_dofs[E]  # (P, k, nrt)
    sg = space.element_signs[E]
    opp = (L + 1) % 3
    j = np.arange(nrt)
    excl = (j[None, None, :] // npe == opp[:, :, None]) & (j[None, None, :] < 3 * npe)
    keys = np.arange(P)[:, None, None] * space.n_dofs + gd
    uk, first, inv = np.unique(keys[~excl], return_index=True, return_inverse=True)
    n_rt = len(uk) // P
    if n_rt * P != len(uk):
        raise EquilibrationError(f"inconsistent patch sizes among vertices {verts[:5].tolist()}...")
    # number patch DoFs by first appearance so that congruent patches share a layout
    rank = np.empty(len(uk), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uk))
    LI = np.full((P, k, nrt), -1, dtype=np.int64)
    LI[~excl] = rank[inv.ravel()] - (uk[inv.ravel()] // space.n_dofs) * n_rt
    n_q = k * nb
    N = n_rt + n_q + (1 if interior else 0)
    LI[excl] = N  # dummy slot for excluded DoFs
    N1 = N + 1
    QI = n_rt + np.arange(k)[:, None] * nb + np.arange(nb)[None, :]  # (k, nb)
    dJ = mesh.det_jacobians[E]
    ratio = dJ / dJ.mean(axis=1, keepdims=True)

    # right-hand sides of all patches
    rhs = np.zeros((P, N1))
    Fv = K.F[E, L] * sg  # (P, k, nrt)
    np.add.at(rhs, (np.repeat(np.arange(P), k * nrt), LI.ravel()), Fv.ravel())
    rhs[:, n_rt:n_rt + n_q] = -K.G[E, L].reshape(P, -1)
    rhs = rhs[:, :N]

    ckeys = np.concatenate([code, sg[:, :, :3 * npe:npe].reshape(P, -1).astype(np.int64),
                            LI[:, :, :3 * npe:npe].reshape(P, -1)], axis=1)
    feats = np.concatenate([_element_shapes(mesh, E).reshape(P, -1), ratio], axis=1)
    classes = _patch_classes(ckeys, feats)
    reps = np.array([c[0] for c in classes])
    Dh = K.Dhat  # (nb, nrt)
    sol = np.empty((P, N))
    chunk = max(1, BATCH_ENTRIES // (N1 * N1))
    for s in range(0, len(reps), chunk):
        rs = reps[s:s + chunk]
        Pc = len(rs)
        Ec, LIc, sgc = E[rs], LI[rs], sg[rs]
        A = K.element_A(Ec.ravel()).reshape(Pc, k, nrt, nrt) * sgc[..., :, None] * sgc[..., None, :]
        base = (np.arange(Pc) * N1 * N1)[:, None, None]
        idx_A = (base[..., None] + LIc[..., :, None] * N1 + LIc[..., None, :]).ravel()
        Bv = -Dh[None, None] * sgc[:, :, None, :]  # (Pc, k, nb, nrt)
        qi = np.broadcast_to(QI[None, :, :, None], (Pc, k, nb, nrt))
        ri = np.broadcast_to(LIc[:, :, None, :], (Pc, k, nb, nrt))
        b4 = base[..., None]
        idx = [idx_A, (b4 + qi * N1 + ri).ravel(), (b4 + ri * N1 + qi).ravel()]
        vals = [A.ravel(), Bv.ravel(), Bv.ravel()]
        if interior:
            # mean-value row scaled by the patch size so that similar patches share matrices
            m = K.phi_int[None, None, :] * ratio[rs][:, :, None]  # (Pc, k, nb)
            qb = np.broadcast_to(QI[None], (Pc, k, nb))
            idx += [(base + qb * N1 + (N - 1)).ravel(), (base + (N - 1) * N1 + qb).ravel()]
            vals += [m.ravel(), m.ravel()]
        M = np.bincount(np.concatenate(idx), weights=np.concatenate(vals),
                        minlength=Pc * N1 * N1).reshape(Pc, N1, N1)[:, :N, :N]
        for i, members in enumerate(classes[s:s + chunk]):
            try:
                sol[members] = np.linalg.solve(M[i], rhs[members].T).T
            except np.linalg.LinAlgError as exc:
                raise EquilibrationError(f"singular patch system at vertex {int(verts[members[0]])}") from exc
    solx = np.concatenate([sol, np.zeros((P, 1))], axis=1)
    out = np.take_along_axis(solx, LI.reshape(P, -1), axis=1).reshape(P, k, nrt) * sg
    return E, L, out


def equilibrate_patches(u: DiscreteField, f, degree: int | None = None,
                        vertices=None, check: bool = True) -> EquilibratedFluxes:
    """Equilibrated fluxes of all (or the given) vertex patches of ``u``'s mesh."""
    mesh = u.mesh
    K = _Kernels(u, f, degree)
    p = K.p
    verts = np.arange(mesh.n_vertices) if vertices is None else np.unique(np.asarray(vertices, dtype=np.int64))
    nrt = K.rt.n_basis
    pair = np.zeros((mesh.n_elements, 3, nrt))
    for (k, interior), vs in _patch_groups(mesh, verts).items():
        E, L, sol = _solve_group(K, vs, k, interior)
        pair[E, L] = sol
    in_set = np.zeros(mesh.n_vertices, dtype=bool)
    in_set[verts] = True
    pair_mask = in_set[mesh.elements]
    pair *= pair_mask[..., None]
    detJ = mesh.det_jacobians
    # compatibility and divergence residuals per vertex
    G = K.G
    integ = np.bincount(mesh.elements.ravel(), weights=G.sum(axis=2).ravel(), minlength=mesh.n_vertices)
    gnorm2 = np.einsum("tkw,wv,tkv->tk", G, K.Minv, G) / detJ[:, None]
    Ds = np.einsum("wi,tki->tkw", K.Dhat, pair)
    R = np.where(pair_mask[..., None], Ds - G, 0.0)
    rnorm2 = np.einsum("tkw,wv,tkv->tk", R, K.Minv, R) / detJ[:, None]
    nv = mesh.n_vertices
    gn = np.sqrt(np.bincount(mesh.elements.ravel(), weights=gnorm2.ravel(), minlength=nv))
    rn = np.sqrt(np.maximum(np.bincount(mesh.elements.ravel(), weights=rnorm2.ravel(), minlength=nv), 0))
    area = np.bincount(mesh.elements.ravel(), weights=np.repeat(mesh.areas, 3), minlength=nv)
    interior = ~mesh.boundary_vertices
    compat = np.where(interior, np.abs(integ), np.nan)
    if check:
        bad = interior & in_set & (np.abs(integ) > COMPAT_TOL * gn * np.sqrt(area)) & (np.abs(integ) > 1e-300)
        if bad.any():
            a = int(np.flatnonzero(bad)[0])
            _check_compat(integ[a], gn[a], area[a], a)
    div_res = np.where(gn > 0, rn / np.where(gn > 0, gn, 1.0), rn)
    # norms of psi_a grad u_h + sigma_a on each pair, at quadrature points
    r = K.rule
    lam = _lambda(r.points)
    J = mesh.jacobians
    Ginv = mesh.inv_jacobians
    gphys = np.einsum("tji,tqj->tqi", Ginv, K.gref)  # (ne, nq, 2)
    sref = np.einsum("qid,tki->tkqd", K.tau, pair)
    sphys = np.einsum("tde,tkqe->tkqd", J, sref) / detJ[:, None, None, None]
    val = lam.T[None, :, :, None] * gphys[:, None, :, :] + sphys
    flux_norm = np.sqrt(np.einsum("q,tkq->tk", r.weights, (val ** 2).sum(-1)) * detJ[:, None])
    # psi_a f - Pi^p(psi_a f) on each pair
    proj = K.proj_psi_f()
    pv = np.einsum("qw,tkw->tkq", K.dphi, proj)
    dev = K.dlam.T[None] * K.fvals[:, None, :] - pv
    osc = np.sqrt(np.maximum(np.einsum("q,tkq->tk", K.drule.weights, dev ** 2) * detJ[:, None], 0))
    return EquilibratedFluxes(mesh, u, f, p, pair, flux_norm * pair_mask, osc * pair_mask,
                              np.where(in_set, div_res, np.nan), compat, verts, K)


def equilibrate_patch(a: int, u: DiscreteField, f, degree: int | None = None) -> PatchFlux:
    """Equilibrated flux of the single patch around vertex ``a``."""
    return equilibrate_patches(u, f, degree, vertices=[a]).patch_flux(a)


def assemble_global_flux(fluxes: EquilibratedFluxes, tol: float = 1e-9) -> DiscreteField:
    """Sum of all patch fluxes as a field in the global RT space.

    Checks that both elements of every interior edge agree on the edge DoFs.
    """
    if len(fluxes.vertices) != fluxes.mesh.n_vertices:
        raise ValueError("the global flux needs the fluxes of all vertex patches")
    space = fluxes.kernels.space
    local = fluxes.pair_coeffs.sum(axis=1) * space.element_signs  # global-oriented
    nrt = local.shape[1]
    npe = fluxes.p + 1
    coeffs = np.zeros(space.n_dofs)
    coeffs[space.element_dofs.ravel()] = local.ravel()
    back = coeffs[space.element_dofs]
    mism = np.abs(back - local)[:, :3 * npe]
    scale = max(np.abs(local).max(initial=0.0), 1.0)
    if mism.max(initial=0.0) > tol * scale:
        t, i = np.unravel_index(np.argmax(mism), mism.shape)
        e = int(space.mesh.element_edges[t, i // npe])
        raise EquilibrationError(f"normal trace mismatch {mism.max():.3e} on edge {e} "
                                 f"{space.mesh.edges[e].tolist()}")
    return DiscreteField(space, coeffs)


# -- indicators -------------------------------------------------------------------

def _elementwise_l2(vals, weights, detJ):
    v = vals ** 2
    if v.ndim == 3:
        v = v.sum(-1)
    return np.sqrt(np.maximum(v @ weights * detJ, 0.0))


def flux_terms(u: DiscreteField, sigma: DiscreteField, f, degree: int | None = None):
    """Per-element ``||grad u_h + sigma||_T`` and ``||f - div sigma||_T``."""
    mesh = u.mesh
    p = u.space.p
    r = quadrature_rule(2 * p + 2)
    a = _elementwise_l2(u.gradients(r.points) + sigma.values(r.points), r.weights, mesh.det_jacobians)
    dr = quadrature_rule(data_degree(p) if degree is None else degree)
    fv = eval_data(f, mesh.map_to_physical(dr.points))
    b = _elementwise_l2(fv - sigma.divergence(dr.points), dr.weights, mesh.det_jacobians)
    return a, b


def element_indicators(u: DiscreteField, sigma: DiscreteField, f, degree: int | None = None) -> IndicatorSet:
    a, b = flux_terms(u, sigma, f, degree)
    return IndicatorSet("element", a + u.mesh.diameters / np.pi * b)


def vertex_indicators(fluxes: EquilibratedFluxes) -> IndicatorSet:
    return IndicatorSet("vertex", fluxes.vertex_values())


def divergence_residual(sigma: DiscreteField, fluxes: EquilibratedFluxes) -> float:
    """Max over elements of the relative residual of ``div sigma = Pi^p f``.

    The residual on T is scaled by ``||Pi^p f||_T + sum_a ||g_a||_T``, the
    size of the terms whose sum it is; zero scale gives the absolute value.
    """
    K = fluxes.kernels
    mesh = sigma.mesh
    detJ = mesh.det_jacobians
    # reference moments (w, div sigma) and (w, Pi^p f) = (w, f)
    Ds = np.einsum("wi,ti->tw", K.Dhat, sigma.local_coefficients())
    Pf = K.G1.sum(axis=1)
    R = Ds - Pf
    num = np.sqrt(np.maximum(np.einsum("tw,wv,tv->t", R, K.Minv, R) / detJ, 0))
    pf = np.sqrt(np.maximum(np.einsum("tw,wv,tv->t", Pf, K.Minv, Pf) / detJ, 0))
    ga = np.sqrt(np.maximum(np.einsum("tkw,wv,tkv->tk", K.G, K.Minv, K.G) / detJ[:, None], 0)).sum(1)
    scale = pf + ga
    rel = np.where(scale > 0, num / np.where(scale > 0, scale, 1.0), num)
    return float(rel.max(initial=0.0))


def project_f(f, mesh, p, degree=None):
    from .spaces import project_L2
    return project_L2(lambda x, y: eval_data(f, np.stack([x, y], -1)), mesh, p,
                      data_degree(p) if degree is None else degree)


def oscillations(f, mesh: Mesh, p: int, degree: int | None = None) -> tuple[IndicatorSet, IndicatorSet]:
    """Element ``h_T/pi ||f - Pi^p f||_T`` and vertex data oscillations."""
    dr = quadrature_rule(data_degree(p) if degree is None else degree)
    lag = lagrange_element(p)
    X = mesh.map_to_physical(dr.points)
    fv = eval_data(f, X)
    phi = lag.eval(dr.points)
    detJ = mesh.det_jacobians
    h = mesh.diameters
    c = ((fv * dr.weights) @ phi) @ lag.mass_inv.T
    el = h / np.pi * _elementwise_l2(fv - c @ phi.T, dr.weights, detJ)
    lam = _lambda(dr.points)
    pf = fv[:, None, :] * lam.T[None]  # (ne, 3, nq)
    cp = pf @ ((dr.weights[:, None] * phi) @ lag.mass_inv.T)
    dev = pf - cp @ phi.T
    pair = (h[:, None] / np.pi) ** 2 * ((dev ** 2) @ dr.weights) * detJ[:, None]
    vert = np.sqrt(np.maximum(np.bincount(mesh.elements.ravel(), weights=pair.ravel(),
                                          minlength=mesh.n_vertices), 0))
    return IndicatorSet("element", el), IndicatorSet("vertex", vert)


def weighted_residual_estimator(u: DiscreteField, f, degree: int | None = None) -> IndicatorSet:
    """Residual estimator with volume term ``|T| ||f + lap u_h||_T^2`` and
    normal-jump term ``|T|^{1/2} ||[d_n u_h]||^2`` over interior edges of T."""
    mesh = u.mesh
    p = u.space.p
    dr = quadrature_rule(data_degree(p) if degree is None else degree)
    fv = eval_data(f, mesh.map_to_physical(dr.points))
    lap = u.laplacians(dr.points) if p >= 2 else 0.0
    vol = _elementwise_l2(fv + lap, dr.weights, mesh.det_jacobians) ** 2
    jump2 = edge_jumps_squared(u)
    ed = mesh.edge_elements
    inner = ed[:, 1] >= 0
    per_el = np.bincount(ed[inner].ravel(), weights=np.repeat(jump2[inner], 2), minlength=mesh.n_elements)
    T = mesh.areas
    return IndicatorSet("element", np.sqrt(T * vol + np.sqrt(T) * per_el))


def edge_jumps_squared(u: DiscreteField) -> np.ndarray:
    """``||[grad u_h . n]||_E^2`` per edge (zero on boundary edges)."""
    mesh = u.mesh
    p = u.space.p
    t, w = line_rule(max(2 * p - 2, 0))
    ed = mesh.edge_elements
    inner = np.flatnonzero(ed[:, 1] >= 0)
    out = np.zeros(mesh.n_edges)
    if inner.size == 0:
        return out
    a = mesh.vertices[mesh.edges[inner, 0]]
    b = mesh.vertices[mesh.edges[inner, 1]]
    d = b - a
    L = np.linalg.norm(d, axis=1)
    n = np.column_stack([d[:, 1], -d[:, 0]]) / L[:, None]
    X = a[:, None, :] + t[None, :, None] * d[:, None, :]  # (nI, nt, 2)
    jumps = np.zeros((inner.size, len(t)))
    for side, sgn in ((0, 1.0), (1, -1.0)):
        T = ed[inner, side]
        ref = np.einsum("eij,eqj->eqi", mesh.inv_jacobians[T], X - mesh.vertices[mesh.elements[T, 0]][:, None, :])
        g = u.gradients_at(np.repeat(T, len(t)), ref.reshape(-1, 2)).reshape(inner.size, len(t), 2)
        jumps += sgn * np.einsum("eqd,ed->eq", g, n)
    out[inner] = (jumps ** 2) @ w * L
    return out


def equivalence_ratios(eta: IndicatorSet, zeta: IndicatorSet, mesh: Mesh) -> tuple[float, float]:
    """``max_T zeta(T)/eta(T*(T))`` and ``max_T eta(T)/zeta(T(T))``.

    Face neighbourhoods ``T*(T)`` and vertex neighbourhoods ``T(T)`` include
    ``T``; the conventions x/0 = inf and 0/0 = 0 apply.
    """
    F = face_adjacency(mesh).astype(float)
    V = vertex_adjacency(mesh).astype(float)
    eta_face = np.sqrt(F @ eta.values ** 2)
    zeta_vert = np.sqrt(V @ zeta.values ** 2)
    return float(np.max(_ratio(zeta.values, eta_face))), float(np.max(_ratio(eta.values, zeta_vert)))


def _ratio(num, den):
    num = np.asarray(num, float)
    den = np.asarray(den, float)
    out = np.zeros_like(num)
    pos = den > 0
    out[pos] = num[pos] / den[pos]
    out[~pos & (num > 0)] = np.inf
    return out
