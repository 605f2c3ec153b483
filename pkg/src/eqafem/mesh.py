"""Conforming triangular meshes with newest-vertex bisection.

Elements are stored counter-clockwise with the refinement edge as local edge
0, i.e. the edge ``(v0, v1)``.  Local edge ``k`` is ``(v_k, v_{k+1 mod 3})``.
Refinement appends new vertices, so vertex ids of a coarse mesh remain valid
on every refinement of it; element ids are re-indexed and bridged by
``Mesh.parent``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

_LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


class MeshFormatError(ValueError):
    """Malformed mesh text file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class Mesh:
    """Immutable conforming triangulation.

    Parameters
    ----------
    vertices : (nv, 2) array
    elements : (ne, 3) int array
        Counter-clockwise vertex triples whose first edge is the refinement edge.
    generation : (ne,) int array, optional
        Number of bisections separating each element from the initial mesh.
    parent : (ne,) int array, optional
        Element id in the mesh this one was refined from.
    """

    def __init__(self, vertices, elements, generation=None, parent=None):
        self.vertices = _readonly(np.asarray(vertices, dtype=float).reshape(-1, 2))
        self.elements = _readonly(np.asarray(elements, dtype=np.int64).reshape(-1, 3))
        ne = len(self.elements)
        if generation is None:
            generation = np.zeros(ne, dtype=np.int64)
        self.generation = _readonly(np.asarray(generation, dtype=np.int64))
        self.parent = None if parent is None else _readonly(np.asarray(parent, dtype=np.int64))

    def __repr__(self):
        return f"Mesh(n_vertices={self.n_vertices}, n_elements={self.n_elements})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def ref_edge(self) -> np.ndarray:
        """Local index of the refinement edge (always 0 by storage convention)."""
        return np.zeros(self.n_elements, dtype=np.int64)

    # -- geometry -----------------------------------------------------------
    @cached_property
    def jacobians(self) -> np.ndarray:
        """(ne, 2, 2) affine maps from the reference triangle, columns v1-v0, v2-v0."""
        v = self.vertices[self.elements]
        J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
        return _readonly(J)

    @cached_property
    def det_jacobians(self) -> np.ndarray:
        J = self.jacobians
        return _readonly(J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0])

    @cached_property
    def inv_jacobians(self) -> np.ndarray:
        J = self.jacobians
        d = self.det_jacobians
        inv = np.empty_like(J)
        inv[:, 0, 0] = J[:, 1, 1] / d
        inv[:, 1, 1] = J[:, 0, 0] / d
        inv[:, 0, 1] = -J[:, 0, 1] / d
        inv[:, 1, 0] = -J[:, 1, 0] / d
        return _readonly(inv)

    @cached_property
    def areas(self) -> np.ndarray:
        return _readonly(0.5 * self.det_jacobians)

    @cached_property
    def diameters(self) -> np.ndarray:
        v = self.vertices[self.elements]
        lens = np.linalg.norm(v[:, [1, 2, 0]] - v, axis=2)
        return _readonly(lens.max(axis=1))

    @cached_property
    def centroids(self) -> np.ndarray:
        return _readonly(self.vertices[self.elements].mean(axis=1))

    def map_to_physical(self, ref_points, elements=None) -> np.ndarray:
        """Physical coordinates (n, nq, 2) of reference points on each element."""
        idx = slice(None) if elements is None else elements
        ref = np.asarray(ref_points, dtype=float).reshape(-1, 2)
        lam = np.column_stack([1.0 - ref.sum(axis=1), ref])  # (nq, 3)
        return lam @ self.vertices[self.elements[idx]]

    # -- topology -----------------------------------------------------------
    @cached_property
    def _edge_data(self):
        ne, nv = self.n_elements, self.n_vertices
        loc = self.elements[:, _LOCAL_EDGES]  # (ne, 3, 2)
        lo = np.minimum(loc[..., 0], loc[..., 1]).ravel()
        hi = np.maximum(loc[..., 0], loc[..., 1]).ravel()
        keys = lo * nv + hi
        ukeys, inv = np.unique(keys, return_inverse=True)
        edges = np.column_stack([ukeys // nv, ukeys % nv])
        el2ed = inv.reshape(ne, 3)
        counts = np.bincount(inv, minlength=len(ukeys))
        if counts.max(initial=0) > 2:
            bad = int(np.argmax(counts))
            raise ValueError(f"edge {edges[bad].tolist()} is shared by more than two elements")
        order = np.argsort(inv, kind="stable")
        owner = order // 3
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        ed2el = -np.ones((len(ukeys), 2), dtype=np.int64)
        ed2el[:, 0] = owner[starts]
        two = counts == 2
        ed2el[two, 1] = owner[starts[two] + 1]
        return _readonly(edges), _readonly(el2ed), _readonly(ed2el)

    @property
    def edges(self) -> np.ndarray:
        """(nE, 2) vertex pairs with the smaller id first."""
        return self._edge_data[0]

    @property
    def element_edges(self) -> np.ndarray:
        """(ne, 3) global edge id of each local edge."""
        return self._edge_data[1]

    @property
    def edge_elements(self) -> np.ndarray:
        """(nE, 2) adjacent elements; -1 marks the missing side of a boundary edge."""
        return self._edge_data[2]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return _readonly(self.edge_elements[:, 1] < 0)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return _readonly(mask)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        v = self.vertices[self.edges]
        return _readonly(np.linalg.norm(v[:, 1] - v[:, 0], axis=1))

    @cached_property
    def _vertex_element_csr(self):
        ne = self.n_elements
        flat = self.elements.ravel()
        order = np.argsort(flat, kind="stable")
        indptr = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=self.n_vertices))])
        return _readonly(indptr), _readonly(order // 3), _readonly(order % 3)

    def vertex_elements(self, a: int) -> tuple[np.ndarray, np.ndarray]:
        """Elements containing vertex ``a`` and the local index of ``a`` in each."""
        indptr, el, loc = self._vertex_element_csr
        s = slice(indptr[a], indptr[a + 1])
        return el[s], loc[s]

    @property
    def vertex_element_csr(self):
        """``(indptr, element, local_index)`` arrays grouping elements by vertex."""
        return self._vertex_element_csr

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """(ne, nv) element-vertex incidence matrix."""
        ne = self.n_elements
        rows = np.repeat(np.arange(ne), 3)
        return sp.csr_matrix((np.ones(3 * ne), (rows, self.elements.ravel())),
                             shape=(ne, self.n_vertices))

    def copy_with(self, **kw) -> "Mesh":
        args = dict(vertices=self.vertices, elements=self.elements,
                    generation=self.generation, parent=self.parent)
        args.update(kw)
        return Mesh(**args)


# -- construction -------------------------------------------------------------

def _orient_and_rotate(vertices, elements, ref_pairs=None):
    """Counter-clockwise orientation and refinement edge moved to local edge 0.

    Without ``ref_pairs`` the longest edge is chosen, ties broken by the
    smallest opposite-vertex id.
    """
    vertices = np.asarray(vertices, dtype=float)
    el = np.array(elements, dtype=np.int64).reshape(-1, 3)
    v = vertices[el]
    det = ((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
           - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0]))
    if np.any(det == 0):
        raise ValueError(f"degenerate element {int(np.flatnonzero(det == 0)[0])}")
    neg = det < 0
    el[neg] = el[neg][:, [0, 2, 1]]
    out = np.empty_like(el)
    for t, tri in enumerate(el):
        if ref_pairs is not None:
            pair = set(ref_pairs[t])
            k = next(k for k in range(3) if {tri[k], tri[(k + 1) % 3]} == pair)
        else:
            p = vertices[tri]
            lens = [np.sum((p[(k + 1) % 3] - p[k]) ** 2) for k in range(3)]
            lmax = max(lens)
            cands = [k for k in range(3) if lens[k] >= lmax * (1 - 1e-12)]
            k = min(cands, key=lambda k: tri[(k + 2) % 3])
        out[t] = tri[[k, (k + 1) % 3, (k + 2) % 3]]
    return out


def mesh_from_arrays(vertices, elements, ref_edge=None) -> Mesh:
    """Initial mesh from raw arrays; ``ref_edge[t]`` names local edge ``(v_k, v_k+1)``."""
    el = np.asarray(elements, dtype=np.int64).reshape(-1, 3)
    pairs = None
    if ref_edge is not None:
        ref_edge = np.asarray(ref_edge, dtype=np.int64)
        pairs = [(el[t, k], el[t, (k + 1) % 3]) for t, k in enumerate(ref_edge)]
    return Mesh(vertices, _orient_and_rotate(vertices, el, pairs))


def _square_grid_mesh(squares, h):
    """Triangulate axis-aligned squares; diagonal through the corner nearest the origin."""
    index = {}
    verts = []

    def vid(x, y):
        key = (round(x / h), round(y / h))
        if key not in index:
            index[key] = len(verts)
            verts.append((x, y))
        return index[key]

    tris = []
    for (x, y) in squares:
        c = [(x, y), (x + h, y), (x + h, y + h), (x, y + h)]
        ids = [vid(*p) for p in c]
        d = [np.hypot(*p) for p in c]
        k = int(np.argmin(d))
        a, b, cc, dd = (ids[(k + i) % 4] for i in range(4))
        tris += [(a, b, cc), (a, cc, dd)]
    return mesh_from_arrays(np.array(verts), np.array(tris))


def build_initial_mesh(domain_spec: str) -> Mesh:
    """Coarse mesh of a named domain or of a mesh text file.

    ``lshape``: (-1,1)^2 minus [0,1]x[-1,0], 6 triangles.  ``cross``: the
    cross of width 1 inside (-1,1)^2, 24 triangles.  ``unit_square``: two
    triangles split along the diagonal through the origin.  Any other
    string is read as a path.
    """
    name = str(domain_spec)
    if name == "lshape":
        verts = [(-1, -1), (0, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
        tris = [(0, 1, 3), (0, 3, 2), (2, 3, 5), (3, 6, 5), (3, 4, 7), (3, 7, 6)]
        return mesh_from_arrays(np.array(verts, float), np.array(tris))
    if name in ("unit_square", "square"):
        return mesh_from_arrays(np.array([(0, 0), (1, 0), (1, 1), (0, 1)], float),
                                np.array([(0, 1, 2), (0, 2, 3)]))
    if name == "cross":
        h = 0.5
        ticks = [-1.0, -0.5, 0.0, 0.5]
        squares = [(x, y) for y in ticks for x in ticks
                   if abs(x + h / 2) < 0.5 or abs(y + h / 2) < 0.5]
        return _square_grid_mesh(squares, h)
    if os.path.exists(name):
        return read_mesh(name)
    raise ValueError(f"unknown domain {name!r}")


def read_mesh(path) -> Mesh:
    """Read the text format ``nv ne`` / ``x y`` lines / ``v0 v1 v2 ref_edge`` lines."""
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                rows.append((lineno, line.split()))
    if not rows:
        raise MeshFormatError("empty mesh file", 1)
    lineno, head = rows[0]
    try:
        nv, ne = (int(x) for x in head)
    except ValueError:
        raise MeshFormatError("header must be 'nv ne'", lineno) from None
    if len(rows) < 1 + nv + ne:
        last = rows[-1][0]
        raise MeshFormatError(f"expected {nv} vertices and {ne} elements", last + 1)
    verts = np.empty((nv, 2))
    for i in range(nv):
        lineno, tok = rows[1 + i]
        try:
            if len(tok) != 2:
                raise ValueError
            verts[i] = [float(t) for t in tok]
        except ValueError:
            raise MeshFormatError("vertex line must be 'x y'", lineno) from None
    els = np.empty((ne, 3), dtype=np.int64)
    ref = np.empty(ne, dtype=np.int64)
    for i in range(ne):
        lineno, tok = rows[1 + nv + i]
        try:
            if len(tok) != 4:
                raise ValueError
            vals = [int(t) for t in tok]
        except ValueError:
            raise MeshFormatError("element line must be 'v0 v1 v2 ref_edge'", lineno) from None
        if min(vals[:3]) < 0 or max(vals[:3]) >= nv or not 0 <= vals[3] <= 2:
            raise MeshFormatError("vertex index or ref_edge out of range", lineno)
        els[i], ref[i] = vals[:3], vals[3]
    if len(rows) > 1 + nv + ne:
        raise MeshFormatError("trailing content", rows[1 + nv + ne][0])
    return mesh_from_arrays(verts, els, ref)


def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_elements}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for tri in mesh.elements:
            fh.write(f"{tri[0]} {tri[1]} {tri[2]} 0\n")


# -- newest-vertex bisection --------------------------------------------------

def _refine_pass(mesh: Mesh, marked: np.ndarray):
    """Bisect every marked element at least once plus the conforming closure.

    Returns the new vertices, elements, generations and the child-to-parent map.
    """
    el = mesh.elements
    el2ed = mesh.element_edges
    emark = np.zeros(mesh.n_edges, dtype=bool)
    emark[el2ed[marked, 0]] = True
    while True:
        has = emark[el2ed].any(axis=1)
        need = has & ~emark[el2ed[:, 0]]
        if not need.any():
            break
        emark[el2ed[need, 0]] = True

    nv = mesh.n_vertices
    newid = -np.ones(mesh.n_edges, dtype=np.int64)
    n_new = int(emark.sum())
    newid[emark] = nv + np.arange(n_new)
    ev = mesh.vertices[mesh.edges[emark]]
    vertices = np.vstack([mesh.vertices, 0.5 * (ev[:, 0] + ev[:, 1])])

    m = newid[el2ed]
    mk = m >= 0
    n1, n2, n3 = el[:, 0], el[:, 1], el[:, 2]
    m0, m1, m2 = m[:, 0], m[:, 1], m[:, 2]
    gen = mesh.generation
    ids = np.arange(mesh.n_elements)

    kids, kgen, kpar = [], [], []

    def emit(mask, tris, dg):
        if mask.any():
            kids.append(np.stack([t[mask] for t in tris], axis=1))
            kgen.append(gen[mask] + dg)
            kpar.append(ids[mask])

    none = ~mk[:, 0]
    only0 = mk[:, 0] & ~mk[:, 1] & ~mk[:, 2]
    with1 = mk[:, 0] & mk[:, 1]
    with2 = mk[:, 0] & mk[:, 2]
    both = with1 & with2
    only1 = with1 & ~mk[:, 2]
    only2 = with2 & ~mk[:, 1]

    emit(none, (n1, n2, n3), 0)
    emit(only0 | only1, (n3, n1, m0), 1)
    emit(only0 | only2, (n2, n3, m0), 1)
    emit(only2 | both, (m0, n3, m2), 2)
    emit(only2 | both, (n1, m0, m2), 2)
    emit(only1 | both, (m0, n2, m1), 2)
    emit(only1 | both, (n3, m0, m1), 2)

    elements = np.concatenate(kids)
    generation = np.concatenate(kgen)
    parent = np.concatenate(kpar)
    order = np.argsort(parent, kind="stable")
    return vertices, elements[order], generation[order], parent[order]


def _as_counts(mesh: Mesh, marks) -> np.ndarray:
    counts = np.zeros(mesh.n_elements, dtype=np.int64)
    if marks is None:
        return counts
    if isinstance(marks, Mapping):
        items = marks.items()
    else:
        arr = np.asarray(marks)
        if arr.dtype == bool:
            if arr.shape != (mesh.n_elements,):
                raise ValueError("boolean marks must have one entry per element")
            return arr.astype(np.int64)
        items = ((int(t), 1) for t in arr.ravel())
    for t, c in items:
        t, c = int(t), int(c)
        if not 0 <= t < mesh.n_elements:
            raise IndexError(f"element id {t} out of range")
        if c < 1:
            raise ValueError(f"bisection count for element {t} must be >= 1")
        counts[t] = max(counts[t], c)
    return counts


def bisect(mesh: Mesh, marks) -> Mesh:
    """Newest-vertex bisection with conforming closure.

    Parameters
    ----------
    mesh : Mesh
        Left unmodified.
    marks : mapping element -> count, iterable of element ids, or boolean mask
        Every descendant of a marked element is bisected until its generation
        exceeds the element's by the requested count.

    Returns
    -------
    Mesh
        Refined mesh whose ``parent`` maps each element into ``mesh``.
    """
    counts = _as_counts(mesh, marks)
    target = mesh.generation + counts
    vertices, elements, generation = mesh.vertices, mesh.elements, mesh.generation
    parent = np.arange(mesh.n_elements)
    cur = mesh
    while True:
        need = generation < target
        if not need.any():
            break
        vertices, elements, generation, par = _refine_pass(cur, need)
        target = target[par]
        parent = parent[par]
        cur = Mesh(vertices, elements, generation)
    return Mesh(vertices, elements, generation, parent)


def refine_uniform(mesh: Mesh, times: int = 1) -> Mesh:
    """``times`` rounds of bisecting every element."""
    out = mesh
    for _ in range(times):
        out = bisect(out, np.ones(out.n_elements, dtype=bool))
    return out


def ancestor_map(meshes: Iterable[Mesh]) -> np.ndarray:
    """Compose parent maps of a refinement chain; returns last -> first element ids."""
    meshes = list(meshes)
    anc = np.arange(meshes[-1].n_elements)
    for m in reversed(meshes[1:]):
        anc = m.parent[anc]
    return anc


# -- patches and neighbourhoods -----------------------------------------------

EDGE_INTERIOR, EDGE_ZERO_TRACE, EDGE_FREE = 0, 1, 2


@dataclass(frozen=True)
class PatchSubmesh:
    """Local copy of the elements sharing one vertex.

    ``edge_kind`` classifies each edge of ``mesh``: interior to the patch,
    part of the boundary where the hat function vanishes (zero normal trace),
    or part of the domain boundary through the centre (free).
    """

    center: int
    elements: np.ndarray
    center_index: np.ndarray
    mesh: Mesh
    vertex_map: np.ndarray
    center_local: int
    edge_kind: np.ndarray

    @property
    def is_interior(self) -> bool:
        return not np.any(self.edge_kind == EDGE_FREE)


def vertex_patch(mesh: Mesh, a: int) -> PatchSubmesh:
    """Patch of all elements containing vertex ``a``."""
    a = int(a)
    if not 0 <= a < mesh.n_vertices:
        raise IndexError(f"vertex id {a} out of range")
    els, loc = mesh.vertex_elements(a)
    gverts = mesh.elements[els]
    vmap, local = np.unique(gverts, return_inverse=True)
    local = local.reshape(-1, 3)
    sub = Mesh(mesh.vertices[vmap], local, mesh.generation[els])
    center_local = int(np.searchsorted(vmap, a))
    kind = np.full(sub.n_edges, EDGE_INTERIOR, dtype=np.int64)
    bnd = sub.boundary_edges
    through = np.any(sub.edges == center_local, axis=1)
    kind[bnd & ~through] = EDGE_ZERO_TRACE
    kind[bnd & through] = EDGE_FREE
    return PatchSubmesh(a, _readonly(els), _readonly(loc), sub, _readonly(vmap),
                        center_local, _readonly(kind))


def face_adjacency(mesh: Mesh) -> sp.csr_matrix:
    """(ne, ne) boolean matrix of elements sharing an edge, diagonal included."""
    ed = mesh.edge_elements
    inner = ed[:, 1] >= 0
    r = np.concatenate([ed[inner, 0], ed[inner, 1], np.arange(mesh.n_elements)])
    c = np.concatenate([ed[inner, 1], ed[inner, 0], np.arange(mesh.n_elements)])
    n = mesh.n_elements
    return sp.csr_matrix((np.ones(len(r), dtype=bool), (r, c)), shape=(n, n))


def vertex_adjacency(mesh: Mesh) -> sp.csr_matrix:
    """(ne, ne) boolean matrix of elements sharing at least one vertex."""
    E = mesh.incidence
    return (E @ E.T).astype(bool).tocsr()


def neighborhoods(mesh: Mesh, S) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Face neighbours, vertex neighbours and second-order vertex patch of ``S``.

    Each set includes ``S`` itself; results are sorted element-id arrays.
    """
    mask = np.zeros(mesh.n_elements, dtype=bool)
    mask[np.asarray(list(S) if not isinstance(S, np.ndarray) else S, dtype=np.int64)] = True
    F = face_adjacency(mesh)
    V = vertex_adjacency(mesh)
    face = (F @ mask) > 0
    vert = (V @ mask) > 0
    second = (V @ vert) > 0
    return np.flatnonzero(face), np.flatnonzero(vert), np.flatnonzero(second)


# -- audits -------------------------------------------------------------------

def audit_mesh(mesh: Mesh) -> list[str]:
    """Conformity and orientation problems found in ``mesh`` (empty if sound)."""
    problems = []
    if np.any(mesh.det_jacobians <= 0):
        problems.append(f"{int(np.sum(mesh.det_jacobians <= 0))} non-positive elements")
    try:
        edges = mesh.edges
    except ValueError as exc:
        return problems + [str(exc)]
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    from scipy.spatial import cKDTree

    tree = cKDTree(mesh.vertices)
    d, _ = tree.query(mids)
    scale = max(np.ptp(mesh.vertices, axis=0).max(), 1.0)
    hanging = d <= 1e-13 * scale
    if hanging.any():
        problems.append(f"{int(hanging.sum())} hanging vertices")
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.elements.ravel()] = True
    if not used.all():
        problems.append(f"{int((~used).sum())} unused vertices")
    return problems


def min_angle(mesh: Mesh) -> float:
    v = mesh.vertices[mesh.elements]
    ang = []
    for k in range(3):
        a = v[:, (k + 1) % 3] - v[:, k]
        b = v[:, (k + 2) % 3] - v[:, k]
        c = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        ang.append(np.arccos(np.clip(c, -1, 1)))
    return float(np.min(ang))


def contains_points(mesh: Mesh, elements, points, tol=1e-12) -> np.ndarray:
    """Whether ``points[i]`` lies in element ``elements[i]`` (closed triangle)."""
    elements = np.asarray(elements)
    v0 = mesh.vertices[mesh.elements[elements, 0]]
    xh = np.einsum("eij,ej->ei", mesh.inv_jacobians[elements], np.asarray(points) - v0)
    lam = np.column_stack([1 - xh.sum(axis=1), xh])
    return np.all(lam >= -tol, axis=1)
