import math

import numpy as np
import pytest

from eqafem.equilibrate import equilibrate_patches
from eqafem.galerkin import (assemble_poisson, element_load, element_stiffness, prolongate,
                             solve_poisson)
from eqafem.lift import (clb, has_interior_nodes, refine_to_cover, residual_lifting,
                         restrict_to_patch, select_beta, trial_refine_patch, uncovered_vertices)
from eqafem.mesh import audit_mesh, bisect, build_initial_mesh, mesh_from_arrays, vertex_patch
from eqafem.problems import make_problem
from eqafem.spaces import ScalarSpace


def graded_lshape(seed, rounds=4):
    rng = np.random.default_rng(seed)
    m = build_initial_mesh("lshape")
    for _ in range(rounds):
        m = bisect(m, rng.choice(m.n_elements, max(1, m.n_elements // 3), replace=False))
    return m


@pytest.fixture(scope="module")
def lshape_solutions():
    pr = make_problem("lshape")
    mesh = graded_lshape(0)
    return pr, mesh, {p: solve_poisson(mesh, p, pr.f, pr.g) for p in (1, 2)}


def in_patch_interior(patch, X, tol=1e-12):
    """Points strictly inside the patch domain (not on its boundary)."""
    m = patch.mesh
    ref = np.einsum("eij,enj->eni", m.inv_jacobians, X[None] - m.vertices[m.elements[:, 0]][:, None])
    lam = np.stack([1 - ref.sum(-1), ref[..., 0], ref[..., 1]], -1)
    inside = np.all(lam >= -tol, axis=-1).any(0)
    on_bnd = np.zeros(len(X), dtype=bool)
    for a, b in m.vertices[m.edges[m.boundary_edges]]:
        d = b - a
        s = (X - a) @ d / (d @ d)
        off = np.abs((X - a) @ np.array([d[1], -d[0]])) / np.linalg.norm(d)
        on_bnd |= (s >= -tol) & (s <= 1 + tol) & (off <= tol)
    return inside & ~on_bnd


def global_lifting_norm(u, f, a, beta):
    """Lifting norm from a globally assembled system on the globally refined mesh."""
    mesh = u.mesh
    patch = vertex_patch(mesh, a)
    fine = bisect(mesh, {int(t): beta for t in patch.elements})
    space = ScalarSpace(fine, u.space.p, dirichlet=False)
    sys = assemble_poisson(space, f)
    residual = sys.load - sys.matrix @ prolongate(u, fine).coeffs
    idx = np.flatnonzero(in_patch_interior(patch, space.dof_coordinates))
    if idx.size == 0:
        return 0.0
    K = sys.matrix[idx][:, idx].toarray()
    return math.sqrt(residual[idx] @ np.linalg.solve(K, residual[idx]))


class TestClb:
    def test_conventions(self):
        assert clb(0.0, 0.0) == 0.0
        assert clb(1.0, 0.0) == math.inf
        assert clb(2.0, 4.0) == 0.5

    def test_negative_arguments(self):
        with pytest.raises(ValueError):
            clb(-1.0, 1.0)


class TestTrialRefinement:
    def test_single_triangle(self):
        m = mesh_from_arrays(np.array([(0, 0), (1, 0), (0, 1)], float), np.array([(0, 1, 2)]))
        trial = trial_refine_patch(vertex_patch(m, 0), 1)
        assert trial.mesh.n_elements >= 2
        with pytest.raises(ValueError):
            trial_refine_patch(vertex_patch(m, 0), 0)

    @pytest.mark.parametrize("seed", range(20))
    def test_trial_vertices_are_covered(self, seed):
        rng = np.random.default_rng(seed)
        mesh = graded_lshape(seed)
        a = int(rng.integers(mesh.n_vertices))
        beta = int(rng.integers(1, 4))
        patch = vertex_patch(mesh, a)
        trial = trial_refine_patch(patch, beta)
        fine = refine_to_cover(mesh, {a: beta})
        assert audit_mesh(fine) == []
        assert uncovered_vertices(fine, trial.mesh.vertices).size == 0
        if beta == 3:
            assert has_interior_nodes(patch, trial.mesh)

    def test_cover_differs_from_trial_only_outside_the_patch(self):
        mesh = graded_lshape(3)
        a = int(np.flatnonzero(~mesh.boundary_vertices)[0])
        patch = vertex_patch(mesh, a)
        trial = trial_refine_patch(patch, 1)
        fine = refine_to_cover(mesh, {a: 1})
        inside = restrict_to_patch(fine, patch)
        assert inside.mesh.n_elements == trial.mesh.n_elements
        assert fine.n_elements - (mesh.n_elements - len(patch.elements)) >= trial.mesh.n_elements

    def test_empty_plan_and_full_plan(self):
        mesh = graded_lshape(4)
        same = refine_to_cover(mesh, {})
        assert np.array_equal(same.elements, mesh.elements)
        fine = refine_to_cover(mesh, {a: 1 for a in range(mesh.n_vertices)})
        assert np.all(np.bincount(fine.parent, minlength=mesh.n_elements) >= 2)


class TestResidualLifting:
    @pytest.mark.parametrize("p", [1, 2])
    def test_matches_global_assembly(self, lshape_solutions, p):
        pr, mesh, us = lshape_solutions
        u = us[p]
        for a in range(0, mesh.n_vertices, 7):
            for beta in (1, 2):
                local = residual_lifting(trial_refine_patch(vertex_patch(mesh, a), beta), u, pr.f)
                ref = global_lifting_norm(u, pr.f, a, beta)
                assert abs(local - ref) <= 1e-10 * max(ref, 1e-300) + 1e-14

    @pytest.mark.parametrize("p", [1, 2])
    def test_energy_identity(self, lshape_solutions, p):
        pr, mesh, us = lshape_solutions
        u = us[p]
        for a in range(1, mesh.n_vertices, 9):
            trial = trial_refine_patch(vertex_patch(mesh, a), 2)
            norm, r = residual_lifting(trial, u, pr.f, return_field=True)
            if norm == 0:
                continue
            tm = trial.mesh
            c = r.local_coefficients()
            energy = np.einsum("ti,tij,tj->", c, element_stiffness(tm, p), c)
            fr = (element_load(r.space, pr.f) * c).sum()
            # (grad u_h, grad r) from the prolongated coarse field on the trial mesh
            up = global_grad_pairing(u, trial, r)
            assert abs(energy - (fr - up)) <= 1e-10 * energy
            assert np.isclose(math.sqrt(energy), norm, rtol=1e-10)

    def test_monotone_in_beta(self):
        pr = make_problem("lshape")
        for seed in range(20):
            rng = np.random.default_rng(seed)
            mesh = graded_lshape(seed, rounds=3)
            u = solve_poisson(mesh, 1, pr.f, pr.g)
            a = int(rng.integers(mesh.n_vertices))
            patch = vertex_patch(mesh, a)
            norms = [residual_lifting(trial_refine_patch(patch, b), u, pr.f) for b in (1, 2, 3)]
            assert norms[0] <= norms[1] + 1e-12 and norms[1] <= norms[2] + 1e-12

    def test_empty_space_gives_zero(self, lshape_solutions):
        pr, mesh, us = lshape_solutions
        patch = vertex_patch(mesh, 0)
        assert residual_lifting(restrict_to_patch(mesh, patch, np.arange(mesh.n_elements)), us[1], pr.f) == 0.0

    def test_exact_solution_gives_zero(self):
        mesh = graded_lshape(1)
        g = lambda x, y: x ** 2 - y ** 2
        u = solve_poisson(mesh, 2, 0.0, g)
        for a in range(0, mesh.n_vertices, 5):
            for beta in (1, 3):
                assert residual_lifting(trial_refine_patch(vertex_patch(mesh, a), beta), u, 0.0) <= 1e-10


def global_grad_pairing(u, trial, r):
    """(grad u_h, grad r) over the trial mesh with u_h prolongated to it."""
    tm = trial.mesh
    space = r.space
    X = tm.map_to_physical(space.element.nodes).reshape(-1, 2)
    par = np.repeat(trial.global_parent, space.element.n_basis)
    cm = u.mesh
    ref = np.einsum("nij,nj->ni", cm.inv_jacobians[par], X - cm.vertices[cm.elements[par, 0]])
    vals = u.values_at(par, ref).reshape(tm.n_elements, -1)
    return np.einsum("ti,tij,tj->", vals, element_stiffness(tm, space.p), r.local_coefficients())


class TestSelectBeta:
    def test_infinite_target_stops_at_one(self, lshape_solutions):
        pr, mesh, us = lshape_solutions
        eta = equilibrate_patches(us[1], pr.f).vertex_values()
        for a in range(0, mesh.n_vertices, 11):
            assert select_beta(a, us[1], pr.f, 3, math.inf, eta[a]).beta == 1

    def test_early_stop_and_history(self, lshape_solutions):
        pr, mesh, us = lshape_solutions
        eta = equilibrate_patches(us[2], pr.f).vertex_values()
        for a in range(0, mesh.n_vertices, 11):
            res = select_beta(a, us[2], pr.f, 3, 10.0, eta[a])
            assert res.history[-1][0] == res.beta
            assert res.clb <= 10.0 or res.beta == 3
            assert all(c > 10.0 for _, _, c in res.history[:-1])
            assert uncovered_vertices(refine_to_cover(mesh, {a: res.beta}), res.trial_vertices).size == 0
