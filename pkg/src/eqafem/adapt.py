"""Adaptive loops: Doerfler marking, the vertex-based loop with computable
contraction factors, and the standard element-based loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .equilibrate import (IndicatorSet, assemble_global_flux, divergence_residual,
                          element_indicators, equilibrate_patches, equivalence_ratios,
                          oscillations, vertex_indicators, weighted_residual_estimator)
from .galerkin import energy_difference, energy_error, energy_norm, solve_poisson
from .lift import (clb, refine_to_cover, residual_lifting, restrict_to_patch, select_beta,
                   uncovered_vertices)
from .mesh import Mesh, bisect, vertex_patch
from .problems import Problem, make_problem

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
# estimators below this fraction of the discrete energy norm are rounding noise
CONVERGED_TOL = 1e-12


class ConfigError(ValueError):
    """Invalid adaptive configuration."""


@dataclass
class AdaptConfig:
    problem: str = "lshape"
    p: int = 1
    theta: float = 0.3
    beta_max: int = 3
    clb_max: float = 10.0
    algorithm: str = "vertex"
    max_dofs: int = 100_000
    max_iters: int = 500
    degree: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (0 < self.theta <= 1):
            raise ConfigError(f"theta must lie in (0, 1], got {self.theta}")
        if self.algorithm not in ("vertex", "element"):
            raise ConfigError(f"algorithm must be 'vertex' or 'element', got {self.algorithm!r}")
        if self.algorithm == "vertex" and self.beta_max < 3:
            raise ConfigError(f"beta_max must be at least 3 for the vertex algorithm, got {self.beta_max}")
        if self.beta_max < 1:
            raise ConfigError("beta_max must be at least 1")
        if not self.clb_max > 0:
            raise ConfigError(f"clb_max must be positive, got {self.clb_max}")
        if int(self.p) != self.p or self.p < 1:
            raise ConfigError(f"p must be a positive integer, got {self.p}")
        if self.max_dofs < 1 or self.max_iters < 1:
            raise ConfigError("max_dofs and max_iters must be positive")


@dataclass
class AdaptRecord:
    """Observables of one adaptive level.

    Ratios and the solution update refer to the step from this level to the
    next and stay NaN on the last level.
    """

    level: int
    n_elem: int
    n_dofs: int
    error: float
    eta_elem_total: float
    eta_vertex_total: float
    osc_total: float
    osc_vertex_total: float
    zeta_total: float
    energy: float
    div_residual: float
    zeta_over_eta: float
    eta_over_zeta: float
    marked: int = 0
    eta_marked: float = 0.0
    clb_min: float = float("nan")
    clb_max: float = float("nan")
    clb_trial_min: float = float("nan")
    clb_trial_max: float = float("nan")
    clb_all: list = field(default_factory=list, repr=False)
    clb_trial_all: list = field(default_factory=list, repr=False)
    beta_hist: list = field(default_factory=list)
    q_ctr: float = float("nan")
    err_ratio: float = float("nan")
    eta_ratio: float = float("nan")
    update_norm: float = float("nan")
    converged: bool = False

    @property
    def effectivity(self) -> float:
        if not np.isfinite(self.error):
            return float("nan")
        if self.error == 0:
            return float("nan") if self.eta_elem_total == 0 else math.inf
        return self.eta_elem_total / self.error

    def efficiency_bound(self, trial: bool = False) -> float:
        """Lower bound ``eta(M) / (sqrt(3) C_lb)`` for the next solution update.

        Uses the constants on the refined mesh by default, or the (larger)
        trial-mesh constants known before refinement.
        """
        c = self.clb_trial_max if trial else self.clb_max
        if self.marked == 0 or math.isinf(c) or math.isnan(c) or c == 0:
            return 0.0
        return self.eta_marked / (SQRT3 * c)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["effectivity"] = self.effectivity
        return d


@dataclass
class AdaptState:
    problem: Problem
    mesh: Mesh
    level: int = 0
    records: list = field(default_factory=list)
    u_prev: object = None
    done: bool = False


def doerfler_mark(indicators, theta: float) -> tuple[np.ndarray, bool]:
    """Minimal set with ``sum_M v^2 >= theta^2 sum v^2``.

    Values are sorted descending with ties broken by ascending id.  Returns
    ``(ids, converged)``; ``converged`` is True (and ids empty) when all
    indicators vanish.
    """
    if not (0 < theta <= 1):
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    v = np.asarray(getattr(indicators, "values", indicators), dtype=float)
    order = np.lexsort((np.arange(v.size), -v))
    sq = np.cumsum(v[order] ** 2)
    if v.size == 0 or sq[-1] == 0:
        return np.zeros(0, dtype=np.int64), True
    k = int(np.searchsorted(sq, theta ** 2 * sq[-1], side="left")) + 1
    return np.sort(order[:min(k, v.size)]), False


def contraction_factor(theta: float, clb: float, d: int = 2) -> float:
    """``sqrt(1 - theta^2 / ((d+1)^2 C_lb^2))``; infinite ``C_lb`` gives 1."""
    if math.isinf(clb):
        return 1.0
    if not clb > 0:
        raise ValueError("C_lb must be positive (zero means the marked indicators vanished)")
    return math.sqrt(max(1.0 - theta ** 2 / ((d + 1) ** 2 * clb ** 2), 0.0))


def fit_rate(records: Sequence, key: str = "error", window: int | None = None) -> float:
    """Least-squares slope of ``log(key)`` against ``log(n_dofs)`` over the last ``window`` records."""
    recs = list(records)[-window:] if window else list(records)
    x = np.array([r.n_dofs if hasattr(r, "n_dofs") else r["n_dofs"] for r in recs], dtype=float)
    y = np.array([getattr(r, key) if hasattr(r, key) else r[key] for r in recs], dtype=float)
    ok = np.isfinite(y) & (y > 0) & (x > 0)
    if ok.sum() < 3:
        raise ValueError(f"need at least 3 positive records to fit a rate, got {int(ok.sum())}")
    x, y = np.log(x[ok]), np.log(y[ok])
    if np.ptp(x) == 0:
        raise ValueError("records must span more than one DoF count")
    return float(np.polyfit(x, y, 1)[0])


def tail_window(records: Sequence, factor: float = 10.0) -> int:
    """Number of final records with at least ``1/factor`` of the final DoF count."""
    n = np.array([r.n_dofs for r in records])
    return int(np.sum(n >= n[-1] / factor))


def _estimate(state: AdaptState, config: AdaptConfig):
    pr = state.problem
    mesh = state.mesh
    u = solve_poisson(mesh, config.p, pr.f, pr.g, config.degree)
    if state.records:
        prev = state.records[-1]
        prev.update_norm = energy_difference(u, state.u_prev, mesh.parent)
    fluxes = equilibrate_patches(u, pr.f, config.degree)
    sigma = assemble_global_flux(fluxes)
    eta_T = element_indicators(u, sigma, pr.f, config.degree)
    eta_V = vertex_indicators(fluxes)
    osc_T, osc_V = oscillations(pr.f, mesh, config.p, config.degree)
    zeta = weighted_residual_estimator(u, pr.f, config.degree)
    r1, r2 = equivalence_ratios(eta_T, zeta, mesh)
    err = energy_error(pr.grad_exact, u, pr.corner, config.degree) if pr.has_exact else float("nan")
    rec = AdaptRecord(
        level=state.level, n_elem=mesh.n_elements, n_dofs=u.space.n_free, error=err,
        eta_elem_total=eta_T.total, eta_vertex_total=eta_V.total,
        osc_total=osc_T.total, osc_vertex_total=osc_V.total, zeta_total=zeta.total,
        energy=energy_norm(u) ** 2, div_residual=divergence_residual(sigma, fluxes),
        zeta_over_eta=r1, eta_over_zeta=r2)
    if state.records:
        prev = state.records[-1]
        if prev.error > 0:
            prev.err_ratio = err / prev.error
        if prev.eta_elem_total > 0:
            prev.eta_ratio = rec.eta_elem_total / prev.eta_elem_total
    return u, fluxes, eta_T, eta_V, rec


def _converged(indicators, rec) -> bool:
    return indicators.total <= CONVERGED_TOL * math.sqrt(rec.energy)


def _should_stop(state, config, rec):
    return rec.n_dofs >= config.max_dofs or state.level + 1 >= config.max_iters


def vertex_adaptive_step(state: AdaptState, config: AdaptConfig) -> AdaptRecord:
    """Solve, equilibrate, mark vertices, select trial refinements, refine."""
    u, fluxes, eta_T, eta_V, rec = _estimate(state, config)
    state.records.append(rec)
    marked, converged = doerfler_mark(eta_V, config.theta)
    if converged or _converged(eta_V, rec):
        rec.converged = True
        state.done = True
        return rec
    if _should_stop(state, config, rec):
        state.done = True
        return rec
    pr = state.problem
    results = [select_beta(int(a), u, pr.f, config.beta_max, config.clb_max, float(eta_V[a]),
                           config.degree) for a in marked]
    trial = np.array([r.clb for r in results])
    rec.marked = len(marked)
    rec.eta_marked = eta_V.subset_total(marked)
    rec.clb_trial_all = trial.tolist()
    rec.clb_trial_min, rec.clb_trial_max = float(trial.min()), float(trial.max())
    rec.beta_hist = np.bincount([r.beta for r in results], minlength=config.beta_max + 1)[1:].tolist()
    new_mesh = refine_to_cover(state.mesh, {r.vertex: r.beta for r in results})
    missing = uncovered_vertices(new_mesh, np.vstack([r.trial_vertices for r in results]))
    if missing.size:
        raise RuntimeError(f"refined mesh misses {missing.size} trial-mesh vertices")
    # constants with the lifting on the refined mesh restricted to each patch
    final = np.array([clb(r.eta, residual_lifting(restrict_to_patch(new_mesh, vertex_patch(state.mesh, r.vertex)),
                                                  u, pr.f, config.degree)) for r in results])
    rec.clb_all = final.tolist()
    rec.clb_min, rec.clb_max = float(final.min()), float(final.max())
    rec.q_ctr = contraction_factor(config.theta, rec.clb_max) if rec.clb_max > 0 else float("nan")
    state.u_prev, state.mesh = u, new_mesh
    state.level += 1
    return rec


def element_adaptive_step(state: AdaptState, config: AdaptConfig) -> AdaptRecord:
    """Solve, estimate, mark elements, bisect marked elements once."""
    u, fluxes, eta_T, eta_V, rec = _estimate(state, config)
    state.records.append(rec)
    marked, converged = doerfler_mark(eta_T, config.theta)
    if converged or _converged(eta_T, rec):
        rec.converged = True
        state.done = True
        return rec
    if _should_stop(state, config, rec):
        state.done = True
        return rec
    rec.marked = len(marked)
    rec.eta_marked = eta_T.subset_total(marked)
    state.u_prev, state.mesh = u, bisect(state.mesh, marked)
    state.level += 1
    return rec


def run_adaptive(config: AdaptConfig, problem: Problem | None = None,
                 callback: Callable[[Mesh, AdaptRecord], None] | None = None) -> AdaptState:
    """Run the configured adaptive loop to convergence or the stopping limits.

    ``callback(mesh, record)`` is called after each level with the mesh the
    record was computed on.
    """
    config.validate()
    pr = problem if problem is not None else make_problem(config.problem, config.p)
    state = AdaptState(pr, pr.initial_mesh())
    step = vertex_adaptive_step if config.algorithm == "vertex" else element_adaptive_step
    while not state.done:
        mesh = state.mesh
        rec = step(state, config)
        logger.info("level %d: %d elements, %d dofs, eta %.4e, error %.4e",
                    rec.level, rec.n_elem, rec.n_dofs, rec.eta_elem_total, rec.error)
        if callback is not None:
            callback(mesh, rec)
    return state
