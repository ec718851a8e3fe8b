"""Doubly mean-reflected backward solvers.

Two entry points.  :func:`solve_constant_driver` handles state-independent
drivers directly: solve the plain backward equation, reflect its *mean* into
the admissible band with the terminal-anchored Skorokhod map, then shift
every particle by the deterministic force ``K_T - K_t``.  :func:`picard_solve`
reduces the general mean-field case to a sequence of such solves by freezing
the generator's arguments at the previous iterate; on horizons too long for
one contraction it splits the interval adaptively and stitches the segment
solutions together backward in time.

The force ``K`` is always a single deterministic function — particles share
it — and its monotone parts are charged only while the corresponding mean
constraint is active (flat residuals near zero).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .bsde import (
    BSDESolution,
    Generator,
    RegressionConfig,
    constant_driver_path,
    solve_bsde,
)
from .constraints import (
    BAND_MIN_DEFAULT,
    ROOT_TOL_DEFAULT,
    LinearEnvelope,
    LinearObstacles,
    LossPair,
    check_envelope_order,
    make_mean_boundary,
)
from .core import (
    Ensemble,
    RngSpec,
    SamplePath,
    TimeGrid,
    build_grid,
    empirical_std,
    ensemble_means,
    pairwise_mean,
    simulate_brownian,
)
from .errors import InfeasibleTerminalError, NonConvergenceError
from .skorokhod import BackwardReflectionSolution, solve_bsp, total_variation

__all__ = [
    "Tolerances",
    "Scenario",
    "MRSolution",
    "PicardTrace",
    "KtVariationReport",
    "solve_constant_driver",
    "picard_solve",
    "kt_variation_guard",
    "terminal_feasibility",
    "require_feasible_terminal",
]

logger = logging.getLogger(__name__)

TerminalFn = Callable[[NDArray[np.floating]], NDArray[np.floating]]


# ---------------------------------------------------------------------------
# scenario plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Tolerances:
    """Tolerance bundle shared by the reflected solvers.

    ``stat_tol_mult`` scales the statistical tolerance ``mult * sigma /
    sqrt(N)`` used wherever an expectation is checked against a hard
    constraint; ``contraction_margin`` is the largest measured Picard ratio
    tolerated before the horizon is split; ``stiff_max`` caps ``n * dt`` per
    sub-step of the penalized mean dynamics.
    """

    picard_tol: float = 1e-6
    max_iterations: int = 50
    contraction_margin: float = 0.9
    root_tol: float = ROOT_TOL_DEFAULT
    band_min: float = BAND_MIN_DEFAULT
    stat_tol_mult: float = 4.0
    stiff_max: float = 0.5

    def __post_init__(self):
        if self.picard_tol <= 0.0 or self.max_iterations < 1:
            raise ValueError("picard_tol must be positive and max_iterations >= 1")
        if not 0.0 < self.contraction_margin < 1.0:
            raise ValueError("contraction_margin must lie in (0, 1)")
        if self.stiff_max <= 0.0:
            raise ValueError("stiff_max must be positive")


@dataclass(frozen=True)
class Scenario:
    """Complete description of one reflected-solve experiment.

    ``terminal`` maps the terminal Brownian cross-section to terminal values
    (scalar results are broadcast).  ``losses`` drives the mean reflection;
    ``envelope`` is mandatory for quadratic-mode generators; ``obstacles``
    is only consumed by the penalization scheme.
    """

    horizon: float
    steps: int
    particles: int
    rng: RngSpec
    terminal: TerminalFn
    generator: Generator
    losses: LossPair | None = None
    envelope: LinearEnvelope | None = None
    obstacles: LinearObstacles | None = None
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    tol: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if self.steps < 1:
            raise ValueError("need at least one time step")
        if self.particles < 2:
            raise ValueError("need at least two particles")

    def make_grid(self) -> TimeGrid:
        return build_grid(self.horizon, self.steps)

    def simulate(self, grid: TimeGrid | None = None) -> Ensemble:
        return simulate_brownian(
            grid if grid is not None else self.make_grid(), self.particles, self.rng
        )

    def terminal_values(self, bm: Ensemble) -> NDArray[np.floating]:
        xi = np.asarray(self.terminal(bm.values[:, -1]), dtype=float)
        if xi.ndim == 0:
            return np.full(bm.particle_count, float(xi))
        if xi.shape != (bm.particle_count,):
            raise ValueError("terminal function must return one value per particle")
        return xi


def terminal_feasibility(
    losses: LossPair,
    t_final: float,
    xi: NDArray[np.floating],
    *,
    stat_tol_mult: float = 4.0,
    root_tol: float = ROOT_TOL_DEFAULT,
) -> tuple[float, float, float]:
    """(E[L(T, xi)], E[R(T, xi)], tolerance) for the anchor precondition.

    The tolerance is statistical — ``mult * sigma / sqrt(N)`` with sigma the
    larger loss-value spread — plus the root tolerance, so it degrades
    gracefully to a deterministic check for spread-free terminals.
    """
    xi = np.asarray(xi, dtype=float)
    lv = np.asarray(losses.L(float(t_final), xi), dtype=float)
    rv = np.asarray(losses.R(float(t_final), xi), dtype=float)
    stat = stat_tol_mult * max(empirical_std(lv), empirical_std(rv)) / math.sqrt(xi.size)
    return float(pairwise_mean(lv)), float(pairwise_mean(rv)), stat + root_tol


def require_feasible_terminal(
    losses: LossPair,
    t_final: float,
    xi: NDArray[np.floating],
    *,
    stat_tol_mult: float = 4.0,
    root_tol: float = ROOT_TOL_DEFAULT,
) -> float:
    """Raise :class:`InfeasibleTerminalError` unless the anchor is admissible.

    Returns the tolerance that was applied (callers forward it to the
    backward reflection so both checks agree).
    """
    e_l, e_r, tol = terminal_feasibility(
        losses, t_final, xi, stat_tol_mult=stat_tol_mult, root_tol=root_tol
    )
    if e_l > tol or e_r < -tol:
        raise InfeasibleTerminalError(
            f"terminal values are infeasible: E[L(T, xi)] = {e_l:.6g}, "
            f"E[R(T, xi)] = {e_r:.6g}, tolerance {tol:.3g}"
        )
    return tol


# ---------------------------------------------------------------------------
# solution containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PicardTrace:
    """Execution record of the fixed-point iteration.

    Entries are flattened in execution order (segments are solved from the
    terminal backward; within a segment, iterations in order).  ``ratios``
    holds consecutive combined-distance quotients within segments only.
    ``k_variations``/``s_variations`` hold, per iteration, the force's total
    variation and the variation of the reflected input path — the raw
    material of the force-variation guard; ``envelope_terms`` additionally
    holds the envelope band-edge variation when the scenario declared one.
    """

    y_distances: tuple[float, ...]
    k_distances: tuple[float, ...]
    ratios: tuple[float, ...]
    iterations: int
    converged: bool
    segment_count: int = 1
    segment_iterations: tuple[int, ...] = ()
    k_variations: tuple[float, ...] = ()
    s_variations: tuple[float, ...] = ()
    envelope_terms: tuple[float, ...] | None = None

    @property
    def combined_distances(self) -> tuple[float, ...]:
        return tuple(a + b for a, b in zip(self.y_distances, self.k_distances))


@dataclass(frozen=True)
class MRSolution:
    """Reflected solution: particles, martingale coefficients, and the force.

    ``y`` holds the reflected particles, ``inner`` the plain backward
    solution they were shifted from, so ``y = inner + (K_T - K_t)`` holds
    particle-wise.  ``K = push_up - push_down`` is one deterministic
    function; ``s_sup`` records the sup of the reflected input path(s) for
    flat-residual tolerance scaling.
    """

    y: Ensemble
    z: Ensemble
    inner: Ensemble
    K: SamplePath
    push_up: SamplePath
    push_down: SamplePath
    flat_residual_up: float
    flat_residual_down: float
    s_sup: float
    trace: PicardTrace | None = None

    @property
    def variation(self) -> float:
        """Total variation of K through its monotone parts."""
        return float(self.push_up.values[-1] + self.push_down.values[-1])

    @property
    def mean_path(self) -> NDArray[np.floating]:
        """Empirical mean of the reflected particles at every node."""
        return ensemble_means(self.y)


# ---------------------------------------------------------------------------
# the constant-driver construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _SegmentSolution:
    """One constant-driver solve on one (sub-)grid."""

    plain: BSDESolution
    bsp: BackwardReflectionSolution
    y: Ensemble
    s: SamplePath


def _construct(
    xi: NDArray[np.floating],
    bm: Ensemble,
    times: NDArray[np.floating],
    losses: LossPair,
    driver: NDArray[np.floating],
    cfg: RegressionConfig,
    tol: Tolerances,
    terminal_tol: float,
) -> _SegmentSolution:
    """Reflect a frozen-driver solve: plain solution, mean reflection, shift.

    The reflected input is the accumulated mean drift ``s_t = E[y_t0 - y_t]``
    anchored at ``a = E[xi]``; the boundary pair averages the losses over the
    recentred plain cross-sections, so the reflected mean satisfies the
    original mean constraints by construction.
    """
    plain = solve_bsde(xi, None, bm, cfg, driver=driver)
    means = ensemble_means(plain.y)
    s = SamplePath(bm.grid, means[0] - means)
    bp = make_mean_boundary(plain.y, losses, times=times)
    bsp = solve_bsp(
        s,
        float(means[-1]),
        bp,
        root_tol=tol.root_tol,
        band_min=tol.band_min,
        terminal_tol=terminal_tol,
    )
    shift = bsp.K.values[-1] - bsp.K.values
    y = Ensemble(bm.grid, plain.y.values + shift[None, :])
    return _SegmentSolution(plain, bsp, y, s)


def solve_constant_driver(
    sc: Scenario,
    driver: NDArray[np.floating] | None = None,
    *,
    bm: Ensemble | None = None,
) -> MRSolution:
    """Solve the reflected problem for a state-independent driver.

    ``driver`` is a per-particle drift path ``(particles, nodes)``; omitted,
    it is built by evaluating the scenario's generator on zero ensembles,
    which is only meaningful for generators that ignore their state and law
    arguments.  ``bm`` lets callers reuse a simulated Brownian ensemble.
    """
    if sc.losses is None:
        raise ValueError("scenario carries no loss pair")
    grid = bm.grid if bm is not None else sc.make_grid()
    if bm is None:
        bm = sc.simulate(grid)
    xi = sc.terminal_values(bm)
    term_tol = require_feasible_terminal(
        sc.losses,
        sc.horizon,
        xi,
        stat_tol_mult=sc.tol.stat_tol_mult,
        root_tol=sc.tol.root_tol,
    )
    if driver is None:
        zeros = Ensemble(grid, np.zeros_like(bm.values))
        driver = constant_driver_path(sc.generator, zeros, zeros)
    else:
        driver = np.asarray(driver, dtype=float)
    seg = _construct(
        xi, bm, grid.nodes, sc.losses, driver, sc.regression, sc.tol, term_tol
    )
    return MRSolution(
        y=seg.y,
        z=seg.plain.z,
        inner=seg.plain.y,
        K=seg.bsp.K,
        push_up=seg.bsp.push_up,
        push_down=seg.bsp.push_down,
        flat_residual_up=seg.bsp.flat_residual_up,
        flat_residual_down=seg.bsp.flat_residual_down,
        s_sup=float(np.max(np.abs(seg.s.values))),
    )


# ---------------------------------------------------------------------------
# Picard fixed point with adaptive interval splitting
# ---------------------------------------------------------------------------


class _SplitNeeded(Exception):
    """Internal: the current segmentation failed to contract."""


class _TraceBuilder:
    def __init__(self) -> None:
        self.y_distances: list[float] = []
        self.k_distances: list[float] = []
        self.ratios: list[float] = []
        self.k_variations: list[float] = []
        self.s_variations: list[float] = []
        self.envelope_terms: list[float] = []
        self.has_envelope = False
        self.segment_iterations: list[int] = []
        self._segment_converged: list[bool] = []
        self._prev_combined: float | None = None

    def start_segment(self) -> None:
        self.segment_iterations.append(0)
        self._segment_converged.append(False)
        self._prev_combined = None

    def record(
        self, d_y: float, d_k: float, k_var: float, s_var: float, env_term: float | None
    ) -> None:
        combined = d_y + d_k
        self.y_distances.append(d_y)
        self.k_distances.append(d_k)
        self.k_variations.append(k_var)
        self.s_variations.append(s_var)
        if env_term is not None:
            self.envelope_terms.append(env_term)
            self.has_envelope = True
        if self._prev_combined is not None and self._prev_combined > 0.0:
            self.ratios.append(combined / self._prev_combined)
        self._prev_combined = combined
        self.segment_iterations[-1] += 1

    def mark_converged(self) -> None:
        self._segment_converged[-1] = True

    def freeze(self) -> PicardTrace:
        return PicardTrace(
            y_distances=tuple(self.y_distances),
            k_distances=tuple(self.k_distances),
            ratios=tuple(self.ratios),
            iterations=len(self.y_distances),
            converged=bool(self._segment_converged) and all(self._segment_converged),
            segment_count=len(self.segment_iterations),
            segment_iterations=tuple(self.segment_iterations),
            k_variations=tuple(self.k_variations),
            s_variations=tuple(self.s_variations),
            envelope_terms=tuple(self.envelope_terms) if self.has_envelope else None,
        )


def _max_rms_gap(a: NDArray[np.floating], b: NDArray[np.floating]) -> float:
    d = a - b
    return float(np.sqrt(np.max(pairwise_mean(d * d, axis=0))))


def _envelope_edge_variation(env: LinearEnvelope, times: NDArray[np.floating]) -> float:
    """Var(p/b) + Var(q/b) over the given clock times."""
    bs = np.array([float(env.b(float(t))) for t in times])
    if np.any(bs <= 0.0):
        raise ValueError("envelope slope b must stay positive")
    ps = np.array([float(env.p(float(t))) for t in times])
    qs = np.array([float(env.q(float(t))) for t in times])
    if np.min(ps - qs) <= 0.0:
        raise ValueError("envelope gap p - q must stay positive")
    return float(np.sum(np.abs(np.diff(ps / bs))) + np.sum(np.abs(np.diff(qs / bs))))


def _picard_segment(
    sc: Scenario,
    bm_seg: Ensemble,
    times: NDArray[np.floating],
    xi: NDArray[np.floating],
    init: str,
    builder: _TraceBuilder,
) -> _SegmentSolution:
    """Iterate the frozen-driver construction on one segment to tolerance.

    Raises :class:`_SplitNeeded` when a measured contraction ratio exceeds
    the margin or the iteration cap runs out — the caller reacts by
    splitting the horizon further.
    """
    gen, lp, tol, cfg = sc.generator, sc.losses, sc.tol, sc.regression
    grid = bm_seg.grid
    n, m = bm_seg.values.shape
    e_l, e_r, term_tol = terminal_feasibility(
        lp, float(times[-1]), xi, stat_tol_mult=tol.stat_tol_mult, root_tol=tol.root_tol
    )
    if e_l > term_tol or e_r < -term_tol:
        raise InfeasibleTerminalError(
            f"stitched terminal at t = {times[-1]:.6g} is infeasible: "
            f"E[L] = {e_l:.6g}, E[R] = {e_r:.6g}, tolerance {term_tol:.3g}"
        )
    env_term = (
        _envelope_edge_variation(sc.envelope, times) if sc.envelope is not None else None
    )

    if init == "zero":
        u = Ensemble(grid, np.zeros((n, m)))
        v = Ensemble(grid, np.zeros((n, m)))
    else:
        p0 = solve_bsde(xi, gen, bm_seg, cfg, times=times)
        u, v = p0.y, p0.z
    k_prev = np.zeros(m)

    builder.start_segment()
    prev_d: float | None = None
    for _ in range(tol.max_iterations):
        driver = constant_driver_path(gen, u, v, times=times)
        seg = _construct(xi, bm_seg, times, lp, driver, cfg, tol, term_tol)
        d_y = _max_rms_gap(seg.y.values, u.values)
        d_k = float(np.max(np.abs(seg.bsp.K.values - k_prev)))
        builder.record(
            d_y, d_k, seg.bsp.variation, total_variation(seg.s), env_term
        )
        d = d_y + d_k
        u, v, k_prev = seg.y, seg.plain.z, seg.bsp.K.values
        if d <= tol.picard_tol:
            builder.mark_converged()
            return seg
        if prev_d is not None and prev_d > 0.0 and d / prev_d > tol.contraction_margin:
            raise _SplitNeeded
        prev_d = d
    raise _SplitNeeded


def _segment_bounds(steps: int, n_segments: int) -> list[int]:
    return [int(round(j * steps / n_segments)) for j in range(n_segments + 1)]


def _stitch(
    segs: list[tuple[int, int, _SegmentSolution]],
    grid: TimeGrid,
    trace: PicardTrace | None,
) -> MRSolution:
    """Concatenate segment solutions into one full-horizon solution.

    Monotone force parts accumulate across segments; the stitched inner
    ensemble is re-based so the particle-wise representation
    ``y = inner + (K_T - K_t)`` holds against the *global* force.
    """
    n = segs[0][2].y.values.shape[0]
    m = grid.n_nodes
    yv = np.empty((n, m))
    zv = np.empty((n, m))
    pu = np.empty(m)
    pd = np.empty(m)
    base_up = base_dn = 0.0
    fr_up = fr_dn = 0.0
    s_sup = 0.0
    for a, b, seg in segs:
        yv[:, a : b + 1] = seg.y.values
        zv[:, a : b + 1] = seg.plain.z.values
        pu[a : b + 1] = base_up + seg.bsp.push_up.values
        pd[a : b + 1] = base_dn + seg.bsp.push_down.values
        base_up = float(pu[b])
        base_dn = float(pd[b])
        fr_up += seg.bsp.flat_residual_up
        fr_dn += seg.bsp.flat_residual_down
        s_sup = max(s_sup, float(np.max(np.abs(seg.s.values))))
    kv = pu - pd
    inner = np.empty((n, m))
    for a, b, seg in segs:
        inner[:, a : b + 1] = seg.plain.y.values - (kv[-1] - kv[b])
    return MRSolution(
        y=Ensemble(grid, yv),
        z=Ensemble(grid, zv),
        inner=Ensemble(grid, inner),
        K=SamplePath(grid, kv),
        push_up=SamplePath(grid, pu),
        push_down=SamplePath(grid, pd),
        flat_residual_up=fr_up,
        flat_residual_down=fr_dn,
        s_sup=s_sup,
        trace=trace,
    )


def _picard_attempt(
    sc: Scenario,
    bm: Ensemble,
    xi: NDArray[np.floating],
    n_segments: int,
    init: str,
    builder: _TraceBuilder,
) -> MRSolution:
    grid = bm.grid
    nodes = grid.nodes
    bounds = _segment_bounds(grid.n_steps, n_segments)
    solved: list[tuple[int, int, _SegmentSolution]] = []
    xi_seg = xi
    for j in reversed(range(n_segments)):
        a, b = bounds[j], bounds[j + 1]
        sub_nodes = nodes[a : b + 1] - nodes[a]
        sub_grid = TimeGrid(float(nodes[b] - nodes[a]), sub_nodes)
        bm_seg = Ensemble(sub_grid, bm.values[:, a : b + 1])
        seg = _picard_segment(sc, bm_seg, nodes[a : b + 1], xi_seg, init, builder)
        solved.append((a, b, seg))
        xi_seg = seg.y.values[:, 0].copy()
    solved.reverse()
    return _stitch(solved, grid, builder.freeze())


def picard_solve(sc: Scenario, *, init: str = "zero") -> MRSolution:
    """Fixed-point solve of the mean-field reflected problem.

    Each iteration freezes the generator's state and law arguments at the
    previous iterate, evaluates the resulting state-independent driver, and
    applies the constant-driver construction; iteration stops when the
    combined sup-node root-mean-square move of the particles plus the sup
    move of the force drops below ``picard_tol``.

    If a measured contraction ratio exceeds the configured margin (or the
    iteration cap is hit), the horizon is split into twice as many segments
    and the solve restarts, stitching segment solutions backward from the
    terminal; each stitched terminal is re-validated for feasibility.

    ``init`` selects the initial iterate: ``"zero"`` or ``"unreflected"``
    (the plain self-consistent backward solve).
    """
    if sc.losses is None:
        raise ValueError("scenario carries no loss pair")
    if init not in ("zero", "unreflected"):
        raise ValueError("init must be 'zero' or 'unreflected'")
    gen = sc.generator
    if gen.mode == "quadratic":
        if sc.envelope is None:
            raise ValueError("quadratic-mode scenarios require a linear envelope")
        ts = np.array([0.0, 0.5 * sc.horizon, sc.horizon])
        xs = np.linspace(-10.0, 10.0, 41)
        if not check_envelope_order(sc.losses, sc.envelope, ts, xs):
            raise ValueError("declared envelope does not enclose the losses")

    grid = sc.make_grid()
    bm = sc.simulate(grid)
    xi = sc.terminal_values(bm)
    require_feasible_terminal(
        sc.losses,
        sc.horizon,
        xi,
        stat_tol_mult=sc.tol.stat_tol_mult,
        root_tol=sc.tol.root_tol,
    )
    ratio_cc = sc.losses.C / sc.losses.c
    logger.debug(
        "picard horizon %.4g: smallness products %.3g (lipschitz), %.3g (quadratic)",
        sc.horizon,
        (4.0 + 24.0 * ratio_cc) * gen.lam * sc.horizon,
        (32.0 + 192.0 * ratio_cc) * gen.lam * sc.horizon,
    )

    max_segments = max(1, grid.n_steps // 2)
    n_segments = 1
    while True:
        builder = _TraceBuilder()
        try:
            return _picard_attempt(sc, bm, xi, n_segments, init, builder)
        except _SplitNeeded:
            nxt = min(2 * n_segments, max_segments)
            if nxt == n_segments:
                raise NonConvergenceError(
                    f"fixed-point iteration failed to contract with {n_segments} "
                    f"segment(s) of >= 2 steps; refine the grid or shorten the horizon",
                    trace=builder.freeze(),
                ) from None
            logger.debug("splitting horizon: %d -> %d segments", n_segments, nxt)
            n_segments = nxt


# ---------------------------------------------------------------------------
# force-variation guard (quadratic mode)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KtVariationReport:
    """Per-iterate force variation against the envelope bound."""

    variations: tuple[float, ...]
    bounds: tuple[float, ...]
    slacks: tuple[float, ...]
    passed: bool


def kt_variation_guard(
    trace: PicardTrace, envelope: LinearEnvelope, *, tv_tol: float = 1e-6
) -> KtVariationReport:
    """Check every recorded iterate's force variation against the envelope.

    The bound per iterate is ``Var(p/b) + Var(q/b) + 2 Var(s)`` — the
    envelope band-edge variation plus twice the variation of that iterate's
    reflected input path.  Both ingredients are recorded at solve time
    (where the segment clocks are known), so the trace must come from a
    scenario that declared the envelope.  Report-only: never raises on a
    violated bound.
    """
    if envelope is None:
        raise ValueError("an envelope is required")
    if trace.envelope_terms is None:
        raise ValueError(
            "trace carries no envelope terms; solve with the envelope declared "
            "on the scenario"
        )
    bounds = tuple(
        term + 2.0 * s_var
        for term, s_var in zip(trace.envelope_terms, trace.s_variations)
    )
    slacks = tuple(b + tv_tol - v for b, v in zip(bounds, trace.k_variations))
    return KtVariationReport(
        variations=trace.k_variations,
        bounds=bounds,
        slacks=slacks,
        passed=all(s >= 0.0 for s in slacks),
    )
