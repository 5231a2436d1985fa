"""
Convergence experiments for the grid-cell network

Coupled particle / McKean-Vlasov errors, the three-term Wasserstein
splitting of the empirical measure, log-log rate fits and rate tables.
Replica r uses the column keys r * max(M) + k under the plan's master seed,
so replicas share the deterministic profile of the initial law and the
reference Fokker-Planck solution.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from src.config import ExperimentPlan
from src.errors import ValidationError
from src.meanfield import (
    DensityEvolution,
    MVStepper,
    MASS_DRIFT_LIMIT,
    UCellMesh,
    default_pde_dt,
    initial_density,
    reflected_ou_stationary,
    solve_marginal_fp,
)
from src.model import GridCellParams, ModelSpec, estimate_regularity_constants
from src.noise import (
    CoarsenedStream,
    CorrelatedNoiseField,
    IncrementStream,
    NoiseStatisticsReport,
    build_field,
    verify_statistics,
)
from src.particles import (
    HolderFieldFamily,
    ParticleStepper,
    SimulationResult,
    SpatialGrid,
    grid_locations,
    initial_activities,
    record_steps,
    simulate_system,
    step_count,
)
from src.performance_monitor import PerformanceMonitor, get_performance_monitor
from src.streams import derive_seed
from src.transport import (
    EXACT_ATOM_BUDGET,
    DiscreteMeasure,
    TransportEstimate,
    estimate_w1_product,
    quantize_law,
    quantize_samples,
    w_sorted_1d,
)

logger = logging.getLogger(__name__)

DT_CHECK_TOLERANCE = 0.10
TRIANGLE_SLACK = 1e-9
MIN_SLOPE_POINTS = 4
CONFIDENCE = 0.95


# ============================================================================
# Report types
# ============================================================================

@dataclass
class ErrorRow:
    """Coupled error e(N, M) = E[sup_t |u - u_bar|^2]^(1/2), averaged over (i, k)"""
    N: int
    M: int
    error: float
    stderr: float
    replicas: int
    dt: float
    dt_check_relative: Optional[float] = None


@dataclass
class SplittingRow:
    """Replica means of the three Wasserstein terms and the measured total at one record time"""
    N: int
    M: int
    t: float
    particle_term: float
    particle_term_stderr: float
    particle_term_exact: Optional[float]
    particle_term_exact_spread: Optional[float]
    sampling_term: float
    sampling_term_stderr: float
    quadrature_term: float
    total: float
    total_stderr: float
    total_resolution: float
    total_exact: bool
    pairing_bound: float
    replicas: int
    triangle_ok: bool
    dt_check_relative: Optional[float] = None


@dataclass
class SlopeFit:
    """Weighted least-squares fit of log(error) against log(scale)"""
    slope: float
    intercept: float
    slope_stderr: float
    ci_low: float
    ci_high: float
    n_points: int
    variable: str = ""
    quantity: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ConvergenceReport:
    """Results of one experiment run"""
    kind: str
    preset: str = ""
    config_hash: str = ""
    master_seed: int = 0
    error_rows: List[ErrorRow] = field(default_factory=list)
    splitting_rows: List[SplittingRow] = field(default_factory=list)
    slopes: List[SlopeFit] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    invalid_reasons: List[str] = field(default_factory=list)
    fp_check: Dict[str, Any] = field(default_factory=dict)
    tolerances: Dict[str, float] = field(default_factory=dict)
    reference: Optional[DensityEvolution] = field(default=None, repr=False)

    @property
    def valid(self) -> bool:
        return not self.invalid_reasons


@dataclass
class OUOracleReport:
    """Fokker-Planck and particle laws against the reflected OU stationary law"""
    density_l1: float
    particle_w1: float
    n_particles: int
    T: float
    density: Optional[DensityEvolution] = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.density_l1 < 1e-3 and self.particle_w1 < 0.02

    def to_dict(self) -> Dict[str, Any]:
        return {"density_l1": self.density_l1, "particle_w1": self.particle_w1,
                "n_particles": self.n_particles, "T": self.T, "passed": self.passed}


def _tolerances() -> Dict[str, float]:
    return {
        "mass_drift_per_step": MASS_DRIFT_LIMIT,
        "dt_check_relative": DT_CHECK_TOLERANCE,
        "triangle_slack": TRIANGLE_SLACK,
        "exact_transport_atoms": float(EXACT_ATOM_BUDGET),
    }


# ============================================================================
# Rate fits and tables
# ============================================================================

def fit_loglog_slope(points: Iterable[Tuple[float, float, Optional[float]]],
                     variable: str = "", quantity: str = "") -> SlopeFit:
    """
    Weighted least squares of log(error) on log(scale)

    Weights come from the delta method, var(log e) = (stderr / e)^2; when any
    stderr is missing or zero the fit is unweighted. The slope standard error
    is rescaled by the reduced chi-square of the residuals.

    Args:
        points: (scale, error, stderr) triples

    Returns:
        SlopeFit with a 95% Student-t confidence interval

    Raises:
        ValidationError: With fewer than four points or a nonpositive scale or error
    """
    pts = list(points)
    if len(pts) < MIN_SLOPE_POINTS:
        raise ValidationError(f"Slope fits need at least {MIN_SLOPE_POINTS} points, got {len(pts)}", "points")
    scale = np.array([p[0] for p in pts], dtype=float)
    error = np.array([p[1] for p in pts], dtype=float)
    stderr = np.array([np.nan if p[2] is None else p[2] for p in pts], dtype=float)
    if np.any(scale <= 0) or np.any(error <= 0):
        raise ValidationError("Log-log fits need positive scales and errors", "points")

    x = np.log(scale)
    y = np.log(error)
    rel = stderr / error
    if np.all(np.isfinite(rel)) and np.all(rel > 0):
        w = 1.0 / rel ** 2
    else:
        w = np.ones_like(x)
    design = np.column_stack([np.ones_like(x), x])
    root_w = np.sqrt(w)
    coef, _, _, _ = np.linalg.lstsq(design * root_w[:, None], y * root_w, rcond=None)
    intercept, slope = float(coef[0]), float(coef[1])

    dof = len(pts) - 2
    resid = y - design @ coef
    chi2 = float(np.sum(w * resid ** 2))
    cov = np.linalg.inv(design.T @ (w[:, None] * design)) * (chi2 / dof)
    slope_stderr = float(np.sqrt(max(cov[1, 1], 0.0)))
    half_width = float(stats.t.ppf(0.5 + CONFIDENCE / 2.0, dof)) * slope_stderr
    return SlopeFit(slope=slope, intercept=intercept, slope_stderr=slope_stderr,
                    ci_low=slope - half_width, ci_high=slope + half_width,
                    n_points=len(pts), variable=variable, quantity=quantity)


ERROR_COLUMNS = [f.name for f in fields(ErrorRow)]
SPLITTING_COLUMNS = [f.name for f in fields(SplittingRow)]


def format_value(value: Any) -> str:
    """Lossless decimal rendering (17 significant digits for binary64)"""
    if value is None:
        return "-"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def parse_value(text: str) -> Any:
    if text == "-":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        return float(text)


@dataclass
class RateTable:
    text: str
    summary: Dict[str, Any]


def rate_table(report: ConvergenceReport) -> RateTable:
    """
    Fixed-width table of the report rows plus a machine-readable summary

    The error section is always present (header only when empty); the
    splitting section follows when the report has splitting rows.
    """
    lines = ["# errors", "  ".join(ERROR_COLUMNS)]
    for row in report.error_rows:
        lines.append("  ".join(format_value(getattr(row, name)) for name in ERROR_COLUMNS))
    if report.splitting_rows:
        lines.append("# splitting")
        lines.append("  ".join(SPLITTING_COLUMNS))
        for row in report.splitting_rows:
            lines.append("  ".join(format_value(getattr(row, name)) for name in SPLITTING_COLUMNS))
    summary = {
        "kind": report.kind,
        "preset": report.preset,
        "config_hash": report.config_hash,
        "master_seed": report.master_seed,
        "valid": report.valid,
        "invalid_reasons": list(report.invalid_reasons),
        "flags": list(report.flags),
        "slopes": [s.to_dict() for s in report.slopes],
        "fp_check": dict(report.fp_check),
    }
    return RateTable(text="\n".join(lines) + "\n", summary=summary)


def parse_rate_table(text: str) -> Dict[str, List[Dict[str, Any]]]:
    """Rows per section of a rate_table rendering"""
    sections: Dict[str, List[Dict[str, Any]]] = {}
    current, header = None, None
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("# "):
            current, header = line[2:].strip(), None
            sections[current] = []
            continue
        parts = line.split()
        if header is None:
            header = parts
            continue
        sections[current].append({name: parse_value(tok) for name, tok in zip(header, parts)})
    return sections


def _fit_rows(rows: Sequence[Tuple[int, int, float, float]], quantity: str, report: ConvergenceReport) -> None:
    """Fit against whichever of N, M varies (at least four distinct values, the other fixed)"""
    Ns = {r[0] for r in rows}
    Ms = {r[1] for r in rows}
    if len(Ns) == 1 and len(Ms) >= MIN_SLOPE_POINTS:
        variable, points = "M", [(r[1], r[2], r[3]) for r in rows]
    elif len(Ms) == 1 and len(Ns) >= MIN_SLOPE_POINTS:
        variable, points = "N", [(r[0], r[2], r[3]) for r in rows]
    else:
        return
    if any(p[1] <= 0 for p in points):
        report.flags.append(f"slope of {quantity} vs {variable} skipped: nonpositive values")
        return
    fit = fit_loglog_slope(sorted(points), variable=variable, quantity=quantity)
    report.slopes.append(fit)
    logger.info(f"Fitted slope of {quantity} vs {variable}: {fit.slope:.4f} +/- {fit.slope_stderr:.4f}")


def _check_monotone(rows: Sequence[Tuple[int, int, float, float]], label: str, report: ConvergenceReport) -> None:
    ordered = sorted(rows, key=lambda r: (r[0], r[1]))
    for prev, cur in zip(ordered, ordered[1:]):
        if cur[2] > prev[2] + 2.0 * np.hypot(prev[3], cur[3]):
            report.flags.append(
                f"{label} increases from (N={prev[0]}, M={prev[1]}) to (N={cur[0]}, M={cur[1]}) beyond 2 SE"
            )


# ============================================================================
# Shared run context
# ============================================================================

@dataclass
class _RunContext:
    plan: ExperimentPlan
    model: ModelSpec
    params: GridCellParams
    family: HolderFieldFamily
    reference: DensityEvolution
    grids: Dict[int, SpatialGrid]
    fields: Dict[int, CorrelatedNoiseField]
    key_stride: int

    def column_keys(self, replica: int, M: int) -> List[int]:
        return [replica * self.key_stride + k for k in range(M)]


def _concrete(plan: ExperimentPlan) -> Tuple[ModelSpec, GridCellParams]:
    if plan.model.kind != "concrete":
        raise ValidationError("Mean-field experiments need the concrete model", "model.kind")
    params = plan.model.to_params(plan.init.alpha)
    return plan.build_model(), params


def solve_reference(plan: ExperimentPlan, monitor: Optional[PerformanceMonitor] = None,
                    refinement: Optional[bool] = None) -> Tuple[DensityEvolution, Dict[str, Any]]:
    """
    Fokker-Planck reference law on P nodes with the plan's initial law

    Returns:
        (density, check) where check holds the u-refinement comparison of the
        moment fields and the second-moment growth ratio
    """
    monitor = monitor or get_performance_monitor()
    _, params = _concrete(plan)
    d, n_orient = plan.model.space_dim, plan.model.orientations
    family = plan.init.family(n_orient, d, plan.experiment.master_seed)
    xgrid = grid_locations(plan.fp_nodes(), d)
    T = plan.experiment.T
    record_times = plan.record_times
    check: Dict[str, Any] = {"nodes": xgrid.N, "n_u": plan.fp.n_u, "u_max": plan.fp.u_max}

    def solve(ucells: UCellMesh) -> DensityEvolution:
        dt_pde = plan.fp.dt_pde or default_pde_dt(params, ucells, T, steps_multiple=plan.experiment.record_count)
        f0 = initial_density(family, xgrid, ucells)
        return solve_marginal_fp(params, xgrid, ucells, f0, T, dt_pde=dt_pde, record_times=record_times,
                                 advection=plan.fp.advection, coupling=plan.fp.coupling)

    ucells = UCellMesh(plan.fp.u_max, plan.fp.n_u)
    with monitor.track(f"fp-reference-{plan.fp.n_u}", "fp-reference"):
        density = solve(ucells)
    check["dt_pde"] = density.dt

    centers = ucells.centers
    second = [float(np.mean(density.marginal_masses(j) @ centers ** 2)) for j in range(density.times.size)]
    check["moment_growth"] = second[-1] / (1.0 + second[0])

    do_refine = plan.fp.refinement_check if refinement is None else refinement
    if do_refine:
        with monitor.track(f"fp-reference-{2 * plan.fp.n_u}", "fp-reference"):
            fine = solve(ucells.refined(2))
        change = 0.0
        for t in record_times:
            coarse_m, fine_m = density.moments_at(t), fine.moments_at(t)
            scale = max(float(np.max(np.abs(fine_m))), 1e-12)
            change = max(change, float(np.max(np.abs(coarse_m - fine_m))) / scale)
        check["refinement_change"] = change
        check["refinement_ok"] = change < plan.fp.refinement_tolerance
        logger.info(f"FP refinement check: max relative moment change {change:.3e}")
    return density, check


def _build_context(plan: ExperimentPlan, monitor: PerformanceMonitor, report: ConvergenceReport) -> _RunContext:
    model, params = _concrete(plan)
    reference, check = solve_reference(plan, monitor)
    report.fp_check = check
    report.reference = reference
    if check.get("refinement_ok") is False:
        report.invalid_reasons.append(
            f"FP reference failed its refinement check (moment change {check['refinement_change']:.3e})"
        )
    d = plan.model.space_dim
    mollifier = plan.noise.mollifier_for(d)
    grids, noise_fields = {}, {}
    for N in sorted({N for N, _ in plan.experiment.sizes}):
        grids[N] = grid_locations(N, d)
        noise_fields[N] = build_field(grids[N].points, plan.noise.epsilon_for(N, d), mollifier,
                                B=plan.model.orientations, block_steps=plan.noise.block_steps)
    family = plan.init.family(plan.model.orientations, d, plan.experiment.master_seed)
    key_stride = max(M for _, M in plan.experiment.sizes)
    return _RunContext(plan, model, params, family, reference, grids, noise_fields, key_stride)


def _stream(field_: CorrelatedNoiseField, dt: float, seed: int, keys: List[int], substeps: int):
    if substeps == 1:
        return IncrementStream(field_, dt, seed, column_keys=keys)
    return CoarsenedStream(IncrementStream(field_, dt / substeps, seed, column_keys=keys), substeps)


def _coupled_paths(ctx: _RunContext, N: int, M: int, replica: int, dt: float, substeps: int = 1,
                   snapshot_steps: Sequence[int] = ()) -> Tuple[np.ndarray, Dict[int, Tuple[np.ndarray, np.ndarray]]]:
    """
    Lockstep particle and McKean-Vlasov runs sharing keys

    Returns:
        (sup_t sum_beta (u - u_bar)^2 per (i, k), {step: (u, u_bar)} at snapshot steps)
    """
    grid = ctx.grids[N]
    keys = ctx.column_keys(replica, M)
    u0 = initial_activities(ctx.family, grid, keys)
    stream = _stream(ctx.fields[N], dt, ctx.plan.experiment.master_seed, keys, substeps)
    particles = ParticleStepper(ctx.model, grid, u0, stream, dt)
    mean_field = MVStepper(ctx.params, grid, u0, stream, dt, ctx.reference)
    n_steps = step_count(ctx.plan.experiment.T, dt)
    wanted = set(int(s) for s in snapshot_steps)
    sup_sq = np.zeros((N, M))
    snapshots = {}
    for n in range(n_steps + 1):
        if n in wanted:
            snapshots[n] = (particles.u.copy(), mean_field.u.copy())
        if n == n_steps:
            break
        particles.advance()
        mean_field.advance()
        np.maximum(sup_sq, np.sum((particles.u - mean_field.u) ** 2, axis=-1), out=sup_sq)
    return sup_sq, snapshots


def _aggregate_error(per_replica: Sequence[float]) -> Tuple[float, float]:
    """sqrt of the replica mean, with a delta-method standard error"""
    values = np.asarray(per_replica, dtype=float)
    mean_sq = float(values.mean())
    error = float(np.sqrt(mean_sq))
    if values.size < 2 or error == 0.0:
        return error, 0.0
    se_mean = float(values.std(ddof=1) / np.sqrt(values.size))
    return error, se_mean / (2.0 * error)


def _run_tasks(fn, tasks: Sequence[Any], workers: int) -> List[Any]:
    """Map in a thread pool; results keep the task order"""
    if workers <= 1:
        return [fn(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _checked_cells(dt_check: str, sizes: Sequence[Tuple[int, int]]) -> List[Tuple[int, int]]:
    """Cells rerun for the dt-halving check"""
    if dt_check == "largest":
        return [max(sizes, key=lambda s: (s[0] * s[1], s))]
    if dt_check == "all":
        return list(sizes)
    return []


def _relative_change(coarse: float, fine: float) -> float:
    if coarse == fine:
        return 0.0
    return abs(fine - coarse) / coarse if coarse > 0 else float("inf")


# ============================================================================
# Experiments
# ============================================================================

def run_coupled_error(plan: ExperimentPlan, workers: Optional[int] = None,
                      monitor: Optional[PerformanceMonitor] = None) -> ConvergenceReport:
    """
    Coupled particle-vs-McKean-Vlasov error for every (N, M) of the plan

    Each replica drives the particle system and the McKean-Vlasov particles
    with identical noise and initial keys, in lockstep, and records the
    sup-in-time squared difference per particle.

    Args:
        plan: Validated plan with the concrete model
        workers: Thread count (default plan.runtime.workers)
        monitor: Stage timer (default the global monitor)

    Returns:
        ConvergenceReport with one ErrorRow per (N, M); a failed dt-halving or
        FP refinement check marks the report invalid
    """
    monitor = monitor or get_performance_monitor()
    workers = workers or plan.runtime.workers
    exp = plan.experiment
    report = ConvergenceReport(kind="coupled-error", preset=plan.preset, config_hash=plan.config_hash(),
                               master_seed=exp.master_seed, tolerances=_tolerances())
    ctx = _build_context(plan, monitor, report)
    sizes = [tuple(s) for s in exp.sizes]

    def cell_errors(dt: float, substeps: int,
                    cells: Sequence[Tuple[int, int]]) -> Dict[Tuple[int, int], Tuple[float, float]]:
        tasks = [(N, M, r) for N, M in cells for r in range(exp.replicas)]

        def one(task):
            N, M, r = task
            sup_sq, _ = _coupled_paths(ctx, N, M, r, dt, substeps)
            return float(sup_sq.mean())

        values = _run_tasks(one, tasks, workers)
        out = {}
        for idx, (N, M) in enumerate(cells):
            out[(N, M)] = _aggregate_error(values[idx * exp.replicas:(idx + 1) * exp.replicas])
        return out

    with monitor.track("coupled-cells", "coupled-cell"):
        logger.info(f"Coupled error: {len(sizes)} cells x {exp.replicas} replicas, workers={workers}")
        errors = cell_errors(exp.step_size, 1, sizes)

    checked = _checked_cells(exp.dt_check, sizes)
    relative: Dict[Tuple[int, int], float] = {}
    if checked:
        with monitor.track("dt-check", "coupled-cell"):
            coarse = cell_errors(exp.step_size, 2, checked)
            fine = cell_errors(exp.step_size / 2.0, 1, checked)
        for cell in checked:
            e_c, e_f = coarse[cell][0], fine[cell][0]
            rel = _relative_change(e_c, e_f)
            relative[cell] = rel
            if rel > DT_CHECK_TOLERANCE:
                report.invalid_reasons.append(
                    f"dt-halving changed e(N={cell[0]}, M={cell[1]}) by {rel:.1%}"
                )

    for N, M in sizes:
        error, stderr = errors[(N, M)]
        report.error_rows.append(ErrorRow(N=N, M=M, error=error, stderr=stderr, replicas=exp.replicas,
                                          dt=exp.step_size, dt_check_relative=relative.get((N, M))))

    rows = [(r.N, r.M, r.error, r.stderr) for r in report.error_rows]
    _check_monotone(rows, "coupled error", report)
    _fit_rows(rows, "coupled_error", report)
    return report


def _quantile_w1(samples: np.ndarray, centers: np.ndarray, masses: np.ndarray) -> float:
    return w_sorted_1d(samples, centers, order=1, b_weights=masses)


def _law_w1(centers: np.ndarray, first: np.ndarray, second: np.ndarray) -> float:
    return w_sorted_1d(centers, centers, order=1, a_weights=first, b_weights=second)


@dataclass
class _ReferenceOnGrid:
    """Reference law seen from one particle grid, per record index"""
    owner: np.ndarray
    x_term: np.ndarray
    node_laws: List[np.ndarray] = field(default_factory=list)
    quantized: List[List[DiscreteMeasure]] = field(default_factory=list)
    resolution: List[float] = field(default_factory=list)
    quadrature: List[float] = field(default_factory=list)


def _reference_on_grid(reference: DensityEvolution, grid: SpatialGrid, times: np.ndarray) -> _ReferenceOnGrid:
    """
    Node laws, term (c) and the quantised reference law for one grid

    The reference law is pooled onto the particle cells (each FP node moves
    to the centre of its cell, cost |x_p - X_i|) and quantised with
    EXACT_ATOM_BUDGET / N atoms per cell. resolution[j] bounds the W1
    distance between that quantised law and the reference, summed over
    orientations.

    Raises:
        ValidationError: If the FP nodes do not refine the grid evenly
    """
    fp_points = reference.xgrid.points
    owner = grid.nearest_index(fp_points)
    counts = np.bincount(owner, minlength=grid.N)
    if np.any(counts != counts[0]):
        raise ValidationError(f"FP nodes (P={reference.xgrid.N}) must refine the N={grid.N} grid evenly",
                              "fp.nodes")
    x_term = np.linalg.norm(fp_points - grid.points[owner], axis=1)
    x_mean = float(x_term.mean())
    centers = reference.ucells.centers
    atoms = max(1, EXACT_ATOM_BUDGET // grid.N)
    out = _ReferenceOnGrid(owner=owner, x_term=x_term)
    for t in times:
        fp_masses = reference.marginal_masses(reference.record_index(t))
        n_orient = fp_masses.shape[1]
        laws = reference.law_at(grid.points, t)
        pooled = np.zeros((grid.N,) + fp_masses.shape[1:])
        np.add.at(pooled, owner, fp_masses)
        pooled /= counts[:, None, None]
        measures, resolution = [], 0.0
        for b in range(n_orient):
            measure = quantize_law(grid.points, centers, pooled[:, b], atoms)
            values = measure.atoms[:, -1].reshape(grid.N, atoms)
            resolution += x_mean + float(np.mean([
                _quantile_w1(values[i], centers, pooled[i, b]) for i in range(grid.N)
            ]))
            measures.append(measure)
        out.node_laws.append(laws)
        out.quantized.append(measures)
        out.resolution.append(resolution)
        out.quadrature.append(float(np.mean([
            sum(x_term[p] + _law_w1(centers, fp_masses[p, b], laws[owner[p], b]) for b in range(n_orient))
            for p in range(fp_points.shape[0])
        ])))
    return out


@dataclass
class _ReplicaSplitting:
    particle: float
    sampling: float
    total: float
    resolution: float
    pairing: float
    exact: bool
    particle_exact: Optional[TransportEstimate] = None

    @property
    def total_lower(self) -> float:
        return self.total - self.resolution


def _measured_total(grid: SpatialGrid, ref: _ReferenceOnGrid, j: int, u: np.ndarray,
                    seed: int) -> Tuple[float, float, bool]:
    """
    Product-space W1 between the particle measure and the reference law

    Both sides are quantised per cell to fit the exact solver; the returned
    resolution bounds the distance each quantisation moved its measure, so
    total - resolution <= W1(f_MN, f) <= total + resolution.

    Returns:
        (total, resolution, exact) summed over orientations
    """
    N, M, n_orient = u.shape
    atoms = min(M, max(1, EXACT_ATOM_BUDGET // N))
    total, resolution, exact = 0.0, ref.resolution[j], True
    for b in range(n_orient):
        measure = quantize_samples(grid.points, u[:, :, b], atoms)
        values = measure.atoms[:, -1].reshape(N, -1)
        if values.shape[1] < M:
            resolution += float(np.mean([w_sorted_1d(u[i, :, b], values[i]) for i in range(N)]))
        estimate = estimate_w1_product(measure, ref.quantized[j][b], grid.d, fallback="subsample",
                                       master_seed=derive_seed(seed, "orientation", b))
        total += estimate.value
        exact = exact and estimate.exact
    return total, resolution, exact


def _splitting_terms(ctx: _RunContext, grid: SpatialGrid, ref: _ReferenceOnGrid, j: int, t: float,
                     u: np.ndarray, u_bar: np.ndarray, seed: int) -> _ReplicaSplitting:
    """Terms (a), (b), the measured total and the cell-pairing bound for one replica at one record time"""
    centers = ctx.reference.ucells.centers
    fp_masses = ctx.reference.marginal_masses(ctx.reference.record_index(t))
    N, _, n_orient = u.shape
    laws = ref.node_laws[j]
    particle = float(np.mean(np.sum(np.abs(u - u_bar), axis=-1)))
    sampling = float(np.mean([
        sum(_quantile_w1(u_bar[i, :, b], centers, laws[i, b]) for b in range(n_orient))
        for i in range(N)
    ]))
    pairing = float(np.mean([
        sum(ref.x_term[p] + _quantile_w1(u[ref.owner[p], :, b], centers, fp_masses[p, b]) for b in range(n_orient))
        for p in range(fp_masses.shape[0])
    ]))
    total, resolution, exact = _measured_total(grid, ref, j, u, seed)
    return _ReplicaSplitting(particle, sampling, total, resolution, pairing, exact)


def run_empirical_measure(plan: ExperimentPlan, workers: Optional[int] = None,
                          monitor: Optional[PerformanceMonitor] = None) -> ConvergenceReport:
    """
    Three-term Wasserstein splitting of W1(f_MN, f) at every record time

    (a) particle term: W1 between particle and McKean-Vlasov empirical measures,
        bounded by the index coupling, plus an exact (subsampled) estimate;
    (b) sampling term: per-node 1-D W1 between the McKean-Vlasov samples and
        the reference law at the node, averaged over nodes;
    (c) quadrature term: W1 between the node-sampled law and the reference law,
        pairing each FP node with the column cell that contains it.
    The total is measured as an exact product-space W1 between the quantised
    particle measure and the quantised reference law. The splitting is valid
    when total - resolution <= (a) + (b) + (c) for every replica.
    For B > 1 every term is a sum over orientations of its Q x R value.

    Returns:
        ConvergenceReport with one SplittingRow per (N, M, t)
    """
    monitor = monitor or get_performance_monitor()
    workers = workers or plan.runtime.workers
    exp = plan.experiment
    report = ConvergenceReport(kind="empirical-measure", preset=plan.preset, config_hash=plan.config_hash(),
                               master_seed=exp.master_seed, tolerances=_tolerances())
    ctx = _build_context(plan, monitor, report)
    d = plan.model.space_dim
    n_orient = plan.model.orientations
    if n_orient > 1:
        report.flags.append("B > 1: every term is a sum over orientations")
    times = plan.record_times
    sizes = [tuple(s) for s in exp.sizes]
    refs = {N: _reference_on_grid(ctx.reference, grid, times) for N, grid in ctx.grids.items()}
    if any(N > EXACT_ATOM_BUDGET for N, _ in sizes):
        report.flags.append("measured total estimated on subsamples for grids above the exact budget")
    if exp.exact_subsample and any(N * M > EXACT_ATOM_BUDGET for N, M in sizes):
        logger.info(f"Product-space W1 above {EXACT_ATOM_BUDGET} atoms is estimated on subsamples")

    def measure(task: Tuple[int, int, int], dt: float, substeps: int, indices: Sequence[int],
                with_exact: bool) -> List[_ReplicaSplitting]:
        N, M, r = task
        grid = ctx.grids[N]
        steps = record_steps(times, dt, exp.T)
        _, snaps = _coupled_paths(ctx, N, M, r, dt, substeps, snapshot_steps=[steps[j] for j in indices])
        out = []
        for j in indices:
            u, u_bar = snaps[int(steps[j])]
            seed = derive_seed(exp.master_seed, "splitting", N, M, r, j)
            terms = _splitting_terms(ctx, grid, refs[N], j, float(times[j]), u, u_bar, seed)
            if with_exact:
                points = np.repeat(grid.points, M, axis=0)
                mu = DiscreteMeasure.uniform(np.hstack([points, u.reshape(N * M, n_orient)]))
                nu = DiscreteMeasure.uniform(np.hstack([points, u_bar.reshape(N * M, n_orient)]))
                seed = derive_seed(exp.master_seed, "subsample", N, M, r, j)
                terms.particle_exact = estimate_w1_product(mu, nu, d, fallback="subsample", master_seed=seed)
            out.append(terms)
        return out

    tasks = [(N, M, r) for N, M in sizes for r in range(exp.replicas)]
    every = list(range(times.size))
    with monitor.track("empirical-cells", "coupled-cell"):
        logger.info(f"Empirical measure: {len(sizes)} cells x {exp.replicas} replicas, workers={workers}")
        results = _run_tasks(lambda task: measure(task, exp.step_size, 1, every, exp.exact_subsample),
                             tasks, workers)

    relative: Dict[Tuple[int, int], float] = {}
    checked = _checked_cells(exp.dt_check, sizes)
    if checked:
        final = [times.size - 1]
        with monitor.track("dt-check", "coupled-cell"):
            for N, M in checked:
                cell_tasks = [(N, M, r) for r in range(exp.replicas)]
                coarse = _run_tasks(lambda task: measure(task, exp.step_size, 2, final, False)[0].total,
                                    cell_tasks, workers)
                fine = _run_tasks(lambda task: measure(task, exp.step_size / 2.0, 1, final, False)[0].total,
                                  cell_tasks, workers)
                rel = _relative_change(float(np.mean(coarse)), float(np.mean(fine)))
                relative[(N, M)] = rel
                if rel > DT_CHECK_TOLERANCE:
                    report.invalid_reasons.append(f"dt-halving changed the W1 total at (N={N}, M={M}) by {rel:.1%}")

    def mean_se(values: Sequence[float]) -> Tuple[float, float]:
        arr = np.asarray(values, dtype=float)
        se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        return float(arr.mean()), se

    for idx, (N, M) in enumerate(sizes):
        block = results[idx * exp.replicas:(idx + 1) * exp.replicas]
        for j, t in enumerate(times):
            entries = [rep[j] for rep in block]
            particle = mean_se([e.particle for e in entries])
            sampling = mean_se([e.sampling for e in entries])
            total = mean_se([e.total for e in entries])
            c_term = refs[N].quadrature[j]
            triangle = all(e.total_lower <= e.particle + e.sampling + c_term + TRIANGLE_SLACK for e in entries)
            exact_values = [e.particle_exact for e in entries if e.particle_exact is not None]
            exact_mean = float(np.mean([e.value for e in exact_values])) if exact_values else None
            exact_spread = float(np.max([e.spread for e in exact_values])) if exact_values else None
            if not triangle:
                report.invalid_reasons.append(f"triangle inequality violated at N={N}, M={M}, t={t:.6g}")
            report.splitting_rows.append(SplittingRow(
                N=N, M=M, t=float(t),
                particle_term=particle[0], particle_term_stderr=particle[1],
                particle_term_exact=exact_mean, particle_term_exact_spread=exact_spread,
                sampling_term=sampling[0], sampling_term_stderr=sampling[1],
                quadrature_term=c_term, total=total[0], total_stderr=total[1],
                total_resolution=float(np.mean([e.resolution for e in entries])),
                total_exact=all(e.exact for e in entries),
                pairing_bound=float(np.mean([e.pairing for e in entries])),
                replicas=exp.replicas, triangle_ok=triangle,
                dt_check_relative=relative.get((N, M)) if j == times.size - 1 else None,
            ))

    for j, t in enumerate(times):
        rows = [(r.N, r.M, r.total, r.total_stderr) for r in report.splitting_rows if r.t == float(t)]
        _check_monotone(rows, f"W1 total at t={t:.6g}", report)
    final_t = float(times[-1])
    final_rows = [(r.N, r.M, r.total, r.total_stderr) for r in report.splitting_rows if r.t == final_t]
    _fit_rows(final_rows, "w1_total", report)
    sampling_rows = [(r.N, r.M, r.sampling_term, r.sampling_term_stderr) for r in report.splitting_rows
                     if r.t == final_t]
    _fit_rows(sampling_rows, "w1_sampling", report)
    return report


def run_ou_oracle(plan: ExperimentPlan) -> OUOracleReport:
    """
    Reflected OU oracle: constant drive c, identity firing rate, no coupling

    The FP density at T and the pooled particle activities at T are compared
    with the stationary law (L1 of cell masses, 1-D W1).
    """
    model, params = _concrete(plan)
    if (params.firing_rate.name != "identity" or not params.kernels_vanish
            or params.tau.kind != "constant" or params.external_input.fourier
            or params.orientations != 1 or params.noise_amplitude <= 0):
        raise ValidationError("The OU oracle needs B=1, identity firing, no coupling, constant tau and sigma > 0",
                              "model")
    c = params.external_input.base[0]
    tau = params.tau.tau_min
    sigma = params.noise_amplitude
    exp = plan.experiment
    T = exp.T

    density, _ = solve_reference(plan, refinement=False)
    ucells = density.ucells
    oracle = reflected_ou_stationary(c, sigma, tau, ucells)
    final = density.marginal_masses(density.times.size - 1)
    l1 = float(np.max(np.sum(np.abs(final[:, 0, :] - oracle[None, :]), axis=-1)))

    N, M = exp.sizes[0]
    grid = grid_locations(N, plan.model.space_dim)
    field_ = build_field(grid.points, plan.noise.epsilon_for(N, grid.d), plan.noise.mollifier_for(grid.d),
                         B=1, block_steps=plan.noise.block_steps)
    family = plan.init.family(1, grid.d, exp.master_seed)
    result = simulate_system(model, grid, M, field_, family, T, exp.step_size, exp.master_seed, record_times=[0.0, T])
    w1 = w_sorted_1d(result.snapshots[-1].ravel(), ucells.centers, b_weights=oracle)
    logger.info(f"OU oracle: density L1 {l1:.3e}, particle W1 {w1:.3e} ({N * M} particles)")
    return OUOracleReport(density_l1=l1, particle_w1=float(w1), n_particles=N * M, T=T, density=density)


def run_noise_check(plan: ExperimentPlan) -> NoiseStatisticsReport:
    """Empirical statistics of the noise field on the plan's check grid"""
    exp = plan.experiment
    d = plan.model.space_dim
    grid = grid_locations(exp.noise_check_nodes, d)
    field_ = build_field(grid.points, exp.noise_check_epsilon, plan.noise.mollifier_for(d),
                         B=plan.model.orientations, block_steps=plan.noise.block_steps)
    return verify_statistics(field_, exp.noise_check_dt, exp.noise_check_samples, exp.master_seed)


@dataclass
class SimulationSummary:
    result: SimulationResult
    regularity: Dict[str, Any]
    N: int
    M: int


def run_simulation(plan: ExperimentPlan, regularity_samples: int = 2000) -> SimulationSummary:
    """Single particle-system run at the plan's first (N, M) with a regularity report of the model"""
    exp = plan.experiment
    model = plan.build_model()
    report = estimate_regularity_constants(model, regularity_samples, exp.master_seed)
    N, M = exp.sizes[0]
    d = plan.model.space_dim
    grid = grid_locations(N, d)
    field_ = build_field(grid.points, plan.noise.epsilon_for(N, d), plan.noise.mollifier_for(d),
                         B=plan.model.orientations, block_steps=plan.noise.block_steps)
    family = plan.init.family(plan.model.orientations, d, exp.master_seed)
    result = simulate_system(model, grid, M, field_, family, exp.T, exp.step_size, exp.master_seed,
                             record_times=plan.record_times)
    return SimulationSummary(result=result, regularity=report.to_dict(), N=N, M=M)
