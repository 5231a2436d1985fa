"""
Mean-field limit of the concrete network

Two representations of the limit law:
- a conservative finite-volume solver for the nonlinear Fokker-Planck system
  on the per-orientation marginals (and, for B = 2, on the joint density);
- McKean-Vlasov particles driven by the solved law's moment field, consuming
  the same keyed noise and initial data as the particle system.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import stats

from src.errors import CFLViolationError, MassDriftError, NumericalError, ValidationError
from src.model import ConcreteDynamics, GridCellParams, ModelSpec
from src.noise import CorrelatedNoiseField, IncrementStream
from src.particles import (
    HolderFieldFamily,
    ReflectedStepper,
    SimulationResult,
    SpatialGrid,
    default_record_times,
    initial_activities,
    record_steps,
    run_recorded,
    step_count,
)

logger = logging.getLogger(__name__)

MASS_DRIFT_LIMIT = 1e-10
NEGATIVE_MASS_LIMIT = -1e-14
CFL_SAFETY = 0.5
DEFAULT_DT_FRACTION = 0.45
PICARD_TOL = 1e-10
PICARD_MAX_ITER = 50


# ============================================================================
# Meshes and density containers
# ============================================================================

@dataclass(frozen=True)
class UCellMesh:
    """Uniform cells on [0, u_max]"""
    u_max: float
    n_cells: int

    def validate(self) -> None:
        if self.u_max <= 0:
            raise ValidationError("u_max must be positive", "u_max")
        if self.n_cells < 2:
            raise ValidationError("Need at least two u-cells", "n_u")

    @property
    def width(self) -> float:
        return self.u_max / self.n_cells

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, self.u_max, self.n_cells + 1)

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.width

    def refined(self, factor: int = 2) -> "UCellMesh":
        return UCellMesh(self.u_max, self.n_cells * factor)


@dataclass
class DensityEvolution:
    """
    Fokker-Planck solution on an x-grid times a u-cell mesh

    masses[r, p, beta, j]: marginal cell masses at record r (marginal form)
    joint[r, p, a, b]: joint cell masses at record r (B = 2 joint form)
    moments[s, p, beta]: first moments after every PDE step, at moment_times[s]
    """
    xgrid: SpatialGrid
    ucells: UCellMesh
    times: np.ndarray
    moment_times: np.ndarray
    moments: np.ndarray
    dt: float
    masses: Optional[np.ndarray] = None
    joint: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def form(self) -> str:
        return "joint" if self.joint is not None else "marginal"

    @property
    def orientations(self) -> int:
        return self.moments.shape[2]

    def record_index(self, t: float) -> int:
        hits = np.nonzero(np.abs(self.times - t) <= 1e-12 * max(1.0, abs(t)))[0]
        if hits.size == 0:
            raise ValidationError(f"t={t} is not a recorded time of this density", "t")
        return int(hits[0])

    def marginal_masses(self, index: int) -> np.ndarray:
        """(P, B, n_u) marginal masses at record index"""
        if self.masses is not None:
            return self.masses[index]
        joint = self.joint[index]
        return np.stack([joint.sum(axis=2), joint.sum(axis=1)], axis=1)

    def moments_at(self, t: float) -> np.ndarray:
        """Moment field (P, B) linearly interpolated in time"""
        times = self.moment_times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-9 * max(1.0, times[-1]):
            raise ValidationError(f"t={t} outside the solved interval [{times[0]}, {times[-1]}]", "t")
        pos = np.searchsorted(times, t)
        if pos < times.size and abs(times[pos] - t) <= 1e-12 * max(1.0, t):
            return self.moments[pos]
        pos = int(np.clip(pos, 1, times.size - 1))
        t0, t1 = times[pos - 1], times[pos]
        w = (t - t0) / (t1 - t0)
        return (1.0 - w) * self.moments[pos - 1] + w * self.moments[pos]

    def law_at(self, points: np.ndarray, t: float) -> np.ndarray:
        """
        Marginal masses (n, B, n_u) at arbitrary points of Q

        Linear interpolation between FP nodes for d = 1, nearest node otherwise.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        masses = self.marginal_masses(self.record_index(t))
        if self.xgrid.d == 1:
            nodes = self.xgrid.points[:, 0]
            x = np.clip(points[:, 0], nodes[0], nodes[-1])
            right = np.clip(np.searchsorted(nodes, x), 1, nodes.size - 1) if nodes.size > 1 else np.zeros(x.size, dtype=int)
            if nodes.size == 1:
                return masses[right]
            left = right - 1
            w = ((x - nodes[left]) / (nodes[right] - nodes[left]))[:, None, None]
            return (1.0 - w) * masses[left] + w * masses[right]
        return masses[self.xgrid.nearest_index(points)]


def moment_field(density: DensityEvolution, t: float) -> np.ndarray:
    """
    First moments m^beta(x_p) at a recorded time

    Args:
        density: Solved evolution
        t: A recorded time

    Returns:
        (P, B) array of sum_cells centre * mass

    Raises:
        ValidationError: If t was not recorded
    """
    masses = density.marginal_masses(density.record_index(t))
    return masses @ density.ucells.centers


# ============================================================================
# Initial and analytic densities
# ============================================================================

def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(y > 0, y + np.log(-np.expm1(-np.maximum(y, 1e-300))), -np.inf)


def _cell_of(value: float, ucells: UCellMesh) -> int:
    return int(np.clip(np.floor(value / ucells.width), 0, ucells.n_cells - 1))


def initial_density(init: HolderFieldFamily, xgrid: SpatialGrid, ucells: UCellMesh) -> np.ndarray:
    """
    Exact cell masses (P, B, n_u) of the initial field's law at each node

    At fixed x the field is softplus of N(g(x), s^2) with the family's
    profile g and pointwise std s; mass beyond u_max is kept in the last cell.
    """
    ucells.validate()
    init.validate()
    profile = init.profile(xgrid.points)
    std = init.pointwise_std
    n_nodes, n_orient = profile.shape
    masses = np.zeros((n_nodes, n_orient, ucells.n_cells))
    if std == 0.0:
        values = np.logaddexp(0.0, profile)
        for p in range(n_nodes):
            for beta in range(n_orient):
                masses[p, beta, _cell_of(values[p, beta], ucells)] = 1.0
        return masses
    cut = _inverse_softplus(ucells.edges)
    z = (cut[None, None, :] - profile[:, :, None]) / std
    cdf = stats.norm.cdf(z)
    masses = np.diff(cdf, axis=-1)
    masses[..., -1] += stats.norm.sf(z[..., -1])
    masses = np.maximum(masses, 0.0)
    return masses / masses.sum(axis=-1, keepdims=True)


def point_mass_density(value: float, xgrid: SpatialGrid, ucells: UCellMesh, orientations: int = 1) -> np.ndarray:
    masses = np.zeros((xgrid.N, orientations, ucells.n_cells))
    masses[:, :, _cell_of(value, ucells)] = 1.0
    return masses


def reflected_ou_stationary(c: float, sigma: float, tau: float, ucells: UCellMesh) -> np.ndarray:
    """
    Stationary law of du = (-u + c)/tau dt + (sigma/tau) dW reflected at 0

    Args:
        c: Constant input
        sigma: Noise amplitude (> 0)
        tau: Relaxation time
        ucells: Cell mesh

    Returns:
        Cell masses of the Gaussian N(c, sigma^2/(2 tau)) restricted to [0, u_max], normalised
    """
    if sigma <= 0:
        raise ValidationError("sigma must be positive", "sigma")
    if tau <= 0:
        raise ValidationError("tau must be positive", "tau")
    scale = sigma / np.sqrt(2.0 * tau)
    edges = (ucells.edges - c) / scale
    lower, upper = edges[:-1], edges[1:]
    right_tail = lower > 0
    masses = np.where(right_tail,
                      stats.norm.sf(lower) - stats.norm.sf(upper),
                      stats.norm.cdf(upper) - stats.norm.cdf(lower))
    return masses / masses.sum()


# ============================================================================
# Finite-volume stepping
# ============================================================================

def _concrete_params(model: Union[ModelSpec, GridCellParams]) -> GridCellParams:
    params = model.concrete if isinstance(model, ModelSpec) else model
    if params is None:
        raise ValidationError("The Fokker-Planck solver needs the concrete grid-cell model", "model")
    params.validate()
    return params


def _phi_bound(params: GridCellParams, u_max: float) -> float:
    z_bound = params.external_input.sup_norm + max(k.sup_norm for k in params.kernels) * u_max
    return z_bound + np.log(2.0)


def default_pde_dt(params: GridCellParams, ucells: UCellMesh, T: float, steps_multiple: int = 1) -> float:
    """Stable step from analytic velocity bounds, adjusted so T/dt is a multiple of steps_multiple"""
    h = ucells.width
    tau_min = params.tau.tau_min
    v_bound = (ucells.u_max + _phi_bound(params, ucells.u_max)) / tau_min
    limits = [h / v_bound]
    diffusion = params.noise_amplitude ** 2 / (2.0 * tau_min ** 2)
    if diffusion > 0:
        limits.append(h * h / (2.0 * diffusion))
    dt = DEFAULT_DT_FRACTION * min(limits)
    n_steps = int(np.ceil(T / dt))
    n_steps = int(np.ceil(n_steps / steps_multiple) * steps_multiple)
    return T / n_steps


class _FluxOperator:
    """Conservative finite-volume update for densities along one u-axis"""

    def __init__(self, dynamics: ConcreteDynamics, ucells: UCellMesh, advection: str, check_cfl: bool):
        if advection not in ("hybrid", "upwind"):
            raise ValidationError(f"Unknown advection scheme '{advection}'", "advection")
        self.dynamics = dynamics
        self.h = ucells.width
        self.faces = ucells.edges[1:-1]
        self.advection = advection
        self.check_cfl = check_cfl
        self.diffusion = 0.5 * dynamics.diffusion ** 2

    def velocities(self, z: np.ndarray) -> np.ndarray:
        """Face velocities (P, B, n_u - 1) for interaction arguments z (P, B)"""
        phi = self.dynamics.params.firing_rate(z)
        return (-self.faces[None, None, :] + phi[:, :, None]) * self.dynamics.inv_tau[:, :, None]

    def stable_dt(self, vel: np.ndarray, diffusion: Optional[np.ndarray] = None):
        """Largest admissible step per (node, orientation) and the limiting cell"""
        diffusion = self.diffusion if diffusion is None else diffusion
        vmax = np.max(np.abs(vel), axis=-1)
        with np.errstate(divide="ignore"):
            adv = np.where(vmax > 0, self.h / vmax, np.inf)
            dif = np.where(diffusion > 0, self.h * self.h / (2.0 * diffusion), np.inf)
        limit = CFL_SAFETY * np.minimum(adv, dif)
        cell = np.unravel_index(int(np.argmin(limit)), limit.shape)
        return float(limit[cell]), cell, vmax

    def fluxes(self, mass: np.ndarray, vel: np.ndarray, diffusion: np.ndarray) -> np.ndarray:
        """Face fluxes along the last axis, zero at u = 0 and u = u_max"""
        h = self.h
        left, right = mass[..., :-1], mass[..., 1:]
        upwind = np.where(vel > 0, left, right)
        if self.advection == "hybrid":
            central = 0.5 * (left + right)
            advected = np.where(np.abs(vel) * h <= 2.0 * diffusion, central, upwind)
        else:
            advected = upwind
        interior = vel * advected / h - diffusion * (right - left) / (h * h)
        pad = [(0, 0)] * (mass.ndim - 1) + [(1, 1)]
        return np.pad(interior, pad)

    def apply(self, mass: np.ndarray, vel: np.ndarray, diffusion: np.ndarray, dt: float) -> np.ndarray:
        flux = self.fluxes(mass, vel, diffusion)
        return mass - dt * (flux[..., 1:] - flux[..., :-1])


def _settle(mass: np.ndarray, previous_total: np.ndarray, step: int) -> np.ndarray:
    """Positivity and conservation guards after one update"""
    lowest = float(mass.min())
    if lowest < NEGATIVE_MASS_LIMIT:
        raise NumericalError(f"Negative cell mass {lowest:.3e} at PDE step {step}")
    mass = np.maximum(mass, 0.0)
    total = mass.sum(axis=tuple(range(previous_total.ndim, mass.ndim)))
    drift = np.max(np.abs(total - previous_total))
    if drift > MASS_DRIFT_LIMIT:
        raise MassDriftError(f"Mass drift {drift:.3e} at PDE step {step}")
    return mass


class _MarginalSolver:
    def __init__(self, params: GridCellParams, xgrid: SpatialGrid, ucells: UCellMesh,
                 dt: float, advection: str, check_cfl: bool):
        self.dynamics = ConcreteDynamics(params, xgrid.points)
        self.op = _FluxOperator(self.dynamics, ucells, advection, check_cfl)
        self.centers = ucells.centers
        self.dt = dt

    def moments(self, mass: np.ndarray) -> np.ndarray:
        return mass @ self.centers

    def step(self, mass: np.ndarray, t: float, moments: np.ndarray, step: int) -> np.ndarray:
        vel = self.op.velocities(self.dynamics.interaction(t, moments))
        if self.op.check_cfl:
            limit, cell, _ = self.op.stable_dt(vel)
            if self.dt > limit * (1.0 + 1e-12):
                raise CFLViolationError(self.dt, limit, tuple(int(c) for c in cell))
        before = mass.sum(axis=-1)
        updated = self.op.apply(mass, vel, self.op.diffusion[:, :, None], self.dt)
        return _settle(updated, before, step)


def _validate_grid_shapes(params: GridCellParams, xgrid: SpatialGrid, ucells: UCellMesh, T: float) -> None:
    ucells.validate()
    if xgrid.d != params.space_dim:
        raise ValidationError("x-grid dimension does not match the model", "space_dim")
    if T <= 0:
        raise ValidationError("T must be positive", "T")


def solve_marginal_fp(model: Union[ModelSpec, GridCellParams], xgrid: SpatialGrid, ucells: UCellMesh,
                      f0: np.ndarray, T: float, dt_pde: Optional[float] = None,
                      record_times: Optional[Sequence[float]] = None, advection: str = "upwind",
                      coupling: str = "explicit", check_cfl: bool = True) -> DensityEvolution:
    """
    Solve the marginal nonlinear Fokker-Planck system

    Each (x-node, orientation) density moves with velocity
    (-u + phi(B(x,t) + (1/B) sum_gamma (1/P) sum_q K^gamma(x - x_q) m^gamma(x_q, t))) / tau(x)
    and diffuses with sigma^2 / (2 tau^2); fluxes vanish at u = 0 and u = u_max.

    Args:
        model: Concrete model (ModelSpec or GridCellParams)
        xgrid: P nodes of the x-quadrature
        ucells: u-cell mesh
        f0: Initial masses (P, B, n_u)
        T: Horizon
        dt_pde: Time step (default from analytic velocity bounds)
        record_times: Instants to keep full densities (default 33 equispaced)
        advection: 'upwind' (default) or 'hybrid' (central where cell Peclet <= 2)
        coupling: 'explicit' (moments lagged one step) or 'picard' (midpoint moments, iterated per record window)
        check_cfl: Verify the stability bound every step

    Returns:
        DensityEvolution in marginal form

    Raises:
        CFLViolationError: If dt_pde exceeds the stability bound somewhere
        MassDriftError: If a step changes total mass by more than 1e-10
    """
    params = _concrete_params(model)
    _validate_grid_shapes(params, xgrid, ucells, T)
    f0 = np.asarray(f0, dtype=float)
    expected = (xgrid.N, params.orientations, ucells.n_cells)
    if f0.shape != expected:
        raise ValidationError(f"Initial density must have shape {expected}, got {f0.shape}", "f0")
    if np.any(f0 < 0) or np.max(np.abs(f0.sum(axis=-1) - 1.0)) > 1e-12:
        raise ValidationError("Initial densities must be nonnegative with unit mass", "f0")
    if coupling not in ("explicit", "picard"):
        raise ValidationError(f"Unknown coupling mode '{coupling}'", "coupling")

    if record_times is None:
        record_times = default_record_times(T)
        if dt_pde is None:
            dt_pde = default_pde_dt(params, ucells, T, steps_multiple=len(record_times) - 1)
    elif dt_pde is None:
        dt_pde = default_pde_dt(params, ucells, T)
    n_steps = step_count(T, dt_pde)
    rec_steps = record_steps(record_times, dt_pde, T)

    solver = _MarginalSolver(params, xgrid, ucells, dt_pde, advection, check_cfl)
    logger.info(
        f"Solving marginal FP: P={xgrid.N}, B={params.orientations}, n_u={ucells.n_cells}, "
        f"dt={dt_pde:.3e}, steps={n_steps}, coupling={coupling}"
    )

    mass = f0.copy()
    moments = np.empty((n_steps + 1, xgrid.N, params.orientations))
    moments[0] = solver.moments(mass)
    records = {0: mass.copy()} if 0 in set(rec_steps) else {}
    window_ends = sorted(set(int(s) for s in rec_steps) | {n_steps})
    picard_iterations: List[int] = []

    start = 0
    for end in window_ends:
        if end == start:
            continue
        if coupling == "explicit":
            for n in range(start, end):
                mass = solver.step(mass, n * dt_pde, moments[n], n)
                moments[n + 1] = solver.moments(mass)
        else:
            mass, iters = _picard_window(solver, mass, moments, start, end, dt_pde)
            picard_iterations.append(iters)
        records[end] = mass.copy()
        start = end

    masses = np.stack([records[int(s)] for s in rec_steps])
    return DensityEvolution(
        xgrid=xgrid,
        ucells=ucells,
        times=rec_steps * dt_pde,
        moment_times=np.arange(n_steps + 1) * dt_pde,
        moments=moments,
        dt=dt_pde,
        masses=masses,
        diagnostics={"advection": advection, "coupling": coupling, "picard_iterations": picard_iterations},
    )


def _picard_window(solver: _MarginalSolver, mass_start: np.ndarray, moments: np.ndarray,
                   start: int, end: int, dt: float):
    """Iterate a record window with midpoint moments until the moment path settles"""
    mass = mass_start
    for n in range(start, end):
        mass = solver.step(mass, n * dt, moments[n], n)
        moments[n + 1] = solver.moments(mass)
    for iteration in range(1, PICARD_MAX_ITER + 1):
        guess = moments[start:end + 1].copy()
        mass = mass_start
        for n in range(start, end):
            midpoint = 0.5 * (guess[n - start] + guess[n - start + 1])
            mass = solver.step(mass, (n + 0.5) * dt, midpoint, n)
            moments[n + 1] = solver.moments(mass)
        change = float(np.max(np.abs(moments[start:end + 1] - guess)))
        if change < PICARD_TOL:
            return mass, iteration
    logger.warning(f"Picard iteration did not settle on steps {start}..{end} (last change {change:.3e})")
    return mass, PICARD_MAX_ITER


def solve_joint_fp_small(model: Union[ModelSpec, GridCellParams], xgrid: SpatialGrid, ucells: UCellMesh,
                         f0: np.ndarray, T: float, dt_pde: Optional[float] = None,
                         record_times: Optional[Sequence[float]] = None, advection: str = "upwind",
                         check_cfl: bool = True) -> DensityEvolution:
    """
    Joint Fokker-Planck solve for B = 2 by dimension splitting

    Each step sweeps the orientation-1 axis, refreshes the moment field from the
    updated joint masses, then sweeps the orientation-2 axis.

    Args:
        f0: Product-form initial masses (P, B, n_u); the joint is their outer product per node

    Returns:
        DensityEvolution in joint form
    """
    params = _concrete_params(model)
    if params.orientations != 2:
        raise ValidationError("The joint solver supports B = 2 only", "orientations")
    _validate_grid_shapes(params, xgrid, ucells, T)
    f0 = np.asarray(f0, dtype=float)
    if f0.shape != (xgrid.N, 2, ucells.n_cells):
        raise ValidationError("Joint solver expects product-form marginals of shape (P, 2, n_u)", "f0")

    if record_times is None:
        record_times = default_record_times(T)
        if dt_pde is None:
            dt_pde = default_pde_dt(params, ucells, T, steps_multiple=len(record_times) - 1)
    elif dt_pde is None:
        dt_pde = default_pde_dt(params, ucells, T)
    n_steps = step_count(T, dt_pde)
    rec_steps = record_steps(record_times, dt_pde, T)

    dynamics = ConcreteDynamics(params, xgrid.points)
    op = _FluxOperator(dynamics, ucells, advection, check_cfl)
    centers = ucells.centers

    def joint_moments(joint):
        return np.stack([joint.sum(axis=2) @ centers, joint.sum(axis=1) @ centers], axis=1)

    joint = f0[:, 0, :, None] * f0[:, 1, None, :]
    moments = np.empty((n_steps + 1, xgrid.N, 2))
    moments[0] = joint_moments(joint)
    records = {}
    wanted = set(int(s) for s in rec_steps)
    if 0 in wanted:
        records[0] = joint.copy()

    logger.info(f"Solving joint FP (B=2): P={xgrid.N}, n_u={ucells.n_cells}, dt={dt_pde:.3e}, steps={n_steps}")
    for n in range(n_steps):
        t = n * dt_pde
        current = moments[n]
        for beta in (0, 1):
            vel = op.velocities(dynamics.interaction(t, current))[:, beta, :]
            if check_cfl:
                limit, cell, _ = op.stable_dt(vel[:, None, :], op.diffusion[:, beta][:, None])
                if dt_pde > limit * (1.0 + 1e-12):
                    raise CFLViolationError(dt_pde, limit, (int(cell[0]), beta))
            diff = op.diffusion[:, beta][:, None, None]
            before = joint.reshape(xgrid.N, -1).sum(axis=1)
            if beta == 0:
                moved = np.swapaxes(op.apply(np.swapaxes(joint, 1, 2), vel[:, None, :], diff, dt_pde), 1, 2)
            else:
                moved = op.apply(joint, vel[:, None, :], diff, dt_pde)
            joint = _settle(moved, before, n)
            current = joint_moments(joint)
        moments[n + 1] = current
        if n + 1 in wanted:
            records[n + 1] = joint.copy()

    return DensityEvolution(
        xgrid=xgrid,
        ucells=ucells,
        times=rec_steps * dt_pde,
        moment_times=np.arange(n_steps + 1) * dt_pde,
        moments=moments,
        dt=dt_pde,
        joint=np.stack([records[int(s)] for s in rec_steps]),
        diagnostics={"advection": advection, "coupling": "split"},
    )


def product_gap(joint: DensityEvolution, marginal: DensityEvolution) -> float:
    """sup |joint - f^1 (x) f^2| over records and nodes"""
    if joint.joint is None or marginal.masses is None:
        raise ValidationError("product_gap needs a joint and a marginal evolution")
    outer = marginal.masses[:, :, 0, :, None] * marginal.masses[:, :, 1, None, :]
    return float(np.max(np.abs(joint.joint - outer)))


# ============================================================================
# McKean-Vlasov particles
# ============================================================================

class MVStepper(ReflectedStepper):
    """
    McKean-Vlasov particles at the grid nodes

    The interaction is the reference law's moment field integrated by the
    same x-quadrature the Fokker-Planck solver uses, evaluated exactly at
    each particle node and linearly interpolated in time.
    """

    def __init__(self, params: GridCellParams, grid: SpatialGrid, u0: np.ndarray, increments: IncrementStream,
                 dt: float, reference: DensityEvolution):
        super().__init__(grid, u0, increments, dt)
        if reference.xgrid.d != grid.d or reference.orientations != params.orientations:
            raise ValidationError("Reference density does not match the particle grid")
        self.reference = reference
        self.dynamics = ConcreteDynamics(params, grid.points, sources=reference.xgrid.points)

    def coefficients(self, t: float):
        z = self.dynamics.interaction(t, self.reference.moments_at(t))
        return self.dynamics.drift(self.u, z), self.dynamics.diffusion_for(self.u)


@dataclass
class CoupledMVEnsemble:
    """McKean-Vlasov run paired (same keys) with a particle-system run"""
    result: SimulationResult
    reference: DensityEvolution


def simulate_coupled_mv(model: Union[ModelSpec, GridCellParams], grid: SpatialGrid, M: int,
                        noise: CorrelatedNoiseField, init: HolderFieldFamily, reference: DensityEvolution,
                        T: float, dt: float, master_seed: int,
                        record_times: Optional[Sequence[float]] = None,
                        column_keys: Optional[Sequence[int]] = None) -> CoupledMVEnsemble:
    """
    Simulate McKean-Vlasov particles against a solved reference law

    Args:
        model: Concrete model
        grid: Particle nodes (N)
        M: Particles per node
        noise: Field on grid.points (same as the paired particle run)
        init: Initial field family (same as the paired run)
        reference: Fokker-Planck solution covering [0, T]
        T, dt: Horizon and step
        master_seed: Noise seed (same as the paired run)

    Returns:
        CoupledMVEnsemble
    """
    params = _concrete_params(model)
    if reference.moment_times[-1] < T * (1 - 1e-12):
        raise ValidationError("Reference density does not cover [0, T]", "reference")
    keys = list(range(M)) if column_keys is None else [int(key) for key in column_keys]
    u0 = initial_activities(init, grid, keys)
    stream = IncrementStream(noise, dt, master_seed, column_keys=keys)
    stepper = MVStepper(params, grid, u0, stream, dt, reference)
    logger.info(f"Simulating McKean-Vlasov particles N={grid.N}, M={M}, T={T}, dt={dt}")
    return CoupledMVEnsemble(run_recorded(stepper, T, record_times), reference)
