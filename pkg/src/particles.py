"""
Interacting particle system on a spatial grid

N columns sit at the centres of an equispaced partition of Q = [0,1]^d, each
holding M neurons with B orientations. The state of the whole network is a
struct-of-arrays (N, M, B) block advanced by the reflected Euler scheme.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.errors import NonFiniteValueError, SimulationError, ValidationError
from src.model import ConcreteDynamics, MeasureView, ModelSpec, eval_diffusion_batch, eval_drift_batch
from src.noise import CorrelatedNoiseField, IncrementStream
from src.sde import reflect_arrays
from src.streams import keyed_generator

logger = logging.getLogger(__name__)

DEFAULT_RECORD_COUNT = 32


# ============================================================================
# Grid
# ============================================================================

@dataclass(frozen=True)
class SpatialGrid:
    """Cell centres of the uniform partition of [0,1]^d into N cubes"""
    N: int
    d: int
    per_axis: int
    points: np.ndarray = field(repr=False, compare=False)

    @property
    def spacing(self) -> float:
        return 1.0 / self.per_axis

    @property
    def cell_measure(self) -> float:
        return 1.0 / self.N

    @property
    def cell_diameter(self) -> float:
        return float(np.sqrt(self.d) / self.per_axis)

    def nearest_index(self, x: np.ndarray) -> np.ndarray:
        """Index of the cell containing each point of x (n, d)"""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.clip(np.floor(x * self.per_axis).astype(int), 0, self.per_axis - 1)
        return np.ravel_multi_index(tuple(idx.T), (self.per_axis,) * self.d)


def perfect_root(N: int, d: int) -> Optional[int]:
    """m with m^d == N, or None"""
    if N < 1 or d < 1:
        return None
    guess = int(round(N ** (1.0 / d)))
    for m in (guess - 1, guess, guess + 1):
        if m >= 1 and m ** d == N:
            return m
    return None


def grid_locations(N: int, d: int) -> SpatialGrid:
    """
    Grid of N cell centres in [0,1]^d

    Args:
        N: Number of columns, must equal m^d
        d: Space dimension

    Returns:
        SpatialGrid with points ((i_1 + 1/2)/m, ..., (i_d + 1/2)/m) in lexicographic order

    Raises:
        ValidationError: If N is not a perfect d-th power
    """
    m = perfect_root(N, d)
    if m is None:
        raise ValidationError(f"N must be a perfect d-th power (N={N}, d={d})", "N")
    axis = (np.arange(m) + 0.5) / m
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    points = np.stack([g.ravel() for g in mesh], axis=1)
    return SpatialGrid(N=N, d=d, per_axis=m, points=points)


# ============================================================================
# Initial data
# ============================================================================

def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


@dataclass
class _SpectralModes:
    """Rayleigh amplitudes, uniform phases and unit directions per orientation"""
    xi: np.ndarray
    theta: np.ndarray
    directions: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, orientations: int, n_modes: int, space_dim: int) -> "_SpectralModes":
        xi = rng.rayleigh(1.0, size=(orientations, n_modes))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=(orientations, n_modes))
        directions = rng.normal(size=(orientations, n_modes, space_dim))
        norms = np.linalg.norm(directions, axis=-1, keepdims=True)
        directions = directions / np.where(norms > 0, norms, 1.0)
        return cls(xi, theta, directions)

    def evaluate(self, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """sum_j w_j xi_j cos(2 pi j <d_j, x> + theta_j) -> (n, B)"""
        n_modes = weights.shape[0]
        out = np.zeros((x.shape[0], self.xi.shape[0]))
        if n_modes == 0:
            return out
        freqs = 2.0 * np.pi * np.arange(1, n_modes + 1)
        for beta in range(self.xi.shape[0]):
            proj = x @ self.directions[beta].T
            out[:, beta] = np.cos(proj * freqs[None, :] + self.theta[beta][None, :]) @ (weights * self.xi[beta])
        return out

    def seminorm(self, weights: np.ndarray, alpha: float) -> float:
        """Holder-alpha bound of evaluate(), Euclidean over orientations"""
        if weights.shape[0] == 0:
            return 0.0
        j = np.arange(1, weights.shape[0] + 1)
        per_mode = weights * 2.0 ** (1.0 - alpha) * (2.0 * np.pi * j) ** alpha
        per_orientation = self.xi @ per_mode
        return float(np.linalg.norm(per_orientation))


@dataclass
class HolderField:
    """
    Random alpha-Holder initial activity field x -> R^B_+

    u(x) = softplus(g(x) + amplitude * sum_j xi_j j^-(alpha+1/2) cos(2 pi j <w_j, x> + theta_j))

    The random modes are drawn from the stream (seed, "init", k); the optional
    profile g is shared by every k and drawn from (seed, "init-profile").
    """
    alpha: float
    orientations: int
    space_dim: int
    n_modes: int
    amplitude: float
    profile_amplitude: float
    key: int
    modes: _SpectralModes = field(repr=False)
    profile_modes: _SpectralModes = field(repr=False)

    @property
    def mode_weights(self) -> np.ndarray:
        j = np.arange(1, self.n_modes + 1, dtype=float)
        return j ** (-(self.alpha + 0.5))

    def profile(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.profile_amplitude * self.profile_modes.evaluate(x, self.mode_weights)

    def pre_activation(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.profile(x) + self.amplitude * self.modes.evaluate(x, self.mode_weights)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return _softplus(self.pre_activation(x))

    @property
    def declared_seminorm(self) -> float:
        weights = self.mode_weights
        return (self.amplitude * self.modes.seminorm(weights, self.alpha)
                + self.profile_amplitude * self.profile_modes.seminorm(weights, self.alpha))


@dataclass(frozen=True)
class HolderFieldFamily:
    """I.i.d. (in k) family of Holder initial fields sharing one seed"""
    alpha: float = 1.0
    orientations: int = 1
    space_dim: int = 1
    n_modes: int = 64
    amplitude: float = 0.5
    profile_amplitude: float = 0.0
    master_seed: int = 0

    def validate(self) -> None:
        if not (0 < self.alpha <= 1):
            raise ValidationError("alpha must lie in (0, 1]", "alpha")
        if self.n_modes < 0:
            raise ValidationError("n_modes cannot be negative", "n_modes")
        if self.amplitude < 0 or self.profile_amplitude < 0:
            raise ValidationError("Initial field amplitudes cannot be negative", "amplitude")

    def field(self, k: int) -> HolderField:
        return holder_initial_field(self.alpha, self.orientations, self.n_modes, self.amplitude,
                                    self.master_seed, k, space_dim=self.space_dim,
                                    profile_amplitude=self.profile_amplitude)

    @property
    def pointwise_std(self) -> float:
        """Standard deviation of the Gaussian pre-activation at any fixed x"""
        if self.n_modes == 0:
            return 0.0
        j = np.arange(1, self.n_modes + 1, dtype=float)
        return float(self.amplitude * np.sqrt(np.sum(j ** (-(2.0 * self.alpha + 1.0)))))

    def profile(self, x: np.ndarray) -> np.ndarray:
        """Deterministic mean of the pre-activation -> (n, B)"""
        return self.field(0).profile(x)

    def values(self, points: np.ndarray, column_keys: Sequence[int]) -> np.ndarray:
        """Initial activities (N, M, B) for columns with the given stream keys"""
        points = np.atleast_2d(points)
        out = np.empty((points.shape[0], len(column_keys), self.orientations))
        for col, key in enumerate(column_keys):
            out[:, col, :] = self.field(key)(points)
        return out


def holder_initial_field(alpha: float, B: int, n_modes: int, amplitude: float, master_seed: int, k: int,
                         space_dim: int = 1, profile_amplitude: float = 0.0) -> HolderField:
    """
    Spectral alpha-Holder field for column k

    Args:
        alpha: Holder exponent in (0, 1]
        B: Orientations
        n_modes: Number of Fourier modes (0 gives the constant log 2)
        amplitude: Scale of the random part
        master_seed: Run seed
        k: Column key
        space_dim: Dimension of Q
        profile_amplitude: Scale of the k-independent profile

    Returns:
        HolderField
    """
    if not (0 < alpha <= 1):
        raise ValidationError("alpha must lie in (0, 1]", "alpha")
    if n_modes < 0:
        raise ValidationError("n_modes cannot be negative", "n_modes")
    modes = _SpectralModes.draw(keyed_generator(master_seed, "init", k), B, n_modes, space_dim)
    profile_modes = _SpectralModes.draw(keyed_generator(master_seed, "init-profile"), B, n_modes, space_dim)
    return HolderField(alpha=alpha, orientations=B, space_dim=space_dim, n_modes=n_modes,
                       amplitude=amplitude, profile_amplitude=profile_amplitude, key=int(k),
                       modes=modes, profile_modes=profile_modes)


# ============================================================================
# Ensembles and measures
# ============================================================================

class EmpiricalMeasure(MeasureView):
    """Uniform atoms (X_i, u_ik) on Q x R^B at one instant"""

    def __init__(self, points: np.ndarray, values: np.ndarray, t: float = 0.0):
        super().__init__(points, values)
        self.t = float(t)


@dataclass
class ParticleEnsemble:
    """Struct-of-arrays state of the N x M x B network"""
    grid: SpatialGrid
    u: np.ndarray
    ell_tv: np.ndarray
    t: float = 0.0
    step: int = 0
    column_keys: List[int] = field(default_factory=list)

    @property
    def ell(self) -> np.ndarray:
        return -self.ell_tv


def empirical_measure(ensemble: ParticleEnsemble) -> EmpiricalMeasure:
    """N*M uniform atoms at (X_i, u_ik(t)); atom i*M + k"""
    n, m, b = ensemble.u.shape
    points = np.repeat(ensemble.grid.points, m, axis=0)
    return EmpiricalMeasure(points, ensemble.u.reshape(n * m, b), t=ensemble.t)


class ReflectedStepper(ABC):
    """Lockstep reflected Euler driver over an (N, M, B) block"""

    def __init__(self, grid: SpatialGrid, u0: np.ndarray, increments: IncrementStream, dt: float):
        u0 = np.asarray(u0, dtype=float)
        if u0.ndim != 3 or u0.shape[0] != grid.N:
            raise ValidationError("Initial activities must have shape (N, M, B)", "u0")
        if np.any(u0 < 0) or not np.all(np.isfinite(u0)):
            raise ValidationError("Initial activities must be finite and nonnegative", "u0")
        if dt <= 0:
            raise ValidationError("dt must be positive", "dt")
        self.grid = grid
        self.dt = float(dt)
        self.increments = increments
        self.u = u0.copy()
        self.ell_tv = np.zeros_like(self.u)
        self.running_max = np.abs(self.u).copy()
        self.step = 0

    @property
    def t(self) -> float:
        return self.step * self.dt

    @abstractmethod
    def coefficients(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Drift and diffusion arrays, each (N, M, B), at time t"""

    def advance(self) -> None:
        drift, diffusion = self.coefficients(self.t)
        dW = self.increments.increments(self.step)
        try:
            self.u, self.ell_tv, _ = reflect_arrays(self.u, self.ell_tv, drift, diffusion, dW, self.dt)
        except NonFiniteValueError as e:
            i, k = (e.index or (-1, -1))[:2]
            raise SimulationError("Non-finite activity", column=i, particle=k, step=self.step) from e
        np.maximum(self.running_max, self.u, out=self.running_max)
        self.step += 1

    def ensemble(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.grid, self.u.copy(), self.ell_tv.copy(), self.t, self.step,
                                list(self.increments.column_keys))


class ParticleStepper(ReflectedStepper):
    """
    Interacting particle system

    The concrete model reads the empirical measure through column means only;
    any other model integrates against the full empirical measure.
    """

    def __init__(self, model: ModelSpec, grid: SpatialGrid, u0: np.ndarray, increments: IncrementStream,
                 dt: float, use_general_path: bool = False):
        super().__init__(grid, u0, increments, dt)
        if self.u.shape[2] != model.orientations or grid.d != model.space_dim:
            raise ValidationError("Model dimensions do not match the ensemble")
        self.model = model
        self.dynamics = None
        if model.concrete is not None and not use_general_path:
            self.dynamics = ConcreteDynamics(model.concrete, grid.points)
        self._flat_points = np.repeat(grid.points, self.u.shape[1], axis=0)

    def coefficients(self, t: float):
        if self.dynamics is not None:
            z = self.dynamics.interaction(t, self.u.mean(axis=1))
            return self.dynamics.drift(self.u, z), self.dynamics.diffusion_for(self.u)
        n, m, b = self.u.shape
        flat_u = self.u.reshape(n * m, b)
        measure = EmpiricalMeasure(self._flat_points, flat_u, t=t)
        try:
            drift = eval_drift_batch(self.model, self._flat_points, t, flat_u, measure)
            diffusion = eval_diffusion_batch(self.model, self._flat_points, t, flat_u, measure)
        except NonFiniteValueError as e:
            raise SimulationError(f"Non-finite coefficient ({e})", step=self.step) from e
        return drift.reshape(n, m, b), diffusion.reshape(n, m, b)


@dataclass
class SimulationResult:
    """Snapshots of a particle run"""
    times: np.ndarray
    snapshots: np.ndarray
    ledgers: np.ndarray
    running_max: np.ndarray
    final: ParticleEnsemble
    dt: float

    def measure_at(self, index: int) -> EmpiricalMeasure:
        n, m, b = self.snapshots.shape[1:]
        points = np.repeat(self.final.grid.points, m, axis=0)
        return EmpiricalMeasure(points, self.snapshots[index].reshape(n * m, b), t=float(self.times[index]))


def default_record_times(T: float, count: int = DEFAULT_RECORD_COUNT) -> np.ndarray:
    return np.linspace(0.0, T, count + 1)


def record_steps(record_times: Sequence[float], dt: float, T: float) -> np.ndarray:
    """Step indices of the record instants; each must be a multiple of dt within [0, T]"""
    times = np.asarray(record_times, dtype=float)
    steps = np.rint(times / dt).astype(int)
    if np.any(np.abs(steps * dt - times) > 1e-9 * max(1.0, T)) or np.any(times < 0) or np.any(times > T * (1 + 1e-12)):
        raise ValidationError("Record times must be multiples of dt inside [0, T]", "record_times")
    if np.any(np.diff(steps) < 0):
        raise ValidationError("Record times must be sorted", "record_times")
    return steps


def step_count(T: float, dt: float) -> int:
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValidationError(f"T={T} is not an integer multiple of dt={dt}", "dt")
    return n_steps


def run_recorded(stepper: ReflectedStepper, T: float, record_times: Optional[Sequence[float]] = None) -> SimulationResult:
    """Advance a stepper to T, keeping snapshots at the record times"""
    n_steps = step_count(T, stepper.dt)
    if record_times is None:
        record_times = default_record_times(T)
    steps = record_steps(record_times, stepper.dt, T)
    snapshots, ledgers = [], []
    wanted = list(steps)
    cursor = 0
    for n in range(n_steps + 1):
        while cursor < len(wanted) and wanted[cursor] == n:
            snapshots.append(stepper.u.copy())
            ledgers.append(stepper.ell_tv.copy())
            cursor += 1
        if n < n_steps:
            stepper.advance()
    return SimulationResult(
        times=steps * stepper.dt,
        snapshots=np.stack(snapshots),
        ledgers=np.stack(ledgers),
        running_max=stepper.running_max.copy(),
        final=stepper.ensemble(),
        dt=stepper.dt,
    )


def initial_activities(init: HolderFieldFamily, grid: SpatialGrid, column_keys: Sequence[int]) -> np.ndarray:
    init.validate()
    if init.space_dim != grid.d:
        raise ValidationError("Initial field dimension does not match the grid", "space_dim")
    return init.values(grid.points, column_keys)


def simulate_system(model: ModelSpec, grid: SpatialGrid, M: int, noise: CorrelatedNoiseField,
                    init: HolderFieldFamily, T: float, dt: float, master_seed: int,
                    record_times: Optional[Sequence[float]] = None,
                    column_keys: Optional[Sequence[int]] = None,
                    use_general_path: bool = False) -> SimulationResult:
    """
    Simulate the N x M interacting particle system

    Args:
        model: Structured model
        grid: Column locations
        M: Neurons per column
        noise: Field built on grid.points
        init: Initial field family (column k uses field column_keys[k])
        T: Horizon
        dt: Step size
        master_seed: Seed for the noise streams
        record_times: Snapshot instants (default: 33 equispaced in [0, T])
        column_keys: Stream key per column (default 0..M-1)
        use_general_path: Integrate against the full empirical measure even for the concrete model

    Returns:
        SimulationResult with snapshots, ledgers and per-particle running max

    Raises:
        SimulationError: On a non-finite step, with (i, k, n)
    """
    if M < 1:
        raise ValidationError("M must be at least 1", "M")
    if noise.size != grid.N or not np.allclose(noise.locations, grid.points, rtol=0, atol=1e-15):
        raise ValidationError("Noise locations must coincide with the grid points", "noise")
    keys = list(range(M)) if column_keys is None else [int(key) for key in column_keys]
    if len(keys) != M:
        raise ValidationError("Need one column key per neuron index", "column_keys")
    u0 = initial_activities(init, grid, keys)
    stream = IncrementStream(noise, dt, master_seed, column_keys=keys)
    stepper = ParticleStepper(model, grid, u0, stream, dt, use_general_path=use_general_path)
    logger.info(f"Simulating particle system N={grid.N}, M={M}, B={model.orientations}, T={T}, dt={dt}")
    return run_recorded(stepper, T, record_times)
