"""
Model coefficients for the reflected grid-cell network

Drift and diffusion follow the structured form

    b^beta(x, r, u, f) = b0^beta(x, r, u) + phi_b^beta( int b1^beta(x, y, r, u, v) f(dy, dv) )

(and the same with sigma0, sigma1, phi_sigma for the diffusion). All callables
are batched: points are (n, d) arrays, activities (n, B) arrays.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.errors import NonFiniteValueError, ValidationError
from src.streams import keyed_generator

logger = logging.getLogger(__name__)

LocalFn = Callable[[np.ndarray, float, np.ndarray], np.ndarray]
PairFn = Callable[[np.ndarray, np.ndarray, float, np.ndarray, np.ndarray], np.ndarray]
OuterFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Upper bound on n * m * B entries materialised by one pairwise evaluation
_PAIR_CHUNK_ENTRIES = 2_000_000


# ============================================================================
# Building blocks of the concrete model
# ============================================================================

@dataclass(frozen=True)
class FiringRate:
    """Globally Lipschitz firing-rate nonlinearity"""
    name: str = "softplus"

    SUPPORTED = ("softplus", "rectifier", "identity")

    def validate(self) -> None:
        if self.name not in self.SUPPORTED:
            raise ValidationError(
                f"Unknown firing rate '{self.name}'. Must be one of {list(self.SUPPORTED)}",
                "firing_rate",
            )

    @property
    def lipschitz(self) -> float:
        return 1.0

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.name == "softplus":
            return np.logaddexp(0.0, z)
        if self.name == "rectifier":
            return np.maximum(z, 0.0)
        return z


@dataclass(frozen=True)
class MexicanHat:
    """Difference-of-Gaussians kernel A_e exp(-|z|^2/s_e^2) - A_i exp(-|z|^2/s_i^2)"""
    excitatory_amplitude: float = 1.0
    excitatory_width: float = 0.1
    inhibitory_amplitude: float = 1.0
    inhibitory_width: float = 0.3

    def validate(self) -> None:
        if self.excitatory_width <= 0 or self.inhibitory_width <= 0:
            raise ValidationError("Mexican hat widths must be positive", "kernels")
        if self.excitatory_amplitude < 0 or self.inhibitory_amplitude < 0:
            raise ValidationError("Mexican hat amplitudes cannot be negative", "kernels")

    @classmethod
    def zero(cls) -> "MexicanHat":
        return cls(0.0, 1.0, 0.0, 1.0)

    @property
    def is_zero(self) -> bool:
        return self.excitatory_amplitude == 0 and self.inhibitory_amplitude == 0

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """Evaluate at displacement vectors z of shape (..., d)"""
        sq = np.sum(np.square(np.asarray(z, dtype=float)), axis=-1)
        return (self.excitatory_amplitude * np.exp(-sq / self.excitatory_width ** 2)
                - self.inhibitory_amplitude * np.exp(-sq / self.inhibitory_width ** 2))

    @property
    def sup_norm(self) -> float:
        return max(self.excitatory_amplitude, self.inhibitory_amplitude)

    @property
    def lipschitz(self) -> float:
        peak = np.sqrt(2.0) * np.exp(-0.5)
        return peak * (self.excitatory_amplitude / self.excitatory_width
                       + self.inhibitory_amplitude / self.inhibitory_width)


def mexican_hat(x, A_e: float, s_e: float, A_i: float, s_i: float) -> float:
    """
    Mexican hat interaction profile at a single displacement

    Args:
        x: Displacement in R^d (scalar accepted for d=1)
        A_e, s_e: Excitatory amplitude and width
        A_i, s_i: Inhibitory amplitude and width

    Returns:
        A_e exp(-|x|^2/s_e^2) - A_i exp(-|x|^2/s_i^2)

    Raises:
        ValidationError: If a width is not positive
    """
    if s_e <= 0 or s_i <= 0:
        raise ValidationError("Mexican hat widths must be positive", "kernels")
    z = np.atleast_1d(np.asarray(x, dtype=float))
    return float(MexicanHat(A_e, s_e, A_i, s_i)(z))


@dataclass(frozen=True)
class TauProfile:
    """Relaxation times tau(x), constant or affine in the mean coordinate of x"""
    tau_min: float = 1.0
    tau_max: float = 1.0
    kind: str = "constant"

    def validate(self) -> None:
        if self.kind not in ("constant", "affine"):
            raise ValidationError(f"Unknown tau profile '{self.kind}'", "tau")
        if not (0 < self.tau_min <= self.tau_max < np.inf):
            raise ValidationError("Relaxation times need 0 < tau_min <= tau_max < inf", "tau")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """tau at points x (n, d) -> (n,)"""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "constant":
            return np.full(x.shape[0], self.tau_min)
        return self.tau_min + (self.tau_max - self.tau_min) * x.mean(axis=1)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / self(x)

    def inverse_lipschitz(self, space_dim: int) -> float:
        if self.kind == "constant":
            return 0.0
        return (self.tau_max - self.tau_min) / (np.sqrt(space_dim) * self.tau_min ** 2)


@dataclass(frozen=True)
class ExternalInput:
    """
    External drive B^beta(x, r)

    base[beta] + sum_j a_j cos(2 pi j x_0 + 2 pi beta / B + omega r)
    """
    base: Tuple[float, ...] = (1.0,)
    fourier: Tuple[float, ...] = ()
    omega: float = 0.0

    def validate(self, orientations: int) -> None:
        if len(self.base) != orientations:
            raise ValidationError(
                f"External input needs {orientations} base values, got {len(self.base)}",
                "external_input",
            )
        if not all(np.isfinite(self.base)) or not all(np.isfinite(self.fourier)):
            raise ValidationError("External input coefficients must be finite", "external_input")

    def __call__(self, x: np.ndarray, r: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n_orient = len(self.base)
        out = np.broadcast_to(np.asarray(self.base, dtype=float), (x.shape[0], n_orient)).copy()
        if self.fourier:
            shifts = 2.0 * np.pi * np.arange(n_orient) / n_orient + self.omega * r
            for j, amp in enumerate(self.fourier, start=1):
                phase = 2.0 * np.pi * j * x[:, :1] + shifts[None, :]
                out += amp * np.cos(phase)
        return out

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.base)) + np.sum(np.abs(self.fourier)))

    @property
    def lipschitz(self) -> float:
        return float(sum(abs(a) * 2.0 * np.pi * j for j, a in enumerate(self.fourier, start=1)))


@dataclass(frozen=True)
class GridCellParams:
    """Parameters of the concrete grid-cell network"""
    orientations: int = 4
    space_dim: int = 1
    tau: TauProfile = field(default_factory=TauProfile)
    firing_rate: FiringRate = field(default_factory=FiringRate)
    kernels: Tuple[MexicanHat, ...] = field(default_factory=lambda: (MexicanHat(),) * 4)
    external_input: ExternalInput = field(default_factory=lambda: ExternalInput(base=(1.0,) * 4))
    noise_amplitude: float = 0.5
    activity_bound: float = 4.0
    holder_exponent: float = 1.0

    def validate(self) -> None:
        if self.orientations < 1:
            raise ValidationError("Number of orientations B must be at least 1", "orientations")
        if self.space_dim < 1:
            raise ValidationError("Space dimension d must be at least 1", "space_dim")
        if len(self.kernels) != self.orientations:
            raise ValidationError(
                f"Need one kernel per orientation ({self.orientations}), got {len(self.kernels)}",
                "kernels",
            )
        if self.noise_amplitude < 0:
            raise ValidationError("Noise amplitude sigma cannot be negative", "noise_amplitude")
        if self.activity_bound <= 0:
            raise ValidationError("Activity bound must be positive", "activity_bound")
        if not (0 < self.holder_exponent <= 1):
            raise ValidationError("alpha must lie in (0, 1]", "alpha")
        self.tau.validate()
        self.firing_rate.validate()
        for kernel in self.kernels:
            kernel.validate()
        self.external_input.validate(self.orientations)

    @property
    def kernels_vanish(self) -> bool:
        return all(kernel.is_zero for kernel in self.kernels)


# ============================================================================
# Structured model and measures
# ============================================================================

@dataclass
class ModelSpec:
    """Structured drift/diffusion data with declared regularity constants"""
    orientations: int
    space_dim: int
    b0: LocalFn
    sigma0: LocalFn
    b1: PairFn
    sigma1: PairFn
    phi_b: OuterFn
    phi_sigma: OuterFn
    lipschitz: float
    growth: float
    alpha: float = 1.0
    activity_bound: float = 4.0
    concrete: Optional[GridCellParams] = None
    name: str = "custom"

    def validate(self) -> None:
        if self.orientations < 1 or self.space_dim < 1:
            raise ValidationError("Orientations and space dimension must be positive", "orientations")
        if not (0 < self.alpha <= 1):
            raise ValidationError("alpha must lie in (0, 1]", "alpha")
        if not (self.lipschitz > 0 and np.isfinite(self.lipschitz)):
            raise ValidationError("Declared Lipschitz constant L must be positive", "lipschitz")
        if not (self.growth > 0 and np.isfinite(self.growth)):
            raise ValidationError("Declared growth constant C must be positive", "growth")


class MeasureView:
    """Finite weighted point set on Q x R^B"""

    def __init__(self, points: np.ndarray, values: np.ndarray, weights: Optional[np.ndarray] = None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if points.shape[0] != values.shape[0]:
            raise ValidationError("Measure points and values disagree in length")
        n_atoms = points.shape[0]
        if n_atoms == 0:
            raise ValidationError("Measure needs at least one atom")
        if weights is None:
            weights = np.full(n_atoms, 1.0 / n_atoms)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n_atoms,):
            raise ValidationError("Measure weights must be one per atom")
        if np.any(weights < 0):
            raise ValidationError("Measure weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValidationError(f"Measure weights sum to {weights.sum():.15g}, not 1")
        self.points = points
        self.values = values
        self.weights = weights

    @classmethod
    def point_mass(cls, y, v) -> "MeasureView":
        return cls(np.atleast_2d(y), np.atleast_2d(v), np.ones(1))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def integrate(self, g: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        """Sum_j w_j g(y_j, v_j); g maps (m, d), (m, B) to an array with leading axis m"""
        return np.tensordot(self.weights, np.asarray(g(self.points, self.values), dtype=float), axes=(0, 0))

    def moments(self) -> np.ndarray:
        return self.integrate(lambda y, v: v)


def _check_finite(values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values)
    if np.any(bad):
        component = int(np.argwhere(bad)[0][-1])
        raise NonFiniteValueError(component, what)


def _integrated_pair(pair_fn: PairFn, x: np.ndarray, r: float, u: np.ndarray, f: MeasureView) -> np.ndarray:
    """Row-chunked sum_j w_j pair_fn(x_i, y_j, r, u_i, v_j) -> (n, B)"""
    n, n_orient = u.shape
    chunk = max(1, _PAIR_CHUNK_ENTRIES // max(1, f.size * n_orient))
    out = np.empty((n, n_orient))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        vals = pair_fn(x[start:stop], f.points, r, u[start:stop], f.values)
        out[start:stop] = np.einsum("imb,m->ib", vals, f.weights)
    return out


def _as_batch(model: ModelSpec, x, u) -> Tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if x.shape[1] != model.space_dim:
        raise ValidationError(f"Points must have dimension {model.space_dim}")
    if u.shape[1] != model.orientations:
        raise ValidationError(f"Activities must have {model.orientations} components")
    return x, u


def eval_drift_batch(model: ModelSpec, x, r: float, u, f: MeasureView) -> np.ndarray:
    """Drift b(x_i, r, u_i, f) for a batch of points -> (n, B)"""
    x, u = _as_batch(model, x, u)
    local = model.b0(x, r, u)
    _check_finite(local, "drift b0")
    inner = _integrated_pair(model.b1, x, r, u, f)
    _check_finite(inner, "drift interaction integral")
    out = local + model.phi_b(inner, x)
    _check_finite(out, "drift")
    return out


def eval_diffusion_batch(model: ModelSpec, x, r: float, u, f: MeasureView) -> np.ndarray:
    """Diffusion sigma(x_i, r, u_i, f) for a batch of points -> (n, B)"""
    x, u = _as_batch(model, x, u)
    local = model.sigma0(x, r, u)
    _check_finite(local, "diffusion sigma0")
    inner = _integrated_pair(model.sigma1, x, r, u, f)
    _check_finite(inner, "diffusion interaction integral")
    out = local + model.phi_sigma(inner, x)
    _check_finite(out, "diffusion")
    return out


def eval_drift(model: ModelSpec, x, r: float, u, f: MeasureView) -> np.ndarray:
    """
    Drift at one particle

    Args:
        model: Structured model
        x: Point of Q
        r: Time
        u: Activity vector in R^B
        f: Measure the interaction integrates against

    Returns:
        Array of B drift components

    Raises:
        NonFiniteValueError: If any intermediate is NaN/inf (carries the component)
    """
    return eval_drift_batch(model, x, r, u, f)[0]


def eval_diffusion(model: ModelSpec, x, r: float, u, f: MeasureView) -> np.ndarray:
    """Diffusion at one particle; see eval_drift"""
    return eval_diffusion_batch(model, x, r, u, f)[0]


# ============================================================================
# Model construction
# ============================================================================

def _zero_pair(x, y, r, u, v):
    return np.zeros((x.shape[0], y.shape[0], u.shape[1]))


def _zero_outer(z, x):
    return np.zeros_like(z)


def build_concrete_model(params: GridCellParams) -> ModelSpec:
    """
    Concrete grid-cell model in structured form

    tau b^beta = -u^beta + phi(B^beta(x, r) + (1/B) sum_gamma int K^gamma(x - y) v^gamma f(dy, dv))
    tau sigma^beta = sigma

    The external input is folded into b1 (it integrates to itself against a
    probability measure) and the outer nonlinearity carries the 1/tau(x) factor.
    """
    params.validate()
    n_orient = params.orientations
    tau = params.tau
    phi = params.firing_rate
    kernels = params.kernels
    ext = params.external_input
    sigma = params.noise_amplitude

    def inv_tau(x):
        return np.repeat(tau.inverse(x)[:, None], n_orient, axis=1)

    def b0(x, r, u):
        return -u * inv_tau(x)

    def sigma0(x, r, u):
        return sigma * inv_tau(x) + np.zeros_like(u)

    def b1(x, y, r, u, v):
        disp = x[:, None, :] - y[None, :, :]
        coupled = np.zeros((x.shape[0], y.shape[0]))
        for gamma, kernel in enumerate(kernels):
            coupled += kernel(disp) * v[None, :, gamma]
        coupled /= n_orient
        return ext(x, r)[:, None, :] + coupled[:, :, None]

    def phi_b(z, x):
        return phi(z) * inv_tau(x)

    diam = np.sqrt(params.space_dim)
    holder_factor = diam ** (1.0 - params.holder_exponent)
    bound = params.activity_bound
    kernel_sup = max(k.sup_norm for k in kernels)
    kernel_lip = max(k.lipschitz for k in kernels)
    inv_lip = tau.inverse_lipschitz(params.space_dim)

    lipschitz = max(
        1.0 / tau.tau_min,
        (bound + sigma) * inv_lip * holder_factor,
        kernel_sup,
        (ext.lipschitz + bound * kernel_lip) * holder_factor,
        phi.lipschitz / tau.tau_min,
    )
    growth = max(max(1.0, sigma) / tau.tau_min, ext.sup_norm, kernel_sup)

    model = ModelSpec(
        orientations=n_orient,
        space_dim=params.space_dim,
        b0=b0,
        sigma0=sigma0,
        b1=b1,
        sigma1=_zero_pair,
        phi_b=phi_b,
        phi_sigma=_zero_outer,
        lipschitz=float(lipschitz),
        growth=float(growth),
        alpha=params.holder_exponent,
        activity_bound=bound,
        concrete=params,
        name="gridcell-concrete",
    )
    model.validate()
    logger.debug(f"Built concrete model B={n_orient}, d={params.space_dim}, L={lipschitz:.4g}, C={growth:.4g}")
    return model


def build_linear_test_model(orientations: int = 1, space_dim: int = 1, relaxation: float = 1.0,
                            coupling: float = 0.5, sigma: float = 0.3,
                            sigma_coupling: float = 0.1) -> ModelSpec:
    """
    General-structure model with mean-field coupling in both coefficients

    b^beta = -relaxation u^beta + coupling * mean(v^beta)
    sigma^beta = sigma + sigma_coupling * mean(v^beta)
    """
    if relaxation <= 0:
        raise ValidationError("Relaxation rate must be positive", "relaxation")
    if sigma < 0 or sigma_coupling < 0:
        raise ValidationError("Diffusion coefficients cannot be negative", "sigma")

    def b0(x, r, u):
        return -relaxation * u

    def sigma0(x, r, u):
        return np.full_like(u, sigma)

    def mean_pair(x, y, r, u, v):
        return np.broadcast_to(v[None, :, :], (x.shape[0], y.shape[0], v.shape[1]))

    def phi_b(z, x):
        return coupling * z

    def phi_sigma(z, x):
        return sigma_coupling * z

    lipschitz = max(relaxation, 1.0, abs(coupling), sigma_coupling)
    growth = max(relaxation, sigma, 1.0)
    model = ModelSpec(
        orientations=orientations,
        space_dim=space_dim,
        b0=b0,
        sigma0=sigma0,
        b1=mean_pair,
        sigma1=mean_pair,
        phi_b=phi_b,
        phi_sigma=phi_sigma,
        lipschitz=float(lipschitz),
        growth=float(growth),
        alpha=1.0,
        name="custom-linear-test",
    )
    model.validate()
    return model


# ============================================================================
# Regularity estimation
# ============================================================================

@dataclass
class RegularityReport:
    """Sampled Lipschitz/growth quotients against declared constants"""
    L_hat: float
    C_hat: float
    alpha_consistency: bool
    lipschitz_ok: bool
    growth_ok: bool
    slack: float
    samples: int
    violations: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "L_hat": self.L_hat,
            "C_hat": self.C_hat,
            "alpha_consistency": self.alpha_consistency,
            "lipschitz_ok": self.lipschitz_ok,
            "growth_ok": self.growth_ok,
            "slack": self.slack,
            "samples": self.samples,
            "violations": list(self.violations),
        }


def _perturbed_pairs(rng: np.random.Generator, base: np.ndarray, lo: float, hi: float,
                     mask: np.ndarray) -> np.ndarray:
    """Small perturbations of base rows (only where mask), kept inside [lo, hi]"""
    n, dim = base.shape
    delta = 10.0 ** rng.uniform(-8.0, -1.0, size=(n, 1))
    direction = rng.normal(size=(n, dim))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    step = (hi - lo) * delta * direction
    moved = base + step
    flipped = base - step
    out_of_range = np.any((moved < lo) | (moved > hi), axis=1)
    moved[out_of_range] = flipped[out_of_range]
    moved = np.clip(moved, lo, hi)
    return np.where(mask[:, None], moved, base)


def _sample_arguments(rng: np.random.Generator, n: int, dim: int, lo: float, hi: float,
                      corner_share: float = 0.25) -> np.ndarray:
    pts = rng.uniform(lo, hi, size=(n, dim))
    corners = rng.random(n) < corner_share
    if np.any(corners):
        pts[corners] = rng.integers(0, 2, size=(int(corners.sum()), dim)) * (hi - lo) + lo
    return pts


def estimate_regularity_constants(model: ModelSpec, sample_budget: int, seed: int,
                                  sample_range: Optional[float] = None,
                                  slack: float = 1.05, t_max: float = 1.0) -> RegularityReport:
    """
    Monte Carlo check of the structural Lipschitz/Holder and growth hypotheses

    Half the budget draws independent pairs over Q x [0, range]^B, half draws
    pairs at separations 10^-8..10^-1 (perturbing x only, u only, or both),
    some anchored at cube corners. Quotients are taken per orientation.

    Args:
        model: Model to check
        sample_budget: Number of sampled pairs (>= 100)
        seed: Master seed
        sample_range: Upper end of sampled activities; defaults to the model's activity bound
        slack: Multiplicative slack on declared constants

    Returns:
        RegularityReport; violations are reported, never raised
    """
    if sample_budget < 100:
        raise ValidationError("sample_budget must be at least 100", "sample_budget")
    model.validate()
    rng = keyed_generator(seed, "regularity")
    d, n_orient, alpha = model.space_dim, model.orientations, model.alpha
    u_hi = float(sample_range if sample_range is not None else model.activity_bound)
    n = int(sample_budget)
    n_global = n // 2

    x = _sample_arguments(rng, n, d, 0.0, 1.0)
    y = _sample_arguments(rng, n, d, 0.0, 1.0)
    u = _sample_arguments(rng, n, n_orient, 0.0, u_hi)
    v = _sample_arguments(rng, n, n_orient, 0.0, u_hi)
    r = rng.uniform(0.0, t_max, size=n)

    x2 = _sample_arguments(rng, n, d, 0.0, 1.0)
    y2 = _sample_arguments(rng, n, d, 0.0, 1.0)
    u2 = _sample_arguments(rng, n, n_orient, 0.0, u_hi)
    v2 = _sample_arguments(rng, n, n_orient, 0.0, u_hi)

    mode = rng.integers(0, 3, size=n)
    local = np.arange(n) >= n_global
    move_space = local & (mode != 1)
    move_state = local & (mode != 0)
    x2 = np.where(local[:, None], _perturbed_pairs(rng, x, 0.0, 1.0, move_space), x2)
    y2 = np.where(local[:, None], _perturbed_pairs(rng, y, 0.0, 1.0, move_space), y2)
    u2 = np.where(local[:, None], _perturbed_pairs(rng, u, 0.0, u_hi, move_state), u2)
    v2 = np.where(local[:, None], _perturbed_pairs(rng, v, 0.0, u_hi, move_state), v2)

    def local_at(fn, xs, us):
        return np.stack([fn(xs[i:i + 1], r[i], us[i:i + 1])[0] for i in range(n)])

    def pair_at(fn, xs, ys, us, vs):
        return np.stack([fn(xs[i:i + 1], ys[i:i + 1], r[i], us[i:i + 1], vs[i:i + 1])[0, 0] for i in range(n)])

    b0_a, b0_b = local_at(model.b0, x, u), local_at(model.b0, x2, u2)
    s0_a, s0_b = local_at(model.sigma0, x, u), local_at(model.sigma0, x2, u2)
    b1_a, b1_b = pair_at(model.b1, x, y, u, v), pair_at(model.b1, x2, y2, u2, v2)
    s1_a, s1_b = pair_at(model.sigma1, x, y, u, v), pair_at(model.sigma1, x2, y2, u2, v2)

    dx = np.linalg.norm(x - x2, axis=1) ** alpha
    dy = np.linalg.norm(y - y2, axis=1) ** alpha
    du = np.linalg.norm(u - u2, axis=1)
    dv = np.linalg.norm(v - v2, axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        denom0 = (dx + du)[:, None]
        q0 = np.where(denom0 > 0, (np.abs(b0_a - b0_b) + np.abs(s0_a - s0_b)) / denom0, 0.0)
        denom1 = (dx + dy + du + dv)[:, None]
        q1 = np.where(denom1 > 0, (np.abs(b1_a - b1_b) + np.abs(s1_a - s1_b)) / denom1, 0.0)

    z_scale = 3.0 * max(1.0, u_hi)
    z = rng.normal(scale=z_scale, size=(n, n_orient))
    nudged = z + z_scale * 10.0 ** rng.uniform(-8.0, -1.0, size=(n, 1)) * rng.choice([-1.0, 1.0], size=(n, n_orient))
    z2 = np.where(local[:, None], nudged, rng.normal(scale=z_scale, size=(n, n_orient)))
    dz = np.abs(z - z2)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_phi = np.where(dz > 0, (np.abs(model.phi_b(z, x) - model.phi_b(z2, x))
                                  + np.abs(model.phi_sigma(z, x) - model.phi_sigma(z2, x))) / dz, 0.0)

    unorm = np.linalg.norm(u, axis=1)
    vnorm = np.linalg.norm(v, axis=1)
    g0 = (np.abs(b0_a) + np.abs(s0_a)) / (1.0 + unorm)[:, None]
    g1 = (np.abs(b1_a) + np.abs(s1_a)) / (1.0 + unorm + vnorm)[:, None]

    L_hat = float(max(q0.max(), q1.max(), q_phi.max()))
    C_hat = float(max(g0.max(), g1.max()))
    for name, arr in (("q_b0", q0), ("q_b1", q1), ("q_phi", q_phi), ("g0", g0), ("g1", g1)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(int(np.argwhere(~np.isfinite(arr))[0][-1]), f"regularity quotient {name}")

    violations: List[Dict[str, float]] = []
    lip_cap = slack * model.lipschitz
    growth_cap = slack * model.growth
    for name, arr, cap in (("q_b0", q0, lip_cap), ("q_b1", q1, lip_cap), ("q_phi", q_phi, lip_cap),
                           ("g0", g0, growth_cap), ("g1", g1, growth_cap)):
        worst = arr.max(axis=1)
        for idx in np.nonzero(worst > cap)[0][:5]:
            violations.append({
                "quantity": name,
                "sample": int(idx),
                "component": int(np.argmax(arr[idx])),
                "value": float(worst[idx]),
                "declared": float(cap / slack),
            })

    lipschitz_ok = L_hat <= lip_cap
    growth_ok = C_hat <= growth_cap
    if not (lipschitz_ok and growth_ok):
        logger.warning(
            f"Regularity check failed for model '{model.name}': L_hat={L_hat:.4g} (declared {model.lipschitz:.4g}), "
            f"C_hat={C_hat:.4g} (declared {model.growth:.4g})"
        )
    return RegularityReport(
        L_hat=L_hat,
        C_hat=C_hat,
        alpha_consistency=bool(lipschitz_ok and growth_ok),
        lipschitz_ok=bool(lipschitz_ok),
        growth_ok=bool(growth_ok),
        slack=slack,
        samples=n,
        violations=violations,
    )


# ============================================================================
# Fast path for the concrete model
# ============================================================================

class ConcreteDynamics:
    """
    Concrete-model coefficients on a fixed node set

    The interaction reads the measure only through per-source first moments,
    so kernels are tabulated once as K^gamma(node_i - source_j).
    """

    def __init__(self, params: GridCellParams, nodes: np.ndarray, sources: Optional[np.ndarray] = None):
        params.validate()
        self.params = params
        self.nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
        self.sources = self.nodes if sources is None else np.atleast_2d(np.asarray(sources, dtype=float))
        n_orient = params.orientations
        disp = self.nodes[:, None, :] - self.sources[None, :, :]
        self.kernel_matrix = np.stack([kernel(disp) for kernel in params.kernels])
        self.inv_tau = np.repeat(params.tau.inverse(self.nodes)[:, None], n_orient, axis=1)
        self.diffusion = params.noise_amplitude * self.inv_tau

    @property
    def coupled(self) -> bool:
        return not self.params.kernels_vanish

    def interaction(self, r: float, source_moments: np.ndarray) -> np.ndarray:
        """Argument of phi at each node -> (n, B)"""
        ext = self.params.external_input(self.nodes, r)
        if not self.coupled:
            return ext
        n_src = self.sources.shape[0]
        pooled = np.einsum("gij,jg->i", self.kernel_matrix, source_moments)
        pooled /= self.params.orientations * n_src
        return ext + pooled[:, None]

    def drift(self, u: np.ndarray, z: np.ndarray) -> np.ndarray:
        """(-u + phi(z)) / tau; u is (n, ..., B) with z broadcast over the middle axes"""
        phi_z = self.params.firing_rate(z)
        inv_tau = self.inv_tau
        while phi_z.ndim < u.ndim:
            phi_z = phi_z[:, None, :]
            inv_tau = inv_tau[:, None, :]
        return (-u + phi_z) * inv_tau

    def diffusion_for(self, u: np.ndarray) -> np.ndarray:
        diff = self.diffusion
        while diff.ndim < u.ndim:
            diff = diff[:, None, :]
        return np.broadcast_to(diff, u.shape)
