"""
Epsilon-correlated spatial noise

Each location X_i sees a standard Brownian motion per orientation; two
locations are correlated through the overlap of mollifiers of radius epsilon
centred at them, and independent once they are more than 2 epsilon apart.
Increments are drawn from keyed streams, so any (seed, column, step) maps to
the same matrix regardless of call order.
"""

import logging
from dataclasses import dataclass, field as dataclass_field
from functools import lru_cache
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import integrate, linalg

from src.errors import FactorizationError, QuadratureError, ValidationError
from src.streams import keyed_generator

logger = logging.getLogger(__name__)

QUADRATURE_RTOL = 1e-8
MAX_NODES_PER_AXIS = {1: 1 << 20, 2: 2048, 3: 128}
JITTER_START = 1e-12
JITTER_MAX = 1e-8
DEFAULT_BLOCK_STEPS = 64


def _bump(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    inside = r < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


def _polynomial(r: np.ndarray) -> np.ndarray:
    return np.where(r < 1.0, (1.0 - r ** 2) ** 2, 0.0)


PROFILES = {"bump": _bump, "polynomial": _polynomial}


@lru_cache(maxsize=16384)
def _overlap_integral(profile: str, space_dim: int, h: float) -> float:
    """int rho(|w|) rho(|w - h e_1|) dw by refined tensor trapezoid"""
    if h >= 2.0:
        return 0.0
    rho = PROFILES[profile]
    cap = MAX_NODES_PER_AXIS.get(space_dim)
    if cap is None:
        raise QuadratureError(f"Covariance quadrature supports d <= 3, got d={space_dim}")
    scale = None if h == 0.0 else _overlap_integral(profile, space_dim, 0.0)

    n_nodes = 32
    previous = None
    while n_nodes <= cap:
        first = np.linspace(h - 1.0, 1.0, n_nodes + 1)
        others = [np.linspace(-1.0, 1.0, n_nodes + 1)] * (space_dim - 1)
        axes = np.meshgrid(first, *others, indexing="ij", sparse=True)
        sq_rest = sum(a ** 2 for a in axes[1:]) if space_dim > 1 else 0.0
        values = rho(np.sqrt(axes[0] ** 2 + sq_rest)) * rho(np.sqrt((axes[0] - h) ** 2 + sq_rest))
        values = np.broadcast_to(values, tuple(n_nodes + 1 for _ in range(space_dim)))
        total = values
        for axis_nodes in reversed([first] + others):
            total = integrate.trapezoid(total, axis_nodes, axis=-1)
        total = float(total)
        if previous is not None:
            reference = max(abs(total), 1e-6 * scale) if scale is not None else abs(total)
            if abs(total - previous) <= QUADRATURE_RTOL * reference:
                return total
        previous = total
        n_nodes *= 2
    raise QuadratureError(
        f"Overlap quadrature for profile '{profile}', d={space_dim}, h={h:.6g} "
        f"did not reach relative tolerance {QUADRATURE_RTOL} within {cap} nodes per axis"
    )


@dataclass(frozen=True)
class Mollifier:
    """Radial mollifier supported in the unit ball"""
    profile: str = "bump"
    space_dim: int = 1

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ValidationError(
                f"Unknown mollifier '{self.profile}'. Must be one of {sorted(PROFILES)}", "mollifier"
            )
        if self.space_dim not in MAX_NODES_PER_AXIS:
            raise ValidationError("Noise covariance supports space dimension 1, 2 or 3", "space_dim")

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return PROFILES[self.profile](np.asarray(r, dtype=float))

    @property
    def norm_squared(self) -> float:
        return _overlap_integral(self.profile, self.space_dim, 0.0)

    @property
    def C_rho(self) -> float:
        return 1.0 / self.norm_squared

    def correlation(self, h: float) -> float:
        """Normalised overlap at separation h measured in units of epsilon"""
        if h <= 0.0:
            return 1.0
        if h >= 2.0:
            return 0.0
        return _overlap_integral(self.profile, self.space_dim, round(float(h), 12)) * self.C_rho


def covariance(x, y, epsilon: float, mollifier: Mollifier) -> float:
    """
    Per-unit-time covariance of the noise at two points

    Args:
        x, y: Points of Q
        epsilon: Correlation length
        mollifier: Mollifier profile

    Returns:
        C_rho eps^d int rho_eps(z - x) rho_eps(z - y) dz, exactly 0 beyond 2 eps

    Raises:
        QuadratureError: If refinement does not converge
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive", "epsilon")
    mollifier.validate()
    dist = float(np.linalg.norm(np.atleast_1d(np.asarray(x, dtype=float)) - np.atleast_1d(np.asarray(y, dtype=float))))
    return mollifier.correlation(dist / epsilon)


def default_epsilon(n_columns: int, space_dim: int) -> float:
    """Grid spacing / 3, so distinct nodes sense independent noise"""
    return float(n_columns) ** (-1.0 / space_dim) / 3.0


@dataclass
class CorrelatedNoiseField:
    """Factorised spatial covariance at a finite set of locations"""
    locations: np.ndarray
    epsilon: float
    mollifier: Mollifier
    covariance: np.ndarray
    factor: np.ndarray
    orientations: int = 1
    columns: int = 1
    jitter: float = 0.0
    is_identity: bool = False
    block_steps: int = DEFAULT_BLOCK_STEPS

    @property
    def size(self) -> int:
        return self.locations.shape[0]

    def far_mask(self) -> np.ndarray:
        dist = np.linalg.norm(self.locations[:, None, :] - self.locations[None, :, :], axis=-1)
        return dist > 2.0 * self.epsilon


def _as_locations(locations, space_dim: int) -> np.ndarray:
    locations = np.asarray(locations, dtype=float)
    if locations.ndim == 1 and space_dim == 1:
        locations = locations[:, None]
    return np.atleast_2d(locations)


def covariance_matrix(locations: np.ndarray, epsilon: float, mollifier: Mollifier) -> np.ndarray:
    """Symmetric per-unit-time covariance Sigma over the location set"""
    locations = _as_locations(locations, mollifier.space_dim)
    n = locations.shape[0]
    sigma = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            value = covariance(locations[i], locations[j], epsilon, mollifier)
            sigma[i, j] = value
            sigma[j, i] = value
    return sigma


def build_field(locations, epsilon: float, mollifier: Mollifier, B: int = 1, M: int = 1,
                block_steps: int = DEFAULT_BLOCK_STEPS) -> CorrelatedNoiseField:
    """
    Assemble and factorise the spatial covariance

    Args:
        locations: (L, d) distinct points
        epsilon: Correlation length
        mollifier: Mollifier profile (its space_dim must match d)
        B: Orientations (independent components)
        M: Independent copies (columns k)
        block_steps: Steps drawn per keyed block

    Returns:
        CorrelatedNoiseField with lower-triangular factor G, G G^T = Sigma (+ jitter)

    Raises:
        FactorizationError: If Cholesky fails at the largest jitter
    """
    locations = _as_locations(locations, mollifier.space_dim)
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive", "epsilon")
    if locations.shape[1] != mollifier.space_dim:
        raise ValidationError("Mollifier dimension does not match the locations", "space_dim")
    if B < 1 or M < 1 or block_steps < 1:
        raise ValidationError("B, M and block_steps must be positive")
    n = locations.shape[0]
    if n > 1:
        dist = np.linalg.norm(locations[:, None, :] - locations[None, :, :], axis=-1)
        if np.any(dist[np.triu_indices(n, 1)] == 0.0):
            raise ValidationError("Noise locations must be pairwise distinct", "locations")

    sigma = covariance_matrix(locations, epsilon, mollifier)
    off_diagonal = sigma - np.diag(np.diag(sigma))
    if not np.any(off_diagonal):
        logger.debug(f"Noise field on {n} locations is uncorrelated (eps={epsilon:.4g})")
        return CorrelatedNoiseField(locations, float(epsilon), mollifier, sigma, np.eye(n),
                                    B, M, 0.0, True, block_steps)

    jitter = 0.0
    while True:
        try:
            factor = linalg.cholesky(sigma + jitter * np.eye(n), lower=True)
            break
        except linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1.0 + 1e-9):
                min_eig = float(linalg.eigvalsh(sigma)[0])
                raise FactorizationError(
                    f"Cholesky of {n}x{n} noise covariance failed at jitter {JITTER_MAX:.0e}", min_eig
                )
            logger.warning(f"Noise covariance not numerically PD, retrying with jitter {jitter:.0e}")
    return CorrelatedNoiseField(locations, float(epsilon), mollifier, sigma, factor,
                                B, M, jitter, False, block_steps)


def _normal_block(field: CorrelatedNoiseField, seed: int, key: int, block: int, tag: str) -> np.ndarray:
    rng = keyed_generator(seed, tag, key, block)
    return rng.standard_normal((field.block_steps, field.size, field.orientations))


def _correlate(field: CorrelatedNoiseField, z: np.ndarray, scale: float) -> np.ndarray:
    if field.is_identity:
        return scale * z
    return scale * (field.factor @ z)


def sample_increments(field: CorrelatedNoiseField, dt: float, k: int, n: int, master_seed: int,
                      tag: str = "noise") -> np.ndarray:
    """
    Brownian increments of column k over step n

    Args:
        field: Factorised noise field
        dt: Step size (>= 0)
        k: Column (stream) key
        n: Step index
        master_seed: Run seed

    Returns:
        (L, B) matrix; each column ~ N(0, dt Sigma)
    """
    if dt < 0:
        raise ValidationError("dt cannot be negative", "dt")
    block, offset = divmod(int(n), field.block_steps)
    z = _normal_block(field, master_seed, int(k), block, tag)[offset]
    return _correlate(field, z, float(np.sqrt(dt)))


class IncrementStream:
    """
    Sequential increments for all columns of a run

    column_keys[k] is the stream key consumed by column k; permuting it
    permutes which column receives which noise (and must be combined with the
    same permutation of initial data).
    """

    def __init__(self, field: CorrelatedNoiseField, dt: float, master_seed: int,
                 column_keys: Optional[Sequence[int]] = None, tag: str = "noise"):
        if dt <= 0:
            raise ValidationError("dt must be positive", "dt")
        self.field = field
        self.dt = float(dt)
        self.scale = float(np.sqrt(dt))
        self.master_seed = int(master_seed)
        self.tag = tag
        keys = range(field.columns) if column_keys is None else column_keys
        self.column_keys = [int(key) for key in keys]
        self._blocks: Dict[int, np.ndarray] = {}
        self._block_index = -1

    def increments(self, n: int) -> np.ndarray:
        """(L, M, B) increments for step n"""
        block, offset = divmod(int(n), self.field.block_steps)
        if block != self._block_index:
            self._blocks = {
                key: _normal_block(self.field, self.master_seed, key, block, self.tag)
                for key in self.column_keys
            }
            self._block_index = block
        out = np.empty((self.field.size, len(self.column_keys), self.field.orientations))
        for col, key in enumerate(self.column_keys):
            out[:, col, :] = _correlate(self.field, self._blocks[key][offset], self.scale)
        return out


class CoarsenedStream:
    """Increments over `factor` consecutive steps of a finer stream (same Brownian path)"""

    def __init__(self, base: IncrementStream, factor: int = 2):
        if factor < 1:
            raise ValidationError("factor must be positive", "factor")
        self.base = base
        self.factor = int(factor)
        self.dt = base.dt * factor
        self.column_keys = base.column_keys

    def increments(self, n: int) -> np.ndarray:
        start = int(n) * self.factor
        total = self.base.increments(start).copy()
        for offset in range(1, self.factor):
            total += self.base.increments(start + offset)
        return total


@dataclass
class NoiseStatisticsReport:
    """Empirical checks of the noise field"""
    max_cov_error: float
    max_cov_z: float
    max_far_corr: float
    qv_ratio_bound_ok: bool
    c_check: float
    diag_variance_min: float
    diag_variance_max: float
    n_samples: int
    details: Dict[str, float] = dataclass_field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "max_cov_error": self.max_cov_error,
            "max_cov_z": self.max_cov_z,
            "max_far_corr": self.max_far_corr,
            "qv_ratio_bound_ok": self.qv_ratio_bound_ok,
            "c_check": self.c_check,
            "diag_variance_min": self.diag_variance_min,
            "diag_variance_max": self.diag_variance_max,
            "n_samples": self.n_samples,
        }


def quadratic_variation_constant(mollifier: Mollifier, samples: int = 400,
                                 separations: Sequence[float] = ()) -> float:
    """sup_h 2 (1 - c(h)) / h^2 over separations h in (0, 2]"""
    hs = np.concatenate([np.linspace(2.0 / samples, 2.0, samples),
                         [h for h in separations if 0.0 < h <= 2.0]])
    return float(max(2.0 * (1.0 - mollifier.correlation(h)) / h ** 2 for h in hs))


def verify_statistics(field: CorrelatedNoiseField, dt: float, n_samples: int, master_seed: int) -> NoiseStatisticsReport:
    """
    Empirical covariance, far-pair independence and difference-variance bound

    Samples are the increments of column 0 over steps 0..n_samples-1, all
    orientations pooled.
    """
    if n_samples < 10_000:
        raise ValidationError("verify_statistics needs at least 10^4 samples", "n_samples")
    if dt <= 0:
        raise ValidationError("dt must be positive", "dt")
    stream = IncrementStream(field, dt, master_seed, column_keys=[0], tag="noise-check")
    draws = np.stack([stream.increments(n)[:, 0, :] for n in range(n_samples)])
    samples = draws.transpose(0, 2, 1).reshape(-1, field.size) / np.sqrt(dt)
    count = samples.shape[0]

    emp_cov = samples.T @ samples / count
    analytic = field.covariance
    cov_error = np.abs(emp_cov - analytic)
    cov_se = np.sqrt((np.outer(np.diag(analytic), np.diag(analytic)) + analytic ** 2) / count)
    diag = np.diag(emp_cov)

    far = field.far_mask()
    if np.any(far):
        corr = emp_cov / np.sqrt(np.outer(diag, diag))
        max_far_corr = float(np.max(np.abs(corr[far])))
    else:
        max_far_corr = 0.0

    dist = np.linalg.norm(field.locations[:, None, :] - field.locations[None, :, :], axis=-1)
    c_check = quadratic_variation_constant(field.mollifier, separations=(dist / field.epsilon).ravel())
    qv_ok = True
    for i in range(field.size):
        for j in range(i + 1, field.size):
            diff = samples[:, i] - samples[:, j]
            emp_var = float(np.mean(diff ** 2))
            exact_var = 2.0 * (1.0 - analytic[i, j])
            bound = c_check * dist[i, j] ** 2 / field.epsilon ** 2
            if emp_var > bound + 3.0 * np.sqrt(2.0 / count) * max(exact_var, 1e-300):
                qv_ok = False

    report = NoiseStatisticsReport(
        max_cov_error=float(cov_error.max()),
        max_cov_z=float((cov_error / cov_se).max()),
        max_far_corr=max_far_corr,
        qv_ratio_bound_ok=qv_ok,
        c_check=c_check,
        diag_variance_min=float(diag.min()),
        diag_variance_max=float(diag.max()),
        n_samples=count,
        details={"jitter": field.jitter, "epsilon": field.epsilon},
    )
    logger.info(
        f"Noise statistics: max cov error {report.max_cov_error:.3e} ({report.max_cov_z:.2f} SE), "
        f"far corr {report.max_far_corr:.3e}, QV bound ok={report.qv_ratio_bound_ok}"
    )
    return report
