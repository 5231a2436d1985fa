"""
Wasserstein distances
Exact 1-D quantile distances, exact small-instance optimal transport on
discrete measures and product-space W1 on Q x R^B
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np
import ot
from scipy.spatial.distance import cdist

from src.errors import TransportError, ValidationError
from src.performance_monitor import track_stage
from src.streams import keyed_generator

logger = logging.getLogger(__name__)

EXACT_ATOM_BUDGET = 512
PLAN_MARGINAL_TOL = 1e-10
WEIGHT_SUM_TOL = 1e-12
SUBSAMPLE_REPETITIONS = 3

Metric = Union[str, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass
class DiscreteMeasure:
    """Atoms (n, dim) with positive weights summing to one"""
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        self.atoms = atoms
        self.weights = np.asarray(self.weights, dtype=float)
        self.validate()

    def validate(self) -> None:
        if self.atoms.shape[0] == 0:
            raise ValidationError("A discrete measure needs at least one atom", "atoms")
        if self.weights.shape != (self.atoms.shape[0],):
            raise ValidationError("Need exactly one weight per atom", "weights")
        if np.any(self.weights <= 0):
            raise ValidationError("Atom weights must be strictly positive", "weights")
        if abs(self.weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValidationError(f"Weights sum to {self.weights.sum():.15g}, not 1", "weights")

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float)
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @classmethod
    def from_masses(cls, atoms, masses) -> "DiscreteMeasure":
        """Drop zero-mass atoms and renormalise"""
        atoms = np.asarray(atoms, dtype=float)
        masses = np.asarray(masses, dtype=float)
        if np.any(masses < 0):
            raise ValidationError("Masses cannot be negative", "masses")
        keep = masses > 0
        return cls(atoms[keep], masses[keep] / masses[keep].sum())

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


@dataclass
class TransportResult:
    """Exact distance and its optimal plan"""
    distance: float
    plan: np.ndarray
    order: int


@dataclass
class TransportEstimate:
    """W1 value with the method that produced it"""
    value: float
    method: str
    exact: bool
    spread: float = 0.0
    repetitions: int = 1


# ============================================================================
# One dimension
# ============================================================================

def _quantile_steps(values: np.ndarray, weights: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValidationError("Empty sample", "samples")
    if weights is None:
        weights = np.ones(values.size)
    else:
        weights = np.asarray(weights, dtype=float).ravel()
        if weights.shape != values.shape or np.any(weights < 0) or weights.sum() <= 0:
            raise ValidationError("Weights must be nonnegative, one per sample, not all zero", "weights")
    order = np.argsort(values, kind="mergesort")
    cum = np.cumsum(weights[order])
    return values[order], cum / cum[-1]


def w_sorted_1d(a, b, order: int = 1, a_weights=None, b_weights=None) -> float:
    """
    W_m between two 1-D samples via their quantile functions

    Equal-count unweighted samples reduce to ((1/n) sum |a_(i) - b_(i)|^m)^(1/m);
    other inputs are integrated exactly over the common refinement of the two
    step quantile functions.

    Args:
        a, b: Samples
        order: 1 or 2
        a_weights, b_weights: Optional nonnegative weights

    Returns:
        Distance

    Raises:
        ValidationError: On empty input or unsupported order
    """
    if order not in (1, 2):
        raise ValidationError("order must be 1 or 2", "order")
    va, ca = _quantile_steps(a, a_weights)
    vb, cb = _quantile_steps(b, b_weights)
    breaks = np.union1d(np.union1d(ca, cb), [0.0])
    lengths = np.diff(breaks)
    mids = breaks[:-1] + 0.5 * lengths
    ia = np.minimum(np.searchsorted(ca, mids, side="right"), va.size - 1)
    ib = np.minimum(np.searchsorted(cb, mids, side="right"), vb.size - 1)
    cost = float(np.sum(lengths * np.abs(va[ia] - vb[ib]) ** order))
    return cost ** (1.0 / order)


def quantile_values(centers: np.ndarray, masses: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Quantile function of a cell-centre law evaluated at levels in (0, 1)"""
    values, cum = _quantile_steps(centers, masses)
    return values[np.minimum(np.searchsorted(cum, levels, side="left"), values.size - 1)]


# ============================================================================
# Exact discrete transport
# ============================================================================

def ground_cost(first: np.ndarray, second: np.ndarray, metric: Metric = "euclidean",
                x_dim: Optional[int] = None) -> np.ndarray:
    """
    Pairwise ground distances

    metric: 'euclidean', 'product' (|x - y| + |u - v| with the first x_dim
    coordinates in Q) or a callable (first, second) -> (n, m) matrix.
    """
    if callable(metric):
        return np.asarray(metric(first, second), dtype=float)
    if metric == "euclidean":
        return cdist(first, second, "euclidean")
    if metric == "product":
        if x_dim is None or not (0 < x_dim < first.shape[1]):
            raise ValidationError("Product metric needs 0 < x_dim < atom dimension", "x_dim")
        return (cdist(first[:, :x_dim], second[:, :x_dim], "euclidean")
                + cdist(first[:, x_dim:], second[:, x_dim:], "euclidean"))
    raise ValidationError(f"Unknown ground metric '{metric}'", "metric")


def w_discrete_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, metric: Metric = "euclidean",
                     order: int = 1, x_dim: Optional[int] = None) -> TransportResult:
    """
    Exact W_m between discrete measures by network simplex

    Args:
        mu, nu: Measures with at most EXACT_ATOM_BUDGET atoms each
        metric: Ground metric (see ground_cost)
        order: 1 or 2
        x_dim: Space coordinates for the product metric

    Returns:
        TransportResult with the distance and a plan whose marginals match the weights

    Raises:
        TransportError: If the budget is exceeded or the plan is infeasible
    """
    if order not in (1, 2):
        raise ValidationError("order must be 1 or 2", "order")
    if mu.size > EXACT_ATOM_BUDGET or nu.size > EXACT_ATOM_BUDGET:
        raise TransportError(
            f"Exact transport budget exceeded ({mu.size} x {nu.size} atoms, limit {EXACT_ATOM_BUDGET})"
        )
    if mu.atoms.shape[1] != nu.atoms.shape[1]:
        raise ValidationError("Measures live in spaces of different dimension", "atoms")
    cost = ground_cost(mu.atoms, nu.atoms, metric, x_dim)
    cost_m = cost ** order
    plan = ot.emd(mu.weights, nu.weights, cost_m, numItermax=1_000_000)
    row_gap = np.max(np.abs(plan.sum(axis=1) - mu.weights))
    col_gap = np.max(np.abs(plan.sum(axis=0) - nu.weights))
    if max(row_gap, col_gap) > PLAN_MARGINAL_TOL:
        raise TransportError(f"Optimal plan marginals off by {max(row_gap, col_gap):.3e}")
    distance = float(np.sum(plan * cost_m)) ** (1.0 / order)
    return TransportResult(distance=distance, plan=plan, order=order)


def coupling_upper_bound(first, second=None, x_dim: int = 1,
                         mu: Optional[DiscreteMeasure] = None,
                         nu: Optional[DiscreteMeasure] = None) -> float:
    """
    (1/n) sum (|x - y| + |u - v|) over paired atoms

    Args:
        first, second: (n, x_dim + B) paired atom rows, or a list of ((x, u), (y, v)) pairs as first
        x_dim: Space coordinates per row
        mu, nu: Optional uniform measures the pairing must cover exactly once

    Raises:
        ValidationError: If the pairing does not match the measures' atoms
    """
    if second is None:
        pairs = list(first)
        first = np.array([np.concatenate([np.atleast_1d(p[0][0]), np.atleast_1d(p[0][1])]) for p in pairs])
        second = np.array([np.concatenate([np.atleast_1d(p[1][0]), np.atleast_1d(p[1][1])]) for p in pairs])
    first = np.atleast_2d(np.asarray(first, dtype=float))
    second = np.atleast_2d(np.asarray(second, dtype=float))
    if first.shape != second.shape or first.shape[0] == 0:
        raise ValidationError("Paired atom arrays must have the same nonzero shape", "pairs")
    for side, measure in ((first, mu), (second, nu)):
        if measure is None:
            continue
        if measure.size != side.shape[0] or not measure.is_uniform or not _same_rows(side, measure.atoms):
            raise ValidationError("Pairing does not cover the measure's atoms exactly once", "pairs")
    dx = np.linalg.norm(first[:, :x_dim] - second[:, :x_dim], axis=1)
    du = np.linalg.norm(first[:, x_dim:] - second[:, x_dim:], axis=1)
    return float(np.mean(dx + du))


def _same_rows(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape != b.shape:
        return False
    return bool(np.array_equal(a[np.lexsort(a.T[::-1])], b[np.lexsort(b.T[::-1])]))


def _subsample(measure: DiscreteMeasure, budget: int, rng: np.random.Generator) -> DiscreteMeasure:
    if measure.size <= budget:
        return measure
    if measure.is_uniform:
        idx = rng.choice(measure.size, size=budget, replace=False)
    else:
        idx = rng.choice(measure.size, size=budget, replace=True, p=measure.weights)
    return DiscreteMeasure.uniform(measure.atoms[np.sort(idx)])


@track_stage("transport")
def subsampled_w1(mu: DiscreteMeasure, nu: DiscreteMeasure, x_dim: int, master_seed: int,
                  budget: int = EXACT_ATOM_BUDGET, repetitions: int = SUBSAMPLE_REPETITIONS,
                  tag: str = "subsample") -> TransportEstimate:
    """Exact product-space W1 on random subsamples of size budget; mean and max-min spread"""
    values = []
    for rep in range(repetitions):
        rng = keyed_generator(master_seed, tag, rep)
        values.append(w_discrete_exact(_subsample(mu, budget, rng), _subsample(nu, budget, rng),
                                       metric="product", x_dim=x_dim).distance)
    values = np.asarray(values)
    return TransportEstimate(value=float(values.mean()), method="subsampled-exact", exact=False,
                             spread=float(values.max() - values.min()), repetitions=repetitions)


def w1_product_space(mu: DiscreteMeasure, nu: DiscreteMeasure, x_dim: int,
                     fallback: Optional[str] = None, master_seed: int = 0) -> float:
    """
    W1 on Q x R^B with ground metric |x - y| + |u - v|

    Args:
        mu, nu: Measures with atoms (x, u)
        x_dim: Dimension of Q
        fallback: None (raise when over budget), 'coupling' (index pairing bound)
            or 'subsample' (exact W1 on subsamples)
        master_seed: Seed for subsampling

    Returns:
        Exact W1 within budget, otherwise the fallback value

    Raises:
        TransportError: If over budget without a fallback
    """
    return estimate_w1_product(mu, nu, x_dim, fallback, master_seed).value


def estimate_w1_product(mu: DiscreteMeasure, nu: DiscreteMeasure, x_dim: int,
                        fallback: Optional[str] = None, master_seed: int = 0) -> TransportEstimate:
    """As w1_product_space, reporting which method produced the value"""
    if mu.size <= EXACT_ATOM_BUDGET and nu.size <= EXACT_ATOM_BUDGET:
        value = w_discrete_exact(mu, nu, metric="product", x_dim=x_dim).distance
        return TransportEstimate(value=value, method="exact", exact=True)
    if fallback is None:
        raise TransportError(
            f"Product-space W1 over budget ({mu.size} x {nu.size} atoms) and no fallback allowed"
        )
    if fallback == "coupling":
        if mu.size != nu.size or not (mu.is_uniform and nu.is_uniform):
            raise TransportError("Coupling fallback needs equal-size uniform measures")
        logger.debug(f"Exact W1 over budget ({mu.size} atoms); using the index-pairing bound")
        return TransportEstimate(value=coupling_upper_bound(mu.atoms, nu.atoms, x_dim),
                                 method="coupling-bound", exact=False)
    if fallback == "subsample":
        logger.debug(f"Exact W1 over budget ({mu.size} x {nu.size} atoms); subsampling")
        return subsampled_w1(mu, nu, x_dim, master_seed)
    raise ValidationError(f"Unknown fallback '{fallback}'", "fallback")


def _stratified(points: np.ndarray, values: np.ndarray) -> DiscreteMeasure:
    """Uniform measure on (x_i, values[i, j]) for every node i and quantile j"""
    atoms = np.concatenate([np.repeat(points, values.shape[1], axis=0), values.reshape(-1, 1)], axis=1)
    return DiscreteMeasure.uniform(atoms)


def quantize_law(points: np.ndarray, centers: np.ndarray, masses: np.ndarray, atoms_per_node: int) -> DiscreteMeasure:
    """
    Stratified quantisation of a gridded law on Q x R

    Each node contributes atoms_per_node equally weighted atoms at the
    mid-quantiles (j + 1/2)/q of its cell-centre law.
    """
    points = np.atleast_2d(points)
    masses = np.asarray(masses, dtype=float)
    if masses.shape != (points.shape[0], centers.size):
        raise ValidationError("masses must have shape (nodes, cells)", "masses")
    if atoms_per_node < 1:
        raise ValidationError("atoms_per_node must be positive", "atoms_per_node")
    levels = (np.arange(atoms_per_node) + 0.5) / atoms_per_node
    return _stratified(points, np.stack([quantile_values(centers, row, levels) for row in masses]))


def quantize_samples(points: np.ndarray, samples: np.ndarray, atoms_per_node: int) -> DiscreteMeasure:
    """
    Stratified quantisation of equally weighted samples (nodes, count) on Q x R

    With atoms_per_node >= count every sample is kept, so the measure is the
    empirical measure itself.
    """
    points = np.atleast_2d(points)
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] != points.shape[0]:
        raise ValidationError("samples must have shape (nodes, count)", "samples")
    if atoms_per_node < 1:
        raise ValidationError("atoms_per_node must be positive", "atoms_per_node")
    count = samples.shape[1]
    if atoms_per_node >= count:
        return _stratified(points, np.sort(samples, axis=1))
    levels = (np.arange(atoms_per_node) + 0.5) / atoms_per_node
    weights = np.full(count, 1.0 / count)
    return _stratified(points, np.stack([quantile_values(row, weights, levels) for row in samples]))
