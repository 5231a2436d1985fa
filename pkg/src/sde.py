"""
Projected Euler-Maruyama stepping for SDEs reflected on the positive orthant

The reflection ledger records the total variation |l| of the pushing term;
the signed term is always l = -|l|.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import NonFiniteValueError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class ReflectedState:
    """Activity vector with its reflection ledger"""
    u: np.ndarray
    ell: np.ndarray
    ell_tv: np.ndarray
    t: float = 0.0

    @classmethod
    def start(cls, u0, t: float = 0.0) -> "ReflectedState":
        u0 = np.atleast_1d(np.asarray(u0, dtype=float)).copy()
        if np.any(u0 < 0) or not np.all(np.isfinite(u0)):
            raise ValidationError("Initial activities must be finite and nonnegative", "u0")
        zeros = np.zeros_like(u0)
        return cls(u=u0, ell=-zeros, ell_tv=zeros.copy(), t=float(t))

    def validate(self) -> None:
        if np.any(self.u < 0):
            raise ValidationError("Reflected state has a negative component")
        if np.any(self.ell_tv < 0) or not np.array_equal(self.ell, -self.ell_tv):
            raise ValidationError("Reflection ledger is inconsistent (l != -|l|)")


def reflect_arrays(u: np.ndarray, ell_tv: np.ndarray, drift: np.ndarray, diffusion: np.ndarray,
                   dW: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorised reflected Euler step on arrays of any matching shape

    Returns:
        (new u, new |l|, |l| increment)
    """
    proposal = u + drift * dt + diffusion * dW
    if not np.all(np.isfinite(proposal)):
        bad = np.argwhere(~np.isfinite(proposal))[0]
        index = tuple(int(i) for i in bad)
        raise NonFiniteValueError(index[-1], f"reflected step at index {index}", index=index)
    push = np.maximum(-proposal, 0.0)
    return np.maximum(proposal, 0.0), ell_tv + push, push


def reflected_euler_step(state: ReflectedState, drift, diffusion, dW, dt: float,
                         step: Optional[int] = None) -> ReflectedState:
    """
    One projected Euler-Maruyama step

    Args:
        state: Current state (u >= 0)
        drift: Drift vector b
        diffusion: Diffusion vector sigma (diagonal)
        dW: Brownian increment
        dt: Step size (> 0)
        step: Step index, used in error context

    Returns:
        New state: u' = max(p, 0), |l|' = |l| + max(-p, 0), l' = -|l|'
    """
    if dt <= 0:
        raise ValidationError("dt must be positive", "dt")
    try:
        u_new, tv_new, _ = reflect_arrays(state.u, state.ell_tv, np.asarray(drift, dtype=float),
                                          np.asarray(diffusion, dtype=float), np.asarray(dW, dtype=float), dt)
    except NonFiniteValueError as e:
        raise NonFiniteValueError(e.component, f"step {step}, t={state.t:.6g}", index=e.index) from e
    return ReflectedState(u=u_new, ell=-tv_new, ell_tv=tv_new, t=state.t + dt)


@dataclass
class Trajectory:
    """Recorded states of a single reflected path"""
    times: List[float] = field(default_factory=list)
    states: List[ReflectedState] = field(default_factory=list)
    final: Optional[ReflectedState] = None
    running_max: Optional[np.ndarray] = None


def integrate_path(initial: ReflectedState,
                   drift_fn: Callable[[float, np.ndarray], np.ndarray],
                   diffusion_fn: Callable[[float, np.ndarray], np.ndarray],
                   increments: Sequence[np.ndarray], dt: float, record_every: int = 1) -> Trajectory:
    """
    Integrate one reflected path with exogenous coefficients

    Args:
        initial: Starting state
        drift_fn: (t, u) -> drift vector
        diffusion_fn: (t, u) -> diffusion vector
        increments: One Brownian increment per step
        dt: Step size
        record_every: Record every n-th state (the final state is always recorded)

    Returns:
        Trajectory with recorded states and the running max of |u| per component
    """
    if record_every < 1:
        raise ValidationError("record_every must be at least 1", "record_every")
    state = initial
    trajectory = Trajectory(times=[state.t], states=[state])
    running_max = np.abs(state.u).copy()
    n_steps = len(increments)
    for n, dW in enumerate(increments):
        state = reflected_euler_step(state, drift_fn(state.t, state.u), diffusion_fn(state.t, state.u),
                                     dW, dt, step=n)
        np.maximum(running_max, np.abs(state.u), out=running_max)
        if (n + 1) % record_every == 0 or n + 1 == n_steps:
            trajectory.times.append(state.t)
            trajectory.states.append(state)
    trajectory.final = state
    trajectory.running_max = running_max
    return trajectory
