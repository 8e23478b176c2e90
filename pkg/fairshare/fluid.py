"""
Fluid trajectories under proportional fairness.

Away from the boundary the fluid state moves as
x' = nu_bar + P^T (mu lam) - mu lam with lam = PF(x). A class at zero stays
there when its unconstrained drift, the drift it would have if served at
the largest rate the region leaves idle, is nonpositive. Held classes are
eliminated from the routing chain by excursion removal and the remaining
classes see the reduced arrival rates and routing.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fairshare.capacity import CapacityRegion
from fairshare.config import settings
from fairshare.errors import FluidStepError, InvalidInputError
from fairshare.lyapunov import LyapunovContext, lyapunov_value, norm_bounds_certificate
from fairshare.pf_solver import pf_allocate
from fairshare.traffic import TrafficModel, reduce_routing

logger = logging.getLogger(__name__)

OVERSHOOT_TOL = 1e-9


@dataclass(frozen=True)
class FluidDrift:
    """
    Drift at one state: `velocity` is x', `face` the classes held at zero,
    `zero_set` all classes at zero, `service` the rates D' applied per class
    and `h_bound` the Lyapunov drift bound over the classes off the face.
    `boundary_drift` maps each class at zero to its unconstrained drift.
    """

    velocity: np.ndarray
    face: FrozenSet[int]
    zero_set: FrozenSet[int]
    service: np.ndarray
    h_bound: float
    boundary_drift: Dict[int, float] = field(default_factory=dict)

    @property
    def face_mask(self) -> int:
        return sum(1 << r for r in self.face)


def _spare_rates(region: CapacityRegion, lam: np.ndarray) -> np.ndarray:
    """Largest rate each class could take on its own from the capacity PF leaves idle"""
    slack = np.clip(region.slack(lam), 0.0, None)
    with np.errstate(divide="ignore"):
        ratios = np.where(region.A > 0, slack[:, None] / np.where(region.A > 0, region.A, 1.0), np.inf)
    return ratios.min(axis=0)


def _held_service(model: TrafficModel, lam: np.ndarray, held: List[int]) -> np.ndarray:
    """Service rates d on held classes balancing their inflow: (I - P^T_HH)(mu d)_H = nu_bar_H + P^T_H,rest (mu lam)_rest"""
    rest = [r for r in range(model.num_classes) if r not in held]
    P = model.P
    inflow = model.nu_bar[held] + P[np.ix_(rest, held)].T @ (model.mu[rest] * lam[rest])
    work = np.linalg.solve(np.eye(len(held)) - P[np.ix_(held, held)].T, inflow)
    return work / model.mu[held]


def _boundary_face(
    region: CapacityRegion, model: TrafficModel, lam: np.ndarray, zero: List[int]
) -> Tuple[List[int], np.ndarray, Dict[int, float]]:
    """
    Classes at zero whose unconstrained drift is nonpositive. The unconstrained
    drift of an empty class is mu_r (d_r - s_r): d balances its inflow while the
    held classes stay empty and s is the largest rate the region leaves idle
    for it. Classes with positive drift, or whose balancing service would
    overload a link, leave the face and the rest are tested again.
    """
    held = list(zero)
    drifts: Dict[int, float] = {}
    while held:
        d = _held_service(model, lam, held)
        trial = lam.copy()
        trial[held] = d
        over_links = region.slack(trial) < -settings.FEAS_TOL
        unconstrained = model.mu[held] * (d - _spare_rates(region, lam)[held])
        drifts.update(zip(held, unconstrained.tolist()))
        leaving = (unconstrained > settings.FEAS_TOL) | np.any(region.A[np.ix_(over_links, held)] > 0, axis=0)
        if not np.any(leaving):
            return held, d, drifts
        held = [r for r, gone in zip(held, leaving) if not gone]
    return [], np.zeros(0), drifts


def _drift_bound(model: TrafficModel, lam: np.ndarray, face: List[int]) -> float:
    support = [r for r in range(model.num_classes) if r not in face]
    if not support:
        return 0.0
    nu = model.nu[support]
    if np.any(nu == 0):
        return -math.inf
    nu_tilde, P_tilde, _ = reduce_routing(model.nu_bar, model.P, face)
    with np.errstate(divide="ignore"):
        u = np.log(lam[support] / model.rho[support])
    flow = nu * np.exp(u)
    balance = nu_tilde - (flow - P_tilde.T @ flow)
    # empty classes leaving the face have u = -inf and positive inflow
    finite = np.isfinite(u)
    if np.any(~finite & (balance > 0)):
        return -math.inf
    return float(u[finite] @ balance[finite])


def fluid_drift(region: CapacityRegion, model: TrafficModel, x: Sequence[float]) -> FluidDrift:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.num_classes,) or region.num_classes != model.num_classes:
        raise InvalidInputError(f"state of shape {x.shape} does not match {model.num_classes} classes")
    if np.any(x < 0):
        raise InvalidInputError("fluid states must be nonnegative")

    zero_mask = x <= settings.FACE_EPS
    zero = [int(r) for r in np.flatnonzero(zero_mask)]
    lam = np.array(pf_allocate(region, np.where(zero_mask, 0.0, x)).rates)

    held, held_service, boundary = _boundary_face(region, model, lam, zero)
    service = lam.copy()
    service[held] = held_service

    flow = model.mu * service
    velocity = model.nu_bar + model.P.T @ flow - flow
    velocity[held] = 0.0

    return FluidDrift(
        velocity=velocity,
        face=frozenset(held),
        zero_set=frozenset(zero),
        service=service,
        h_bound=_drift_bound(model, lam, held),
        boundary_drift=boundary,
    )


@dataclass(frozen=True, eq=False)
class FluidTrajectory:
    region: CapacityRegion
    model: TrafficModel
    step: float
    times: np.ndarray
    states: np.ndarray
    faces: Tuple[FrozenSet[int], ...]
    velocities: np.ndarray
    h_bounds: np.ndarray
    cumulative_service: np.ndarray

    @property
    def rate_scale(self) -> float:
        return float(max(np.max(self.model.nu_bar), np.max(self.model.mu * self.region.max_rates())))

    def face_masks(self) -> List[int]:
        return [sum(1 << r for r in face) for face in self.faces]

    def bookkeeping_residual(self) -> float:
        """max over the grid of |x(t) - x(0) - nu_bar t + mu D(t) - P^T (mu D(t))|"""
        work = self.cumulative_service * self.model.mu
        expected = self.states[0] + np.outer(self.times, self.model.nu_bar) - work + work @ self.model.P
        return float(np.max(np.abs(self.states - expected)))

    def lyapunov_values(self, ctx: LyapunovContext) -> np.ndarray:
        return np.array([lyapunov_value(ctx, x) for x in self.states])

    def to_frame(self, ctx: Optional[LyapunovContext] = None) -> pd.DataFrame:
        frame = pd.DataFrame(self.states, columns=[f"x_{r + 1}" for r in range(self.states.shape[1])])
        frame.insert(0, "t", self.times)
        frame["L"] = self.lyapunov_values(ctx) if ctx is not None else np.nan
        frame["h_bound"] = self.h_bounds
        frame["face"] = self.face_masks()
        return frame


class EulerIntegrator:
    """Explicit Euler with projection onto the orthant and step halving across faces"""

    def __init__(self, region: CapacityRegion, model: TrafficModel, max_halvings: Optional[int] = None):
        self.region = region
        self.model = model
        self.max_halvings = settings.MAX_STEP_HALVINGS if max_halvings is None else max_halvings

    def advance(self, x: np.ndarray, D: np.ndarray, dt: float, depth: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        drift = fluid_drift(self.region, self.model, x)
        trial = x + dt * drift.velocity
        clip = np.clip(-trial, 0.0, None)

        if np.any(clip > OVERSHOOT_TOL):
            landed = fluid_drift(self.region, self.model, np.maximum(trial, 0.0))
            flipped = (clip > OVERSHOOT_TOL) & (landed.velocity > 0)
            if np.any(flipped):
                if depth >= self.max_halvings:
                    raise FluidStepError(
                        f"step {dt:.3e} still overshoots classes {np.flatnonzero(flipped).tolist()} "
                        f"by {clip[flipped].max():.3e} after {depth} halvings"
                    )
                x, D = self.advance(x, D, dt / 2, depth + 1)
                return self.advance(x, D, dt / 2, depth + 1)

        # projected mass is service that never happened
        return np.maximum(trial, 0.0), D + dt * drift.service - clip / self.model.mu


def integrate(
    region: CapacityRegion,
    model: TrafficModel,
    x0: Sequence[float],
    T: float,
    h_step: Optional[float] = None,
    stop_level: Optional[float] = None,
    ctx: Optional[LyapunovContext] = None,
) -> FluidTrajectory:
    """
    Integrate on the grid k * h_step up to T. With `stop_level`, integration
    also stops at the first grid point where L(x) <= stop_level.
    """
    h = settings.H_STEP if h_step is None else float(h_step)
    x = np.asarray(x0, dtype=float)
    if not h > 0:
        raise InvalidInputError(f"step must be positive, got {h}")
    if not T >= 0:
        raise InvalidInputError(f"horizon must be nonnegative, got {T}")
    if x.shape != (model.num_classes,) or np.any(x < 0):
        raise InvalidInputError(f"initial state {x.tolist()} is not a nonnegative vector over {model.num_classes} classes")
    if stop_level is not None and ctx is None:
        ctx = LyapunovContext.from_model(region, model)

    integrator = EulerIntegrator(region, model)
    D = np.zeros(model.num_classes)
    steps = int(math.ceil(T / h - 1e-12))

    times, states, faces, velocities, bounds, services = [], [], [], [], [], []
    for k in range(steps + 1):
        drift = fluid_drift(region, model, x)
        times.append(k * h)
        states.append(x.copy())
        faces.append(drift.face)
        velocities.append(drift.velocity)
        bounds.append(drift.h_bound)
        services.append(D.copy())

        if k == steps:
            break
        if stop_level is not None and lyapunov_value(ctx, x) <= stop_level:
            break
        x, D = integrator.advance(x, D, h)

    logger.info(f"Fluid trajectory integrated to t={times[-1]:.4g} in {len(times) - 1} steps of {h:g}")
    return FluidTrajectory(
        region=region,
        model=model,
        step=h,
        times=np.array(times),
        states=np.array(states),
        faces=tuple(faces),
        velocities=np.array(velocities),
        h_bounds=np.array(bounds),
        cumulative_service=np.array(services),
    )


@dataclass(frozen=True)
class DescentReport:
    monotone: bool
    t_half: float
    worst_increase: float
    tolerance: float
    final_value: float


def descent_report(traj: FluidTrajectory, ctx: LyapunovContext, upper_bound: Optional[float] = None) -> DescentReport:
    """Is L nonincreasing along the grid, and when does it first halve"""
    if not ctx.stable:
        raise InvalidInputError("descent is only claimed for loads strictly inside the capacity region")
    if upper_bound is None:
        upper_bound = norm_bounds_certificate(ctx).upper

    values = traj.lyapunov_values(ctx)
    tolerance = 10.0 * traj.step * traj.rate_scale * upper_bound
    increases = np.diff(values)
    worst = float(increases.max()) if len(increases) else 0.0

    if values[0] <= 0:
        t_half = 0.0
    else:
        reached = np.flatnonzero(values <= values[0] / 2)
        t_half = float(traj.times[reached[0]]) if reached.size else math.inf

    return DescentReport(
        monotone=worst <= tolerance,
        t_half=t_half,
        worst_increase=worst,
        tolerance=tolerance,
        final_value=float(values[-1]),
    )
