import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from fairshare.capacity import CapacityRegion
from fairshare.config import settings
from fairshare.errors import DimensionError, InvalidInputError, NumericalError
from fairshare.lyapunov import LyapunovContext, lyapunov_value
from fairshare.models import TransitionKind
from fairshare.stationary import StateDistribution
from fairshare.traffic import TrafficModel

logger = logging.getLogger(__name__)

Allocation = Callable[[Sequence[float]], np.ndarray]

DRAW_BATCH = 65_536
INITIAL_CAPACITY = 1024
OUTSIDE = -1


def replication_rng(seed: int, replication: int = 0) -> np.random.Generator:
    """Counter-based stream for replication `replication` of a seeded experiment"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replication)])))


@dataclass(frozen=True)
class StateTransitions:
    """Outgoing moves of one state: cumulative rates and (kind, from, to) per move"""

    cumulative: np.ndarray
    kinds: Tuple[int, ...]
    sources: Tuple[int, ...]
    targets: Tuple[int, ...]

    @property
    def total(self) -> float:
        return float(self.cumulative[-1]) if len(self.cumulative) else 0.0

    def rates(self) -> np.ndarray:
        return np.diff(self.cumulative, prepend=0.0)


@dataclass(frozen=True, eq=False)
class SimulationRun:
    """
    One simulated path. Event k happens at times[k] and leaves the system in
    states[k + 1]; states[0] is the initial state at time 0.
    """

    allocator: str
    horizon: float
    seed: int
    replication: int
    times: np.ndarray
    kinds: np.ndarray
    from_class: np.ndarray
    to_class: np.ndarray
    states: np.ndarray

    @property
    def num_events(self) -> int:
        return len(self.times)

    @property
    def num_classes(self) -> int:
        return self.states.shape[1]

    @property
    def initial_state(self) -> np.ndarray:
        return self.states[0]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, t: float) -> np.ndarray:
        return self.states[int(np.searchsorted(self.times, t, side="right"))]

    def flow_counts(self) -> Dict[str, np.ndarray]:
        R = self.num_classes

        def count(kind: TransitionKind, column: np.ndarray) -> np.ndarray:
            picked = column[(self.kinds == kind) & (column >= 0)]
            return np.bincount(picked, minlength=R)

        return {
            "arrivals": count(TransitionKind.ARRIVAL, self.to_class),
            "routed_in": count(TransitionKind.ROUTE, self.to_class),
            "departures": count(TransitionKind.DEPARTURE, self.from_class),
            "routed_out": count(TransitionKind.ROUTE, self.from_class),
        }

    def conservation_gap(self) -> np.ndarray:
        """arrivals + routed in - departures - routed out - (final - initial), per class"""
        f = self.flow_counts()
        net = f["arrivals"] + f["routed_in"] - f["departures"] - f["routed_out"]
        return net - (self.final_state - self.initial_state)

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "time": self.times,
                "kind": [TransitionKind(k).name.lower() for k in self.kinds],
                "from_class": self.from_class,
                "to_class": self.to_class,
            }
        )


class Simulator:
    """
    Exact event simulation of the population process: class-r arrivals at
    rate nu_bar_r, class-r completions at rate mu_r lam_r(x) routed to s with
    probability P[r, s] or out of the network otherwise.
    """

    def __init__(self, model: TrafficModel, region: CapacityRegion, allocator: Allocation):
        if region.num_classes != model.num_classes:
            raise DimensionError(f"region has {region.num_classes} classes, model has {model.num_classes}")
        self.model = model
        self.region = region
        self.allocator = allocator
        self._transitions: Dict[Tuple[int, ...], StateTransitions] = {}

    def transitions(self, x: Sequence[int]) -> StateTransitions:
        key = tuple(int(v) for v in x)
        cached = self._transitions.get(key)
        if cached is not None:
            return cached

        model = self.model
        rates, kinds, sources, targets = [], [], [], []
        for r in np.flatnonzero(model.nu_bar > 0):
            rates.append(model.nu_bar[r])
            kinds.append(int(TransitionKind.ARRIVAL))
            sources.append(OUTSIDE)
            targets.append(int(r))

        lam = self.allocator(key)
        exits = model.exit_probabilities
        for r in np.flatnonzero(np.asarray(key) > 0):
            completion = model.mu[r] * float(lam[r])
            if completion <= 0:
                continue
            if exits[r] > 0:
                rates.append(completion * exits[r])
                kinds.append(int(TransitionKind.DEPARTURE))
                sources.append(int(r))
                targets.append(OUTSIDE)
            for s in np.flatnonzero(model.P[r]):
                rates.append(completion * model.P[r, s])
                kinds.append(int(TransitionKind.ROUTE))
                sources.append(int(r))
                targets.append(int(s))

        table = StateTransitions(
            cumulative=np.cumsum(np.asarray(rates, dtype=float)),
            kinds=tuple(kinds),
            sources=tuple(sources),
            targets=tuple(targets),
        )
        if len(self._transitions) >= settings.ALLOC_CACHE_SIZE:
            self._transitions.clear()
        self._transitions[key] = table
        return table

    def run(
        self,
        T: float,
        seed: int,
        x0: Optional[Sequence[int]] = None,
        replication: int = 0,
    ) -> SimulationRun:
        if not T > 0:
            raise InvalidInputError(f"horizon must be positive, got {T}")
        R = self.model.num_classes
        x = [0] * R if x0 is None else [int(v) for v in x0]
        if len(x) != R or min(x) < 0:
            raise InvalidInputError(f"initial state {x} is not a population vector over {R} classes")

        rng = replication_rng(seed, replication)
        capacity = INITIAL_CAPACITY
        times = np.empty(capacity)
        kinds = np.empty(capacity, dtype=np.int8)
        from_class = np.empty(capacity, dtype=np.int64)
        to_class = np.empty(capacity, dtype=np.int64)
        states = np.empty((capacity + 1, R), dtype=np.int64)
        states[0] = x

        gaps = rng.standard_exponential(DRAW_BATCH)
        picks = rng.random(DRAW_BATCH)
        pos = 0
        n = 0
        t = 0.0

        cache = self._transitions
        while True:
            table = cache.get(tuple(x)) or self.transitions(x)
            total = table.total
            if total <= 0:
                break
            if pos == DRAW_BATCH:
                gaps = rng.standard_exponential(DRAW_BATCH)
                picks = rng.random(DRAW_BATCH)
                pos = 0
            t += gaps[pos] / total
            if t > T:
                break
            idx = int(np.searchsorted(table.cumulative, picks[pos] * total, side="right"))
            idx = min(idx, len(table.kinds) - 1)
            pos += 1

            src, dst = table.sources[idx], table.targets[idx]
            if src != OUTSIDE:
                if x[src] == 0:
                    raise NumericalError(f"completion drawn from empty class {src} at state {x}")
                x[src] -= 1
            if dst != OUTSIDE:
                x[dst] += 1

            if n == capacity:
                capacity *= 2
                times = np.resize(times, capacity)
                kinds = np.resize(kinds, capacity)
                from_class = np.resize(from_class, capacity)
                to_class = np.resize(to_class, capacity)
                states = np.resize(states, (capacity + 1, R))
            times[n] = t
            kinds[n] = table.kinds[idx]
            from_class[n] = src
            to_class[n] = dst
            states[n + 1] = x
            n += 1

        describe = getattr(self.allocator, "describe", None)
        logger.debug(f"simulated {n} events up to T={T} (seed {seed}, replication {replication})")
        return SimulationRun(
            allocator=describe() if describe else "custom",
            horizon=float(T),
            seed=int(seed),
            replication=int(replication),
            times=times[:n].copy(),
            kinds=kinds[:n].copy(),
            from_class=from_class[:n].copy(),
            to_class=to_class[:n].copy(),
            states=states[: n + 1].copy(),
        )


def simulate(
    model: TrafficModel,
    region: CapacityRegion,
    allocator: Allocation,
    T: float,
    seed: int,
    x0: Optional[Sequence[int]] = None,
    replication: int = 0,
) -> SimulationRun:
    return Simulator(model, region, allocator).run(T, seed, x0=x0, replication=replication)


def occupancy(
    run: SimulationRun,
    burn_in: float = 0.0,
    box: Optional[int] = None,
    class_map: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, float]:
    """
    Time share spent in each state of [0, box]^R after burn_in, and the share
    spent outside the box; the two add up to 1.
    """
    if not 0 <= burn_in < run.horizon:
        raise InvalidInputError(f"burn-in {burn_in} leaves no observation time before {run.horizon}")
    box = settings.RECORD_BOX if box is None else int(box)

    states = run.states
    if class_map is not None:
        class_map = np.asarray(class_map, dtype=np.int64)
        states = np.stack([states[:, class_map == r].sum(axis=1) for r in range(class_map.max() + 1)], axis=1)
    R = states.shape[1]

    starts = np.concatenate([[0.0], run.times])
    ends = np.concatenate([run.times, [run.horizon]])
    durations = np.clip(ends - np.maximum(starts, burn_in), 0.0, None)
    observed = run.horizon - burn_in

    inside = np.all(states <= box, axis=1)
    flat = np.ravel_multi_index(tuple(states[inside].T), (box + 1,) * R)
    mass = np.bincount(flat, weights=durations[inside], minlength=(box + 1) ** R) / observed
    leakage = float(durations[~inside].sum() / observed)
    return mass.reshape((box + 1,) * R), leakage


def empirical_distribution(
    run: SimulationRun,
    burn_in: float = 0.0,
    box: Optional[int] = None,
    class_map: Optional[Sequence[int]] = None,
) -> StateDistribution:
    """Time-weighted occupancy law on the recording box, with leakage recorded"""
    mass, leakage = occupancy(run, burn_in=burn_in, box=box, class_map=class_map)
    if leakage > settings.LEAKAGE_WARN:
        logger.warning(f"⚠️ {leakage:.2%} of the observed time was spent outside the recording box")
    return StateDistribution.from_mass(mass, leakage=leakage)


@dataclass(frozen=True)
class ScaledPath:
    """z^-1 X(z t) sampled on a uniform grid of [0, T]"""

    scale: float
    times: np.ndarray
    states: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.states, columns=[f"x_{r + 1}" for r in range(self.states.shape[1])])
        frame.insert(0, "t", self.times)
        return frame


def scaled_path(
    model: TrafficModel,
    region: CapacityRegion,
    allocator: Allocation,
    z: float,
    x0_direction: Sequence[float],
    T: float,
    seed: int,
    replication: int = 0,
    grid_points: Optional[int] = None,
) -> ScaledPath:
    if z < 1:
        raise InvalidInputError(f"scale must be at least 1, got {z}")
    grid_points = grid_points or settings.PATH_GRID_POINTS
    x0 = np.round(z * np.asarray(x0_direction, dtype=float)).astype(np.int64)
    run = simulate(model, region, allocator, z * T, seed, x0=x0, replication=replication)

    grid = np.linspace(0.0, T, grid_points + 1)
    idx = np.searchsorted(run.times, z * grid, side="right")
    return ScaledPath(scale=float(z), times=grid, states=run.states[idx] / z)


def sup_distance(path: ScaledPath, times: np.ndarray, states: np.ndarray) -> float:
    """Uniform distance between a rescaled path and a reference trajectory interpolated onto its grid"""
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    reference = np.column_stack(
        [np.interp(path.times, times, states[:, r]) for r in range(states.shape[1])]
    )
    return float(np.max(np.abs(path.states - reference)))


@dataclass(frozen=True)
class GrowthDiagnostic:
    slope: float
    r_squared: float


def lyapunov_growth(run: SimulationRun, ctx: LyapunovContext, points: int = 200) -> GrowthDiagnostic:
    """Least-squares line through L(X(t)) sampled on a uniform grid"""
    grid = np.linspace(0.0, run.horizon, points)
    values = np.array([lyapunov_value(ctx, run.state_at(t)) for t in grid])
    fit = stats.linregress(grid, values)
    return GrowthDiagnostic(slope=float(fit.slope), r_squared=float(fit.rvalue**2))
