"""
Stationary laws on a lattice box: closed forms for the reversible
allocators, an exact generator solve for any allocator, detailed-balance
checks and distances between laws.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

from fairshare.allocators import BalanceTable, lattice_points
from fairshare.capacity import CapacityRegion
from fairshare.config import settings
from fairshare.errors import (
    DimensionError,
    InvalidInputError,
    NumericalError,
    ReducibleChainError,
    ResourceBudgetError,
)
from fairshare.lyapunov import LyapunovContext, lyapunov_value
from fairshare.traffic import TrafficModel

logger = logging.getLogger(__name__)

Allocation = Callable[[Sequence[float]], np.ndarray]

MAX_POWER_ITERATIONS = 1_000_000
SOLVE_RESIDUAL = 1e-10


@dataclass(frozen=True, eq=False)
class StateDistribution:
    """
    Probability mass over [0, N]^R stored as an array of shape (N + 1,) * R.

    `log_weights` are the unnormalized log masses and `log_normalizer` their
    logsumexp; `leakage` is the share of observed mass that fell outside the
    box (empirical laws only).
    """

    N: int
    num_classes: int
    mass: np.ndarray
    log_weights: np.ndarray
    log_normalizer: float
    leakage: float = field(default=0.0)

    @classmethod
    def from_log_weights(cls, log_weights: np.ndarray, leakage: float = 0.0) -> "StateDistribution":
        log_weights = np.asarray(log_weights, dtype=float)
        R = log_weights.ndim
        N = log_weights.shape[0] - 1
        log_z = float(logsumexp(log_weights))
        if not math.isfinite(log_z):
            raise NumericalError("stationary weights vanish on the whole box")
        mass = np.exp(log_weights - log_z)
        mass /= mass.sum()
        return cls(N=N, num_classes=R, mass=mass, log_weights=log_weights, log_normalizer=log_z, leakage=leakage)

    @classmethod
    def from_mass(cls, mass: np.ndarray, leakage: float = 0.0) -> "StateDistribution":
        mass = np.clip(np.asarray(mass, dtype=float), 0.0, None)
        with np.errstate(divide="ignore"):
            return cls.from_log_weights(np.log(mass), leakage=leakage)

    @classmethod
    def point_mass(cls, N: int, R: int, x: Sequence[int]) -> "StateDistribution":
        mass = np.zeros((N + 1,) * R)
        mass[tuple(int(v) for v in x)] = 1.0
        return cls.from_mass(mass)

    def probability(self, x: Sequence[int]) -> float:
        x = tuple(int(v) for v in x)
        if any(v < 0 or v > self.N for v in x):
            return 0.0
        return float(self.mass[x])

    def marginal(self, r: int) -> np.ndarray:
        axes = tuple(a for a in range(self.num_classes) if a != r)
        return self.mass.sum(axis=axes) if axes else np.array(self.mass)

    def embedded(self, N: int) -> "StateDistribution":
        """The same law on the larger box [0, N]^R"""
        if N < self.N:
            raise InvalidInputError(f"cannot embed a box of side {self.N} into side {N}")
        if N == self.N:
            return self
        mass = np.zeros((N + 1,) * self.num_classes)
        mass[(slice(0, self.N + 1),) * self.num_classes] = self.mass
        return StateDistribution.from_mass(mass, leakage=self.leakage)

    def to_frame(self) -> pd.DataFrame:
        points = lattice_points(self.N, self.num_classes)
        frame = pd.DataFrame(points, columns=[f"x_{r + 1}" for r in range(self.num_classes)])
        frame["mass"] = self.mass[tuple(points.T)]
        return frame


def _box_log_weights(N: int, R: int, weight: Callable[[np.ndarray], float]) -> np.ndarray:
    log_weights = np.full((N + 1,) * R, -np.inf)
    for x in lattice_points(N, R):
        log_weights[tuple(x)] = weight(x)
    return log_weights


def pf_prime_stationary(region: CapacityRegion, ctx: LyapunovContext, N: int) -> StateDistribution:
    """Law proportional to exp(-L(x)) on [0, N]^R"""
    if not ctx.stable:
        logger.warning(f"⚠️ Loads {ctx.rho.tolist()} are not interior; box law is not a truncated stationary law")
    if N < 0:
        raise InvalidInputError(f"box side must be nonnegative, got {N}")
    log_weights = _box_log_weights(N, region.num_classes, lambda x: -lyapunov_value(ctx, x))
    return StateDistribution.from_log_weights(log_weights)


def bf_stationary(table: BalanceTable, ctx: LyapunovContext, N: int) -> StateDistribution:
    """Law proportional to exp(-phi(x) + sum x_r log rho_r) on [0, N]^R"""
    if N > table.N or N < 0:
        raise InvalidInputError(f"box side {N} not covered by a balance table of side {table.N}")
    if not ctx.stable:
        logger.warning(f"⚠️ Loads {ctx.rho.tolist()} are not interior; box law is not a truncated stationary law")

    R = table.num_classes
    points = lattice_points(N, R)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_rho = np.log(ctx.rho)
        drift = np.where(points > 0, points * log_rho, 0.0).sum(axis=1)
    log_weights = np.full((N + 1,) * R, -np.inf)
    log_weights[tuple(points.T)] = -table.phi[tuple(points.T)] + drift
    return StateDistribution.from_log_weights(log_weights)


def detailed_balance_residual(
    dist: StateDistribution, region: CapacityRegion, allocator: Allocation, model: TrafficModel
) -> float:
    """
    max over box edges (x, x + e_r) of
    |pi(x + e_r) mu_r lam_r(x + e_r) - pi(x) nu_r| / max(pi(x) nu_r, floor)
    """
    if model.has_routing:
        raise InvalidInputError("detailed balance is checked for models without routing")
    if dist.num_classes != region.num_classes or model.num_classes != region.num_classes:
        raise DimensionError("distribution, region and model disagree on the number of classes")

    floor = settings.RESIDUAL_FLOOR
    with np.errstate(divide="ignore"):
        log_nu = np.log(model.nu)
    worst = 0.0
    for x in lattice_points(dist.N, dist.num_classes):
        for r in range(dist.num_classes):
            if x[r] == dist.N:
                continue
            up = x.copy()
            up[r] += 1
            service = model.mu[r] * float(allocator(up)[r])
            log_down = dist.log_weights[tuple(up)] + math.log(service) if service > 0 else -math.inf
            log_up = dist.log_weights[tuple(x)] + log_nu[r]

            if math.isinf(log_up) and math.isinf(log_down):
                continue
            if math.isinf(log_up):
                residual = math.exp(log_down - dist.log_normalizer) / floor
            else:
                residual = abs(math.expm1(log_down - log_up))
            worst = max(worst, residual)
    return worst


def _generator(allocator: Allocation, model: TrafficModel, N: int) -> sparse.csr_matrix:
    R = model.num_classes
    points = lattice_points(N, R)
    shape = (N + 1,) * R
    rows, cols, vals = [], [], []

    def add(i: int, target: np.ndarray, rate: float) -> None:
        if rate > 0 and np.all(target >= 0) and np.all(target <= N):
            rows.append(i)
            cols.append(int(np.ravel_multi_index(tuple(target), shape)))
            vals.append(rate)

    exits = model.exit_probabilities
    for i, x in enumerate(points):
        lam = allocator(x)
        for r in range(R):
            arrive = x.copy()
            arrive[r] += 1
            add(i, arrive, model.nu_bar[r])

            if x[r] == 0:
                continue
            completion = model.mu[r] * float(lam[r])
            leave = x.copy()
            leave[r] -= 1
            add(i, leave, completion * exits[r])
            for s in np.flatnonzero(model.P[r]):
                if s == r:
                    continue
                move = leave.copy()
                move[s] += 1
                add(i, move, completion * model.P[r, s])

    n = len(points)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def truncated_exact(
    region: CapacityRegion, allocator: Allocation, model: TrafficModel, N: int
) -> StateDistribution:
    """Stationary law of the chain restricted to [0, N]^R, box-leaving moves suppressed"""
    R = model.num_classes
    if region.num_classes != R:
        raise DimensionError(f"region has {region.num_classes} classes, model has {R}")
    n = (N + 1) ** R
    if n > settings.EXACT_STATE_BUDGET:
        raise ResourceBudgetError(f"{n} states exceed the exact-solve budget {settings.EXACT_STATE_BUDGET}")

    off = _generator(allocator, model, N)
    components, _ = connected_components(off, directed=True, connection="strong")
    if components != 1:
        raise ReducibleChainError(f"truncated chain on [0, {N}]^{R} has {components} communicating classes")

    out_rates = np.asarray(off.sum(axis=1)).ravel()
    Q = off - sparse.diags(out_rates)

    if n <= settings.DENSE_STATE_LIMIT:
        system = Q.T.toarray()
        system[-1, :] = 1.0
        rhs = np.zeros(n)
        rhs[-1] = 1.0
        pi = np.linalg.solve(system, rhs)
    else:
        pi = _power_iteration(Q, out_rates)

    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = float(np.max(np.abs(Q.T @ pi)))
    if residual > SOLVE_RESIDUAL:
        raise NumericalError(f"stationary solve residual {residual:.3e} above {SOLVE_RESIDUAL:g}")

    logger.info(f"✅ Exact stationary law on {n} states, residual {residual:.2e}")
    return StateDistribution.from_mass(pi.reshape((N + 1,) * R))


def _power_iteration(Q: sparse.spmatrix, out_rates: np.ndarray) -> np.ndarray:
    n = Q.shape[0]
    uniform_rate = float(out_rates.max()) * 1.05
    kernel = (sparse.identity(n) + Q / uniform_rate).T.tocsr()
    pi = np.full(n, 1.0 / n)
    for _ in range(MAX_POWER_ITERATIONS):
        nxt = kernel @ pi
        if np.abs(nxt - pi).sum() < settings.POWER_ITER_TOL:
            return nxt
        pi = nxt
    raise NumericalError(f"power iteration did not converge in {MAX_POWER_ITERATIONS} steps")


def total_variation(d1: StateDistribution, d2: StateDistribution) -> float:
    if d1.N != d2.N or d1.num_classes != d2.num_classes:
        raise InvalidInputError(f"box mismatch: [0, {d1.N}]^{d1.num_classes} vs [0, {d2.N}]^{d2.num_classes}")
    return float(0.5 * np.abs(d1.mass - d2.mass).sum())
