import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import digamma, xlogy

from fairshare.allocators import BalanceTable, bf_rates, build_balance_table
from fairshare.capacity import CapacityRegion
from fairshare.errors import InvalidInputError, NumericalError
from fairshare.pf_solver import legendre, pf_allocate, pf_gradient
from fairshare.traffic import TrafficModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LyapunovContext:
    """Region and loads defining L(x) = legendre(x) - sum_r x_r log rho_r"""

    region: CapacityRegion
    rho: np.ndarray
    stable: bool = field(init=False, default=False)

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (self.region.num_classes,):
            raise InvalidInputError(f"loads have shape {rho.shape}, region has {self.region.num_classes} classes")
        if np.any(rho < 0) or not np.all(np.isfinite(rho)):
            raise InvalidInputError("loads must be finite and nonnegative")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "stable", self.region.in_interior(rho))

    @classmethod
    def from_model(cls, region: CapacityRegion, model: TrafficModel) -> "LyapunovContext":
        return cls(region, model.rho)


def lyapunov_value(ctx: LyapunovContext, x: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    busy = x > 0
    if np.any(ctx.rho[busy] == 0):
        return math.inf
    return legendre(ctx.region, x) - float(np.sum(x[busy] * np.log(ctx.rho[busy])))


@dataclass(frozen=True)
class NormBounds:
    lower: float
    upper: float
    samples: int


def norm_bounds_certificate(ctx: LyapunovContext, samples: int = 1000, seed: int = 0) -> NormBounds:
    """
    min and max of L over random points of the unit sup-norm sphere in the
    nonnegative orthant plus every unit vector. By homogeneity they bound
    L(x) / ||x||_inf along every sampled ray.
    """
    if not ctx.stable:
        raise InvalidInputError("norm bounds only hold for loads strictly inside the capacity region")

    R = ctx.region.num_classes
    rng = np.random.Generator(np.random.Philox(seed))
    points = rng.random((samples, R))
    points[np.arange(samples), rng.integers(0, R, size=samples)] = 1.0
    directions = np.vstack([np.eye(R), points])

    values = np.array([lyapunov_value(ctx, y) for y in directions])
    bounds = NormBounds(lower=float(values.min()), upper=float(values.max()), samples=len(directions))
    if not bounds.lower > 0:
        raise NumericalError(f"L is not positive on the sphere (min {bounds.lower:.6g}) although loads are interior")
    return bounds


def harmonic_remainder(x: Sequence[int]) -> float:
    """sum over x_r > 0 of the harmonic numbers H(x_r)"""
    x = np.asarray(x, dtype=float)
    busy = x[x > 0]
    return float(np.sum(digamma(busy + 1.0) + np.euler_gamma))


@dataclass(frozen=True)
class SandwichReport:
    """Worst violations of legendre(x) <= phi(x) <= legendre(x) + r(x) over a box"""

    lower_violation: float
    upper_violation: float
    states: int

    def holds(self, tol: float = 1e-7) -> bool:
        return self.lower_violation <= tol and self.upper_violation <= tol


def sandwich_report(table: BalanceTable) -> SandwichReport:
    lower = -math.inf
    upper = -math.inf
    points = table.points()
    for x in points:
        delta = legendre(table.region, x)
        phi = float(table.phi[tuple(x)])
        lower = max(lower, delta - phi)
        upper = max(upper, phi - delta - harmonic_remainder(x))
    return SandwichReport(lower_violation=lower, upper_violation=upper, states=len(points))


def _check_step(x: np.ndarray, h: np.ndarray) -> None:
    if x.shape != h.shape:
        raise InvalidInputError(f"x has shape {x.shape} but h has {h.shape}")
    if np.any(x <= 0):
        raise InvalidInputError("x must be strictly positive")
    if np.any(x + h < 0):
        raise InvalidInputError("x + h must be nonnegative")


def second_order_residual(region: CapacityRegion, x: Sequence[float], h: Sequence[float]) -> float:
    """legendre(x + h) - legendre(x) - <h, grad(x)> - sum h_s^2 / x_s, never positive"""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    _check_step(x, h)
    first_order = legendre(region, x) + float(h @ pf_gradient(region, x))
    return legendre(region, x + h) - first_order - float(np.sum(h**2 / x))


def sharp_second_order_residual(region: CapacityRegion, x: Sequence[float], h: Sequence[float]) -> float:
    """Same as second_order_residual with the entropy term sum (x+h) log(1 + h/x) - h"""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    _check_step(x, h)
    first_order = legendre(region, x) + float(h @ pf_gradient(region, x))
    entropy = float(np.sum(xlogy(x + h, (x + h) / x) - h))
    return legendre(region, x + h) - first_order - entropy


@dataclass(frozen=True)
class ScalingRow:
    """
    Large-population behaviour of the balance function along n * x.

    gap = phi(n x) / n - legendre(x) lies in [0, bound] with
    bound = r(n x) / n. ld_excess = -(1/n) log pi_BF(n x) - L(x) - log(Z) / n,
    read from the normalized BF law on the table box with Z its total weight,
    lies in the same window.
    """

    n: int
    gap: float
    bound: float
    ld_excess: float
    log_normalizer: float
    bf_gap: float

    @property
    def contained(self) -> bool:
        return -1e-9 <= self.gap <= self.bound + 1e-9

    @property
    def ld_contained(self) -> bool:
        return -1e-9 <= self.ld_excess <= self.bound + 1e-9


def ld_convergence_report(
    region: CapacityRegion,
    ctx: LyapunovContext,
    x: Sequence[int],
    n_list: Sequence[int],
    table: Optional[BalanceTable] = None,
) -> List[ScalingRow]:
    # stationary builds on this module
    from fairshare.stationary import bf_stationary

    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or not np.any(x > 0):
        raise InvalidInputError("direction must be nonnegative and nonzero")
    n_list = sorted(int(n) for n in n_list)
    top = int(math.ceil(max(n_list) * x.max()))
    if table is None or table.N < top:
        table = build_balance_table(region, top)

    delta = legendre(region, x)
    pf_rates = np.array(pf_allocate(region, x).rates)
    law = bf_stationary(table, ctx, table.N)
    L_x = lyapunov_value(ctx, x)

    rows = []
    for n in n_list:
        nx = np.round(n * x).astype(np.int64)
        if not np.allclose(nx, n * x):
            raise InvalidInputError(f"{n} * x is not a lattice point")
        gap = table.value(nx) / n - delta
        p = law.probability(nx)
        log_pi = math.log(p) if p > 0 else -math.inf
        rows.append(
            ScalingRow(
                n=n,
                gap=gap,
                bound=harmonic_remainder(nx) / n,
                ld_excess=-log_pi / n - L_x - law.log_normalizer / n,
                log_normalizer=law.log_normalizer,
                bf_gap=float(np.max(np.abs(bf_rates(table, nx) - pf_rates))),
            )
        )
    logger.info(f"Scaling report along x={x.tolist()} for n in {n_list}")
    return rows
