import functools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from fairshare.capacity import CapacityRegion
from fairshare.config import settings
from fairshare.errors import AllocatorError, FairshareError, InvalidInputError, ResourceBudgetError
from fairshare.models import AllocatorKind
from fairshare.pf_solver import alpha_fair_allocate, legendre, pf_allocate

logger = logging.getLogger(__name__)


def lattice_points(N: int, R: int) -> np.ndarray:
    """All points of [0, N]^R, one per row, in lexicographic order"""
    return np.indices((N + 1,) * R).reshape(R, -1).T


def _lattice_state(x: Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or not np.all(x == np.round(x)):
        raise InvalidInputError(f"state {x.tolist()} is not a lattice point")
    return x.astype(np.int64)


@dataclass(frozen=True, eq=False)
class BalanceTable:
    """
    Log balance function phi = -log psi over the box [0, N]^R.

    `phi` is an array of shape (N + 1,) * R indexed by the state; states off
    the box read as +inf.
    """

    region: CapacityRegion
    N: int
    phi: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.region.num_classes

    def covers(self, x: Sequence[int]) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= 0) and np.all(x <= self.N))

    def value(self, x: Sequence[int]) -> float:
        x = _lattice_state(x)
        if not self.covers(x):
            return math.inf
        return float(self.phi[tuple(x)])

    def perturbed(self, x: Sequence[int], delta: float) -> "BalanceTable":
        """Copy with phi(x) shifted by delta"""
        phi = np.array(self.phi)
        phi[tuple(_lattice_state(x))] += delta
        phi.setflags(write=False)
        return BalanceTable(self.region, self.N, phi)

    def points(self) -> np.ndarray:
        return lattice_points(self.N, self.num_classes)


def build_balance_table(region: CapacityRegion, N: int) -> BalanceTable:
    """
    Fill phi level by level in the total population.

    For a polyhedral region the defining infimum closes to
    phi(x) = min_l [log c_l - logsumexp_{r: A_lr > 0, x_r > 0}(log A_lr - phi(x - e_r))].
    """
    if N < 1:
        raise InvalidInputError(f"balance table needs N >= 1, got {N}")
    R = region.num_classes
    size = (N + 1) ** R
    if size > settings.TABLE_BUDGET:
        raise ResourceBudgetError(f"balance table of {size} entries exceeds budget {settings.TABLE_BUDGET}")

    with np.errstate(divide="ignore"):
        log_A = np.log(region.A)
    log_c = np.log(region.c)

    points = lattice_points(N, R)
    levels = points.sum(axis=1)
    phi = np.full((N + 1,) * R, np.inf)
    phi[(0,) * R] = 0.0

    for level in range(1, N * R + 1):
        X = points[levels == level]
        # -phi(x - e_r) for each class present, -inf otherwise
        neg_prev = np.full(X.shape, -np.inf)
        for r in range(R):
            present = X[:, r] > 0
            prev = X[present].copy()
            prev[:, r] -= 1
            neg_prev[present, r] = -phi[tuple(prev.T)]
        terms = log_A[None, :, :] + neg_prev[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            per_link = log_c[None, :] - logsumexp(terms, axis=2)
        phi[tuple(X.T)] = np.min(per_link, axis=1)

    phi.setflags(write=False)
    logger.info(f"✅ Balance table built: {region.describe()}, box N={N}, {size} entries")
    return BalanceTable(region, N, phi)


def bf_rates(table: BalanceTable, x: Sequence[int]) -> np.ndarray:
    """Balanced fair rates exp(phi(x - e_r) - phi(x)), zero for empty classes"""
    x = _lattice_state(x)
    if x.shape != (table.num_classes,):
        raise InvalidInputError(f"state has shape {x.shape}, table has {table.num_classes} classes")
    if not table.covers(x):
        raise AllocatorError(f"state {x.tolist()} outside balance table box [0, {table.N}]", state=x)

    rates = np.zeros(table.num_classes)
    here = table.phi[tuple(x)]
    for r in np.flatnonzero(x > 0):
        prev = x.copy()
        prev[r] -= 1
        rates[r] = math.exp(table.phi[tuple(prev)] - here)
    return rates


def pf_prime_rates(region: CapacityRegion, x: Sequence[int]) -> np.ndarray:
    """Modified PF rates exp(legendre(x) - legendre(x - e_r)), zero for empty classes"""
    x = _lattice_state(x)
    rates = np.zeros(region.num_classes)
    here = legendre(region, x)
    for r in np.flatnonzero(x > 0):
        prev = x.copy()
        prev[r] -= 1
        rates[r] = math.exp(here - legendre(region, prev))
    return rates


def characterization_report(table: BalanceTable) -> Tuple[float, float]:
    """
    Worst infeasibility of the BF rates over the box, and worst unused
    capacity (smallest link slack) at a nonzero state; both are 0 for an
    exact table.
    """
    worst_excess = 0.0
    worst_idle = 0.0
    for x in table.points()[1:]:
        slack = table.region.slack(bf_rates(table, x))
        worst_excess = max(worst_excess, float(-slack.min()))
        worst_idle = max(worst_idle, float(slack.min()))
    return worst_excess, worst_idle


def allocate(
    kind: Union[AllocatorKind, str],
    region: CapacityRegion,
    x: Sequence[float],
    table: Optional[BalanceTable] = None,
    w: Optional[Sequence[float]] = None,
    alpha: float = 1.0,
) -> np.ndarray:
    """Rates of the named allocator at state x"""
    kind = AllocatorKind(kind)
    if kind == AllocatorKind.PF:
        return np.array(pf_allocate(region, x).rates)
    if kind == AllocatorKind.ALPHA_FAIR:
        return np.array(alpha_fair_allocate(region, x, w=w, alpha=alpha).rates)
    if kind == AllocatorKind.PF_PRIME:
        return pf_prime_rates(region, x)
    if table is None:
        raise InvalidInputError("balanced fairness needs a balance table")
    if table.region is not region:
        raise InvalidInputError("balance table was built for another region")
    return bf_rates(table, x)


class Allocator:
    """Allocator bound to a region, memoized per state"""

    def __init__(
        self,
        kind: Union[AllocatorKind, str],
        region: CapacityRegion,
        table: Optional[BalanceTable] = None,
        w: Optional[Sequence[float]] = None,
        alpha: float = 1.0,
        cache_size: Optional[int] = None,
    ):
        self.kind = AllocatorKind(kind)
        self.region = region
        self.table = table
        self.w = None if w is None else np.asarray(w, dtype=float)
        self.alpha = float(alpha)
        if self.kind == AllocatorKind.BF and table is None:
            raise InvalidInputError("balanced fairness needs a balance table")
        self._cached = functools.lru_cache(maxsize=cache_size or settings.ALLOC_CACHE_SIZE)(self._compute)

    @property
    def num_classes(self) -> int:
        return self.region.num_classes

    def _compute(self, key: Tuple[float, ...]) -> np.ndarray:
        try:
            rates = allocate(self.kind, self.region, np.array(key), table=self.table, w=self.w, alpha=self.alpha)
        except AllocatorError:
            raise
        except FairshareError as e:
            raise AllocatorError(f"{self.kind.value} allocation failed at {list(key)}: {e}", state=key) from e
        rates.setflags(write=False)
        return rates

    def __call__(self, x: Sequence[float]) -> np.ndarray:
        return self._cached(tuple(float(v) for v in x))

    def describe(self) -> str:
        if self.kind == AllocatorKind.ALPHA_FAIR:
            return f"alpha_fair(alpha={self.alpha:g})"
        return self.kind.value


class PhaseSharingAllocator:
    """
    Allocation on a phase-expanded model: rates are computed per class on the
    class-level region and split among the phases of a class in proportion to
    their populations.
    """

    def __init__(self, base: Allocator, class_map: Sequence[int], region: CapacityRegion):
        self.base = base
        self.class_map = np.asarray(class_map, dtype=np.int64)
        self.region = region
        self.kind = base.kind
        if region.num_classes != len(self.class_map):
            raise InvalidInputError(f"{len(self.class_map)} phases for an expanded region of {region.num_classes}")
        self._cached = functools.lru_cache(maxsize=settings.ALLOC_CACHE_SIZE)(self._compute)

    @property
    def num_classes(self) -> int:
        return len(self.class_map)

    def _compute(self, key: Tuple[float, ...]) -> np.ndarray:
        x = np.array(key)
        totals = np.bincount(self.class_map, weights=x, minlength=self.base.num_classes)
        class_rates = self.base(totals)
        rates = np.zeros_like(x)
        busy = x > 0
        rates[busy] = class_rates[self.class_map[busy]] * x[busy] / totals[self.class_map[busy]]
        rates.setflags(write=False)
        return rates

    def __call__(self, x: Sequence[float]) -> np.ndarray:
        return self._cached(tuple(float(v) for v in x))

    def describe(self) -> str:
        return f"{self.base.describe()} shared over phases"
