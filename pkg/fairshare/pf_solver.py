"""
(w, alpha)-fair and proportionally fair allocations over polyhedral regions,
and the conjugate function they define.

Every allocation is returned with a KKT certificate; a solve that cannot
certify itself raises SolverError instead of returning a guess.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from fairshare.capacity import CapacityRegion, Face
from fairshare.config import settings
from fairshare.errors import DimensionError, InvalidInputError, SolverError

logger = logging.getLogger(__name__)

# log-rate of a class with no users; np.exp maps it to exactly 0.0
EMPTY_LOG_RATE = float("-inf")

NEWTON_TOL = 1e-14
BARRIER_SHRINK = 0.1
ARMIJO_SLOPE = 0.25
BOUNDARY_FRACTION = 0.99
MIN_STEP = 1e-20


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AllocationResult:
    """Rate vector together with its log-rates, link prices and certificate"""

    rates: np.ndarray
    log_rates: np.ndarray
    prices: np.ndarray
    kkt_residual: float
    objective: float
    utility: float
    iterations: int = field(default=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rates": self.rates.tolist(),
            "log_rates": [None if np.isneginf(g) else float(g) for g in self.log_rates],
            "prices": self.prices.tolist(),
            "kkt_residual": self.kkt_residual,
            "objective": self.objective,
            "utility": self.utility,
        }


def _marginal_utility(y: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray:
    return w * y ** (-alpha)


def _utility(lam: np.ndarray, x: np.ndarray, w: np.ndarray, alpha: float) -> float:
    y = lam / x
    if alpha == 1.0:
        return float(np.sum(x * w * np.log(y)))
    return float(np.sum(x * w * y ** (1.0 - alpha) / (1.0 - alpha)))


class DualBarrierSolver:
    """
    Log-barrier Newton method on the link prices.

    For prices p > 0 the Lagrangian is maximized in closed form by
    lam_r = x_r (w_r / q_r)^(1/alpha) with q = A^T p, which leaves a smooth
    convex dual in p. Minimizing dual - t * sum(log p) keeps slacks strictly
    positive and drives p_l * slack_l to t, so shrinking t to a level below
    the KKT tolerance yields a certified primal-dual pair.
    """

    def __init__(
        self,
        kkt_tol: Optional[float] = None,
        barrier_final: Optional[float] = None,
        max_iter: Optional[int] = None,
    ):
        self.kkt_tol = settings.KKT_TOL if kkt_tol is None else kkt_tol
        self.barrier_final = settings.BARRIER_FINAL if barrier_final is None else barrier_final
        self.max_iter = settings.SOLVER_MAX_ITER if max_iter is None else max_iter

    @staticmethod
    def _rates(q: np.ndarray, x: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray:
        if alpha == 1.0:
            return x * w / q
        return x * (w / q) ** (1.0 / alpha)

    @staticmethod
    def _conjugate(q: np.ndarray, x: np.ndarray, w: np.ndarray, alpha: float) -> float:
        if alpha == 1.0:
            return float(np.sum(x * w * (np.log(w / q) - 1.0)))
        return float(alpha / (1.0 - alpha) * np.sum(x * w ** (1.0 / alpha) * q ** (1.0 - 1.0 / alpha)))

    def _barrier_value(self, p, A, c, x, w, alpha, t) -> float:
        return float(c @ p) + self._conjugate(A.T @ p, x, w, alpha) - t * float(np.sum(np.log(p)))

    def _single_link(self, a, cap, x, w, alpha) -> Tuple[np.ndarray, np.ndarray]:
        # sum_r a_r x_r (w_r / (a_r p))^(1/alpha) = cap has a closed-form root
        price = (np.sum(a * x * (w / a) ** (1.0 / alpha)) / cap) ** alpha
        lam = self._rates(a * price, x, w, alpha)
        return lam, np.array([price])

    def solve(
        self, A: np.ndarray, c: np.ndarray, x: np.ndarray, w: np.ndarray, alpha: float
    ) -> Tuple[np.ndarray, np.ndarray, int]:
        """Rates and prices for strictly positive x on a region with no idle links"""
        if A.shape[0] == 1:
            lam, p = self._single_link(A[0], c[0], x, w, alpha)
            return lam, p, 0

        # lam(s * x) = lam(x) while prices scale by s^alpha
        scale = float(np.sum(x))
        xs = x / scale
        price_scale = scale**alpha
        t_final = min(self.barrier_final, self.kkt_tol / (10.0 * price_scale))

        num_links = len(c)
        p = 1.0 / (num_links * c)
        t = 1.0 / num_links
        iterations = 0

        while True:
            while True:
                iterations += 1
                if iterations > self.max_iter:
                    raise SolverError(
                        f"barrier method hit the iteration cap {self.max_iter}",
                        iterations=iterations,
                    )

                q = A.T @ p
                lam = self._rates(q, xs, w, alpha)
                grad = c - A @ lam - t / p
                hess = (A * (lam / (alpha * q))) @ A.T + np.diag(t / p**2)
                try:
                    step = -np.linalg.solve(hess, grad)
                except np.linalg.LinAlgError:
                    step = -np.linalg.lstsq(hess, grad, rcond=None)[0]

                slope = float(grad @ step)
                if -slope <= 2.0 * NEWTON_TOL:
                    break

                accepted = self._line_search(p, step, slope, A, c, xs, w, alpha, t)
                if accepted is None:
                    # no decrease representable in floating point
                    break
                p = accepted

            if t <= t_final:
                break
            t = max(t * BARRIER_SHRINK, t_final)

        lam = self._rates(A.T @ p, xs, w, alpha)
        return lam, p * price_scale, iterations

    def _line_search(self, p, step, slope, A, c, x, w, alpha, t) -> Optional[np.ndarray]:
        s = 1.0
        shrinking = step < 0
        if np.any(shrinking):
            s = min(1.0, BOUNDARY_FRACTION * float(np.min(-p[shrinking] / step[shrinking])))

        current = self._barrier_value(p, A, c, x, w, alpha, t)
        while s > MIN_STEP:
            candidate = p + s * step
            if np.all(candidate > 0):
                value = self._barrier_value(candidate, A, c, x, w, alpha, t)
                if value <= current + ARMIJO_SLOPE * s * slope:
                    return candidate
            s *= 0.5
        return None


_default_solver = DualBarrierSolver()


def _certificate(
    A: np.ndarray, c: np.ndarray, x: np.ndarray, w: np.ndarray, alpha: float, lam: np.ndarray, p: np.ndarray
) -> float:
    slack = c - A @ lam
    infeasibility = max(0.0, float(np.max(-slack)), float(np.max(-lam)))
    complementarity = float(np.max(np.abs(p * slack)))
    stationarity = float(np.max(np.abs(_marginal_utility(lam / x, w, alpha) - A.T @ p) / np.maximum(1.0, x)))
    return max(infeasibility, complementarity, stationarity)


def _check_population(region: CapacityRegion, x: Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (region.num_classes,):
        raise DimensionError(f"population has shape {x.shape}, region has {region.num_classes} classes")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise InvalidInputError("populations must be finite and nonnegative")
    return x


def alpha_fair_allocate(
    region: CapacityRegion,
    x: Sequence[float],
    w: Optional[Sequence[float]] = None,
    alpha: float = 1.0,
    solver: Optional[DualBarrierSolver] = None,
) -> AllocationResult:
    """Maximize sum over x_r > 0 of x_r U_r(lam_r / x_r) over the region"""
    x = _check_population(region, x)
    w = np.ones(region.num_classes) if w is None else np.asarray(w, dtype=float)
    if w.shape != (region.num_classes,):
        raise DimensionError(f"weights have shape {w.shape}, region has {region.num_classes} classes")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise InvalidInputError("weights must be finite and positive")
    if not np.isfinite(alpha) or alpha <= 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    solver = solver or _default_solver

    rates = np.zeros(region.num_classes)
    log_rates = np.full(region.num_classes, EMPTY_LOG_RATE)
    prices = np.zeros(region.num_links)

    face = Face.from_vector(x)
    support = list(face.support)
    if not support:
        return AllocationResult(
            _readonly(rates), _readonly(log_rates), _readonly(prices), 0.0, 0.0, 0.0
        )

    sub = region.face_restrict(face)
    links = region.kept_links(face)
    xs, ws = x[support], w[support]

    lam, p, iterations = solver.solve(sub.A, sub.c, xs, ws, float(alpha))
    residual = _certificate(sub.A, sub.c, xs, ws, float(alpha), lam, p)
    if not residual <= solver.kkt_tol:
        raise SolverError(
            f"allocation at x={x.tolist()} not certified: KKT residual {residual:.3e}",
            iterations=iterations,
            residual=residual,
        )

    rates[support] = lam
    log_rates[support] = np.log(lam)
    prices[links] = p
    logger.debug(f"solved x={x.tolist()} in {iterations} Newton steps, residual {residual:.2e}")

    return AllocationResult(
        rates=_readonly(rates),
        log_rates=_readonly(log_rates),
        prices=_readonly(prices),
        kkt_residual=residual,
        objective=float(np.sum(xs * np.log(lam))),
        utility=_utility(lam, xs, ws, float(alpha)),
        iterations=iterations,
    )


def pf_allocate(region: CapacityRegion, x: Sequence[float]) -> AllocationResult:
    """Proportionally fair allocation (w = 1, alpha = 1); Allocator instances memoize it"""
    return alpha_fair_allocate(region, x)


def legendre(region: CapacityRegion, x: Sequence[float]) -> float:
    """Conjugate of the log-region indicator: optimal value of sum x_r log lam_r"""
    return pf_allocate(region, x).objective


def pf_gradient(region: CapacityRegion, x: Sequence[float]) -> np.ndarray:
    """Log PF rates, the gradient of legendre on the open orthant"""
    x = _check_population(region, x)
    if np.any(x <= 0):
        raise InvalidInputError("the gradient is only defined for strictly positive populations")
    return np.array(pf_allocate(region, x).log_rates)