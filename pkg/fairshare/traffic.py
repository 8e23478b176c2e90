"""
Routing algebra: traffic equations, spectral certification of routing
matrices, excursion removal over a class subset, the drift functional used
by the fluid descent argument, and phase-type service expansion.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from fairshare.capacity import CapacityRegion
from fairshare.config import settings
from fairshare.errors import DimensionError, InvalidInputError, SpectralRadiusError

logger = logging.getLogger(__name__)

MAX_SQUARINGS = 60
ROW_SUM_SLACK = 1e-12


@dataclass(frozen=True)
class SpectralCertificate:
    certified: bool
    radius: float


def _routing_matrix(P: Sequence[Sequence[float]]) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionError(f"routing matrix must be square, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise InvalidInputError("routing matrix must be finite")
    if np.any(P < 0):
        raise InvalidInputError("routing matrix has negative entries")
    row_sums = P.sum(axis=1)
    bad = np.flatnonzero(row_sums > 1.0 + ROW_SUM_SLACK)
    if bad.size:
        raise InvalidInputError(f"routing matrix row {bad[0]} sums to {row_sums[bad[0]]:.12g} > 1")
    return P


def check_spectral_radius(P: Sequence[Sequence[float]], margin: Optional[float] = None) -> SpectralCertificate:
    """
    Estimate the Perron root of a substochastic matrix and certify that it is
    below 1 - margin.

    Routing matrices are small and dense, so the estimate is read off the full
    eigenvalue set rather than a power iteration: power iteration stalls on
    periodic routing such as [[0, a], [a, 0]], where several eigenvalues share
    the Perron modulus, and its iterates only bound the radius from below. The
    certificate is the upper bound ||P^(2^j)||_inf^(1/2^j), which decreases
    to the spectral radius.
    """
    margin = settings.SPECTRAL_MARGIN if margin is None else margin
    P = _routing_matrix(P)
    if not np.any(P):
        return SpectralCertificate(True, 0.0)

    radius = float(np.max(np.abs(np.linalg.eigvals(P))))
    if radius >= 1.0 - margin:
        return SpectralCertificate(False, radius)

    power = P
    for j in range(MAX_SQUARINGS):
        norm = float(np.max(np.abs(power).sum(axis=1)))
        if norm == 0.0 or norm ** (1.0 / 2**j) < 1.0 - margin:
            return SpectralCertificate(True, radius)
        power = power @ power
    return SpectralCertificate(False, radius)


def _require_certified(P: np.ndarray, what: str) -> None:
    cert = check_spectral_radius(P)
    if not cert.certified:
        raise SpectralRadiusError(
            f"{what} spectral radius {cert.radius:.12g} not certified below 1 - {settings.SPECTRAL_MARGIN:g}",
            radius=cert.radius,
        )


def solve_traffic(nu_bar: Sequence[float], P: Sequence[Sequence[float]]) -> np.ndarray:
    """Effective arrival rates nu solving (I - P^T) nu = nu_bar"""
    P = _routing_matrix(P)
    nu_bar = np.asarray(nu_bar, dtype=float)
    if nu_bar.shape != (P.shape[0],):
        raise DimensionError(f"arrival rates have shape {nu_bar.shape}, routing matrix is {P.shape}")
    _require_certified(P, "routing matrix")
    return np.linalg.solve(np.eye(len(nu_bar)) - P.T, nu_bar)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TrafficModel:
    """
    External arrival rates nu_bar, service rates mu and routing matrix P.

    A class-r completion moves to class s with probability P[r, s] and leaves
    with probability 1 - sum_s P[r, s]. Effective rates nu and loads
    rho = nu / mu are derived at construction.
    """

    nu_bar: np.ndarray
    mu: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        nu_bar = np.atleast_1d(np.asarray(self.nu_bar, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        P = _routing_matrix(self.P)

        R = len(nu_bar)
        if mu.shape != (R,) or P.shape != (R, R):
            raise DimensionError(f"nu_bar has {R} classes but mu has shape {mu.shape} and P {P.shape}")
        if not (np.all(np.isfinite(nu_bar)) and np.all(np.isfinite(mu))):
            raise InvalidInputError("rates must be finite")
        if np.any(nu_bar < 0):
            raise InvalidInputError("external arrival rates must be nonnegative")
        if np.any(mu <= 0):
            raise InvalidInputError("service rates must be positive")
        if not np.any(nu_bar > 0):
            logger.warning("⚠️ All external arrival rates are zero; the system only drains")

        nu = solve_traffic(nu_bar, P)
        residual = np.max(np.abs((np.eye(R) - P.T) @ nu - nu_bar)) / max(1.0, float(np.max(nu_bar)))
        if residual > settings.TRAFFIC_RESIDUAL:
            raise SpectralRadiusError(f"traffic equations solved only to residual {residual:.3e}", radius=float("nan"))

        object.__setattr__(self, "nu_bar", _freeze(nu_bar))
        object.__setattr__(self, "mu", _freeze(mu))
        object.__setattr__(self, "P", _freeze(P))
        object.__setattr__(self, "_nu", _freeze(np.maximum(nu, nu_bar)))

    @classmethod
    def without_routing(cls, nu_bar: Sequence[float], mu: Sequence[float]) -> "TrafficModel":
        n = len(nu_bar)
        return cls(np.asarray(nu_bar, dtype=float), np.asarray(mu, dtype=float), np.zeros((n, n)))

    @property
    def num_classes(self) -> int:
        return len(self.nu_bar)

    @property
    def nu(self) -> np.ndarray:
        return self._nu

    @property
    def rho(self) -> np.ndarray:
        return self._nu / self.mu

    @property
    def exit_probabilities(self) -> np.ndarray:
        return np.clip(1.0 - self.P.sum(axis=1), 0.0, 1.0)

    @property
    def has_routing(self) -> bool:
        return bool(np.any(self.P))

    def reversibility_gap(self) -> float:
        """
        Largest violation of nu_r P[r, s] = nu_s P[s, r] and
        nu_bar_r = nu_r (1 - sum_s P[r, s]); zero for reversible routing.
        """
        flows = self.nu[:, None] * self.P
        exits = self.nu * self.exit_probabilities
        return float(max(np.max(np.abs(flows - flows.T)), np.max(np.abs(exits - self.nu_bar))))


def _complement(I: Iterable[int], R: int) -> Tuple[List[int], List[int]]:
    inside = sorted({int(r) for r in I})
    if any(r < 0 or r >= R for r in inside):
        raise DimensionError(f"class subset {inside} outside 0..{R - 1}")
    return inside, [r for r in range(R) if r not in inside]


def reduce_routing(
    nu_bar: np.ndarray, P: np.ndarray, I: Iterable[int]
) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    """Arrival rates and routing of the chain watched only outside I, with the kept class indices"""
    R = len(nu_bar)
    inside, outside = _complement(I, R)
    if not inside:
        return np.array(nu_bar, dtype=float), np.array(P, dtype=float), outside
    if not outside:
        raise InvalidInputError("cannot remove excursions over the full class set")

    P_oo = P[np.ix_(outside, outside)]
    P_oi = P[np.ix_(outside, inside)]
    P_ii = P[np.ix_(inside, inside)]
    P_io = P[np.ix_(inside, outside)]
    escape = np.eye(len(inside)) - P_ii

    P_tilde = P_oo + P_oi @ np.linalg.solve(escape, P_io)
    nu_tilde = nu_bar[outside] + P_io.T @ np.linalg.solve(escape.T, nu_bar[inside])
    return nu_tilde, P_tilde, outside


def remove_excursions(model: TrafficModel, I: Iterable[int]) -> Tuple[np.ndarray, np.ndarray]:
    """(nu_tilde, P_tilde) over the complement of I, in increasing class order"""
    nu_tilde, P_tilde, _ = reduce_routing(model.nu_bar, model.P, I)
    return nu_tilde, P_tilde


def drift_functional(
    P_tilde: Sequence[Sequence[float]],
    u: Sequence[float],
    r: int,
    g: Callable[[np.ndarray], np.ndarray] = np.expm1,
) -> float:
    """
    F_r(u) = sum_s [(I - P)^-1]_{rs} g(u_s) (u_s - (P u)_s), nonnegative for
    any substochastic P and increasing g with g(0) = 0.
    """
    P = _routing_matrix(P_tilde)
    u = np.asarray(u, dtype=float)
    if u.shape != (P.shape[0],):
        raise DimensionError(f"u has shape {u.shape}, routing matrix is {P.shape}")
    if not 0 <= r < len(u):
        raise DimensionError(f"class {r} outside 0..{len(u) - 1}")
    _require_certified(P, "reduced routing matrix")

    unit = np.zeros(len(u))
    unit[r] = 1.0
    green_row = np.linalg.solve((np.eye(len(u)) - P).T, unit)
    return float(green_row @ (g(u) * (u - P @ u)))


@dataclass(frozen=True, eq=False)
class PhaseType:
    """Service time as absorption time of a transient chain over phases"""

    alpha: np.ndarray
    rates: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        P = _routing_matrix(self.P)
        k = len(alpha)
        if rates.shape != (k,) or P.shape != (k, k):
            raise DimensionError(f"{k} phases but rates have shape {rates.shape} and P {P.shape}")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"initial phase distribution must be a probability vector, got {alpha.tolist()}")
        if np.any(rates <= 0) or not np.all(np.isfinite(rates)):
            raise InvalidInputError("phase rates must be finite and positive")
        _require_certified(P, "phase routing matrix")
        object.__setattr__(self, "alpha", _freeze(alpha))
        object.__setattr__(self, "rates", _freeze(rates))
        object.__setattr__(self, "P", _freeze(P))

    @classmethod
    def exponential(cls, rate: float) -> "PhaseType":
        return cls(np.array([1.0]), np.array([rate]), np.zeros((1, 1)))

    @classmethod
    def erlang(cls, k: int, rate: float) -> "PhaseType":
        """k sequential phases of the given rate (mean k / rate)"""
        P = np.eye(k, k=1)
        alpha = np.zeros(k)
        alpha[0] = 1.0
        return cls(alpha, np.full(k, float(rate)), P)

    @classmethod
    def hyperexponential(cls, probs: Sequence[float], rates: Sequence[float]) -> "PhaseType":
        k = len(probs)
        return cls(np.asarray(probs, dtype=float), np.asarray(rates, dtype=float), np.zeros((k, k)))

    @property
    def num_phases(self) -> int:
        return len(self.alpha)

    def mean(self) -> float:
        """alpha^T (I - P)^-1 (1 / rates)"""
        visits = np.linalg.solve((np.eye(self.num_phases) - self.P).T, self.alpha)
        return float(visits @ (1.0 / self.rates))


@dataclass(frozen=True)
class PhaseTypeSpec:
    phases: Tuple[PhaseType, ...]

    @property
    def num_classes(self) -> int:
        return len(self.phases)


@dataclass(frozen=True, eq=False)
class PhaseExpansion:
    """Expanded region and model over (class, phase) pairs, with the phase-to-class map"""

    region: CapacityRegion
    model: TrafficModel
    class_map: np.ndarray
    class_model: TrafficModel
    spec: PhaseTypeSpec

    @property
    def num_classes(self) -> int:
        return self.class_model.num_classes

    @property
    def num_phases(self) -> int:
        return len(self.class_map)

    def aggregate(self, x_hat: Sequence[float]) -> np.ndarray:
        """Per-class populations from per-phase populations"""
        return np.bincount(self.class_map, weights=np.asarray(x_hat, dtype=float), minlength=self.num_classes)

    def mean_service(self) -> np.ndarray:
        return np.array([pt.mean() for pt in self.spec.phases])

    def class_loads(self) -> np.ndarray:
        """Expanded loads summed over the phases of each class"""
        return np.bincount(self.class_map, weights=self.model.rho, minlength=self.num_classes)

    def load_identity_residual(self) -> float:
        """max_r |sum_i rho_(r,i) - nu_r sigma_r|"""
        expected = self.class_model.nu * self.mean_service()
        return float(np.max(np.abs(self.class_loads() - expected)))


def expand_phase_type(region: CapacityRegion, model: TrafficModel, spec: PhaseTypeSpec) -> PhaseExpansion:
    """
    Replace each class by its service phases. Arrivals enter phase i of class r
    at rate nu_r alpha_i; phases route within their class only; the expanded
    region charges every phase of a class against the class's links.

    The class-level model's service rates are ignored: each phase carries its
    own rate.
    """
    if spec.num_classes != model.num_classes or region.num_classes != model.num_classes:
        raise DimensionError(
            f"phase spec has {spec.num_classes} classes, model {model.num_classes}, region {region.num_classes}"
        )
    if model.has_routing:
        raise InvalidInputError("phase-type expansion requires a model without inter-class routing")

    class_map = np.concatenate([np.full(pt.num_phases, r) for r, pt in enumerate(spec.phases)])
    nu_bar_hat = np.concatenate([model.nu[r] * pt.alpha for r, pt in enumerate(spec.phases)])
    mu_hat = np.concatenate([pt.rates for pt in spec.phases])

    n = len(class_map)
    P_hat = np.zeros((n, n))
    start = 0
    for pt in spec.phases:
        stop = start + pt.num_phases
        P_hat[start:stop, start:stop] = pt.P
        start = stop

    expanded_region = CapacityRegion(region.A[:, class_map], region.c)
    expanded_model = TrafficModel(nu_bar_hat, mu_hat, P_hat)
    logger.info(f"Expanded {model.num_classes} classes into {n} service phases")
    return PhaseExpansion(
        region=expanded_region,
        model=expanded_model,
        class_map=class_map,
        class_model=model,
        spec=spec,
    )
