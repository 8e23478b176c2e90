"""
Property battery over the built-in and user scenarios.

Each check has a stable id, names the result it exercises, runs a family of
instances and records its worst measured value against a threshold. Checks
run concurrently on a thread pool and the report lists them in id order. A
check that starts after the time budget is spent is recorded as skipped.
Stochastic checks run once per seed and report the worst seed.
"""

import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln

from fairshare.allocators import (
    Allocator,
    BalanceTable,
    bf_rates,
    build_balance_table,
    characterization_report,
    pf_prime_rates,
)
from fairshare.capacity import CapacityRegion
from fairshare.config import settings
from fairshare.dynamics import (
    empirical_distribution,
    lyapunov_growth,
    scaled_path,
    simulate,
    sup_distance,
)
from fairshare.errors import FairshareError
from fairshare.fluid import descent_report, integrate
from fairshare.lyapunov import (
    LyapunovContext,
    ld_convergence_report,
    lyapunov_value,
    norm_bounds_certificate,
    sandwich_report,
    second_order_residual,
    sharp_second_order_residual,
)
from fairshare.models import AllocatorKind, CheckStatus
from fairshare.pf_solver import legendre, pf_allocate, pf_gradient
from fairshare.scenarios import LoadedScenario, builtin_scenarios
from fairshare.schemas import CheckRecord, VerificationReport
from fairshare.stationary import (
    StateDistribution,
    bf_stationary,
    detailed_balance_residual,
    pf_prime_stationary,
    total_variation,
    truncated_exact,
)
from fairshare.traffic import (
    PhaseType,
    TrafficModel,
    check_spectral_radius,
    drift_functional,
    reduce_routing,
)

logger = logging.getLogger(__name__)

TableHook = Callable[[BalanceTable], BalanceTable]

CLOSED_FORM_SCENARIOS = ("single_link_one", "single_link_two", "two_link", "line_network")
RANDOM_SCENARIOS = ("random_7",)
EXACT_BOX_STATES = 4096


# Results a check can exercise; every CheckSpec.ref is one of these keys
RESULTS: Dict[str, str] = {
    "region-geometry": "the capacity region is monotone, convex and restricts to faces",
    "pf-optimum": "PF rates maximize the weighted log utility over the region",
    "legendre-gradient": "legendre is differentiable inside the orthant with gradient log PF",
    "legendre-quotients": "exponentiated difference quotients of legendre stay in the region",
    "legendre-homogeneity": "legendre is positively homogeneous",
    "legendre-convexity": "legendre is convex on the orthant",
    "norm-equivalence": "L is squeezed between two positive multiples of the norm",
    "balance-sandwich": "legendre <= phi <= legendre + harmonic remainder",
    "ld-window": "log BF probabilities along a ray decay like n L(x) up to the remainder",
    "second-order-bound": "second-order upper expansion of legendre",
    "bf-characterization": "BF rates are the largest feasible balanced rates",
    "pf-prime-feasibility": "PF' rates lie in the capacity region",
    "single-link-coincidence": "BF and PF coincide on a single link",
    "drift-functional": "the excursion drift functional is nonnegative with a sharp equality case",
    "excursion-removal": "removing excursions through a face keeps the effective rates",
    "phase-loads": "phase loads add up to arrival rate times mean service",
    "pf-prime-reversibility": "the PF' product law satisfies detailed balance",
    "bf-reversibility": "the BF balance law satisfies detailed balance",
    "pf-irreversibility": "PF is not reversible for the PF' law",
    "exact-oracle": "truncated generator solves agree with the closed-form laws",
    "fluid-trajectory": "Euler fluid trajectories with face handling",
    "fluid-descent": "L decreases strictly along fluid trajectories",
    "markov-dynamics": "jump chain with exponential clocks and routing",
    "insensitivity": "PF' occupancy depends on service only through its mean",
    "fluid-limit": "rescaled sample paths approach the fluid trajectory",
    "instability": "L grows linearly when the loads leave the region",
}


@dataclass
class Outcome:
    measured: float
    threshold: float
    passed: bool
    instance: str
    detail: Optional[str] = None
    diagnostic: bool = False


@dataclass(frozen=True)
class CheckSpec:
    """
    One battery entry. A seeded check's `run` takes the seed and is evaluated
    once per seed; `lower_is_worse` flips the ordering used to pick the
    reported seed when every seed passes.
    """

    id: str
    ref: str
    run: Callable[..., Outcome]
    seeded: bool = False
    lower_is_worse: bool = False

    def evaluate(self, seeds: Sequence[int]) -> Outcome:
        if not self.seeded:
            return self.run()

        outcomes = [(int(seed), self.run(int(seed))) for seed in seeds]
        if len(outcomes) == 1:
            return outcomes[0][1]

        failing = [item for item in outcomes if not item[1].passed]
        if failing:
            seed, worst = failing[0]
        else:
            sign = -1.0 if self.lower_is_worse else 1.0
            seed, worst = max(outcomes, key=lambda item: _rank(sign * item[1].measured))
        note = f"worst of {len(outcomes)} seeds at seed {seed}"
        return replace(worst, detail=f"{note}; {worst.detail}" if worst.detail else note)


def _rank(value: float) -> float:
    return -math.inf if math.isnan(value) else value


def random_region(rng: np.random.Generator, max_links: int = 3, max_classes: int = 4) -> CapacityRegion:
    """Random region whose links and classes all have at least one positive entry"""
    links = int(rng.integers(1, max_links + 1))
    classes = int(rng.integers(1, max_classes + 1))
    while True:
        A = np.where(rng.random((links, classes)) < 0.6, rng.uniform(0.5, 2.0, (links, classes)), 0.0)
        if np.all(A.any(axis=0)) and np.all(A.any(axis=1)):
            return CapacityRegion(A, rng.uniform(0.5, 2.0, links))


def random_substochastic(rng: np.random.Generator, n: int, max_row: float = 0.95) -> np.ndarray:
    P = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
    sums = P.sum(axis=1)
    targets = rng.uniform(0.0, max_row, n)
    return np.where(sums[:, None] > 0, P * (targets / np.where(sums > 0, sums, 1.0))[:, None], 0.0)


def exact_box(scenario: LoadedScenario, limit: int = EXACT_BOX_STATES) -> int:
    """Largest box side not above the scenario's box with at most `limit` states"""
    R = scenario.num_classes
    N = scenario.spec.run.box
    while N > 1 and (N + 1) ** R > limit:
        N -= 1
    return max(N, 1)


def _binomial_phi(n: int) -> float:
    return -float(gammaln(2 * n + 1) - 2 * gammaln(n + 1))


class Verifier:
    def __init__(
        self,
        scenarios: Optional[Sequence[LoadedScenario]] = None,
        seeds: Sequence[int] = (0,),
        table_hook: Optional[TableHook] = None,
    ):
        self.builtin = builtin_scenarios()
        self.user = list(scenarios or [])
        self.seeds = [int(s) for s in seeds] or [0]
        self.table_hook = table_hook
        self._tables: Dict[Tuple[int, int], BalanceTable] = {}
        self._tables_lock = threading.Lock()

    # helpers
    @staticmethod
    def rng(salt: int, seed: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, salt])))

    def table(self, region: CapacityRegion, N: int) -> BalanceTable:
        key = (id(region), N)
        with self._tables_lock:
            if key not in self._tables:
                table = build_balance_table(region, N)
                if self.table_hook is not None:
                    table = self.table_hook(table)
                self._tables[key] = table
            return self._tables[key]

    def reversible_scenarios(self, include_random: bool = True) -> List[LoadedScenario]:
        names = CLOSED_FORM_SCENARIOS + (RANDOM_SCENARIOS if include_random else ())
        picked = [self.builtin[n] for n in names]
        picked += [
            s
            for s in self.user
            if s.name not in self.builtin and s.model is not None and not s.model.has_routing and s.phases is None
        ]
        return picked

    # capacity
    def capacity_monotone_convex(self, seed: int) -> Outcome:
        rng = self.rng(1, seed)
        violations = 0
        for _ in range(500):
            region = random_region(rng)
            direction = rng.random(region.num_classes)
            edge = direction / np.max(region.A @ direction / region.c)
            inner = edge * rng.random(region.num_classes)
            other = rng.random(region.num_classes)
            other = other / np.max(region.A @ other / region.c) * rng.random()
            eps = rng.random()
            for lam in (edge, inner, eps * edge + (1 - eps) * other):
                violations += not region.contains(lam)
        return Outcome(violations, 0, violations == 0, "500 random regions, boundary/inner/convex points")

    # pf_solver
    def pf_closed_form(self) -> Outcome:
        region = self.builtin["two_link"].region
        result = pf_allocate(region, [1, 1, 1])
        err = float(np.max(np.abs(result.rates - np.array([2 / 3, 2 / 3, 1 / 3]))))
        return Outcome(err, 1e-7, err <= 1e-7, "two_link, x=(1,1,1)", f"kkt residual {result.kkt_residual:.2e}")

    def pf_gradient_consistency(self, seed: int) -> Outcome:
        rng = self.rng(2, seed)
        eps = 1e-4
        worst = 0.0
        for _ in range(200):
            region = random_region(rng)
            x = rng.uniform(0.5, 5.0, region.num_classes)
            grad = pf_gradient(region, x)
            for r in range(region.num_classes):
                e = np.zeros(region.num_classes)
                e[r] = eps
                fd = (legendre(region, x + e) - legendre(region, x - e)) / (2 * eps)
                worst = max(worst, abs(fd - grad[r]))
        return Outcome(worst, 1e-3, worst <= 1e-3, "200 random regions, x in [0.5, 5]^R, central step 1e-4")

    def pf_difference_quotients(self, seed: int) -> Outcome:
        rng = self.rng(3, seed)
        worst = -math.inf
        for _ in range(1000):
            region = random_region(rng)
            R = region.num_classes
            x = rng.uniform(0.0, 5.0, R) * (rng.random(R) > 0.2)
            step = x * rng.uniform(0.01, 1.0, R)
            here = legendre(region, x)
            lam = np.zeros(R)
            for r in np.flatnonzero(x > 0):
                y = x.copy()
                y[r] -= step[r]
                lam[r] = math.exp((here - legendre(region, np.maximum(y, 0.0))) / step[r])
            worst = max(worst, float(-np.min(region.slack(lam))), float(-lam.min()))
        return Outcome(worst, 1e-8, worst <= 1e-8, "1000 random (region, x, step) draws")

    def pf_homogeneity(self, seed: int) -> Outcome:
        rng = self.rng(4, seed)
        worst = 0.0
        for _ in range(200):
            region = random_region(rng)
            x = rng.uniform(0.0, 5.0, region.num_classes)
            a = rng.uniform(1e-3, 10.0)
            base = a * legendre(region, x)
            worst = max(worst, abs(legendre(region, a * x) - base) / (1.0 + abs(base)))
        return Outcome(worst, 1e-8, worst <= 1e-8, "200 random (region, x, a) with a in (0, 10]")

    def pf_monotone_quotient(self, seed: int) -> Outcome:
        rng = self.rng(5, seed)
        worst = -math.inf
        for _ in range(100):
            region = random_region(rng)
            x = rng.uniform(1.0, 5.0, region.num_classes)
            r = int(rng.integers(region.num_classes))
            here = legendre(region, x)
            quotients = []
            for frac in (0.1, 0.25, 0.5, 0.75, 1.0):
                y = x.copy()
                y[r] -= frac * x[r]
                quotients.append((here - legendre(region, np.maximum(y, 0.0))) / (frac * x[r]))
            worst = max(worst, float(np.max(np.diff(quotients))))
        return Outcome(worst, 1e-8, worst <= 1e-8, "100 random (region, x, r), step grid 0.1..1 of x_r")

    def pf_convexity(self, seed: int) -> Outcome:
        rng = self.rng(6, seed)
        worst = -math.inf
        for _ in range(200):
            region = random_region(rng)
            a = rng.uniform(0.0, 5.0, region.num_classes)
            b = rng.uniform(0.0, 5.0, region.num_classes)
            t = rng.random()
            gap = legendre(region, t * a + (1 - t) * b) - t * legendre(region, a) - (1 - t) * legendre(region, b)
            worst = max(worst, gap)
        return Outcome(worst, 1e-8, worst <= 1e-8, "200 random segments in the orthant")

    # allocators
    def allocators_characterization(self) -> Outcome:
        worst = 0.0
        names = []
        for s in self.reversible_scenarios():
            excess, idle = characterization_report(self.table(s.region, exact_box(s)))
            worst = max(worst, excess, idle)
            names.append(s.name)
        return Outcome(worst, 1e-9, worst <= 1e-9, f"BF rates feasible and saturating on {', '.join(names)}")

    def allocators_pf_prime_feasible(self) -> Outcome:
        worst = -math.inf
        for s in self.reversible_scenarios():
            N = exact_box(s)
            for x in self.table(s.region, N).points():
                lam = pf_prime_rates(s.region, x)
                worst = max(worst, float(-s.region.slack(lam).min()))
        return Outcome(worst, 1e-8, worst <= 1e-8, "PF' rates over every box point of the reversible scenarios")

    def allocators_single_link(self) -> Outcome:
        s = self.builtin["single_link_two"]
        table = self.table(s.region, 8)
        worst = 0.0
        for x in table.points()[1:]:
            worst = max(worst, float(np.max(np.abs(bf_rates(table, x) - pf_allocate(s.region, x).rates))))
        return Outcome(worst, 1e-9, worst <= 1e-9, "single_link_two, box 8: BF equals PF")

    # lyapunov
    def lyapunov_sandwich(self) -> Outcome:
        worst = -math.inf
        for name in CLOSED_FORM_SCENARIOS:
            report = sandwich_report(self.table(self.builtin[name].region, 8))
            worst = max(worst, report.lower_violation, report.upper_violation)
        spot = self.table(self.builtin["single_link_two"].region, 8)
        gap = spot.value([1, 1]) - legendre(spot.region, [1, 1])
        passed = worst <= 1e-7 and abs(gap - math.log(2)) <= 1e-9
        return Outcome(worst, 1e-7, passed, "closed-form scenarios, box 8", f"gap at (1,1) on a unit link: {gap:.9f}")

    def lyapunov_scaling_window(self) -> Outcome:
        s = self.builtin["single_link_two"]
        ctx = LyapunovContext.from_model(s.region, s.model)
        n_list = [1, 2, 5, 10, 20, 50]
        rows = ld_convergence_report(s.region, ctx, [1, 1], n_list, table=self.table(s.region, 100))
        worst = 0.0
        for row in rows:
            worst = max(
                worst,
                -row.gap,
                row.gap - row.bound,
                -row.ld_excess,
                row.ld_excess - row.bound,
                abs(row.ld_excess - row.gap),
                row.bf_gap,
            )
            closed = _binomial_phi(row.n) / row.n + 2 * math.log(2)
            worst = max(worst, abs(closed - row.gap))
        by_n = {row.n: row.gap for row in rows}
        passed = worst <= 1e-9 and by_n[50] < by_n[5]
        detail = ", ".join(f"g({row.n})={row.gap:.6f}" for row in rows)
        return Outcome(worst, 1e-9, passed, "unit link, x=(1,1), n in 1..50", detail)

    def lyapunov_second_order(self, seed: int) -> Outcome:
        rng = self.rng(7, seed)
        worst = -math.inf
        for _ in range(1000):
            region = random_region(rng)
            x = rng.uniform(0.5, 5.0, region.num_classes)
            h = rng.uniform(-1.0, 2.0, region.num_classes) * x
            worst = max(
                worst,
                second_order_residual(region, x, h),
                sharp_second_order_residual(region, x, h),
            )
        return Outcome(worst, 1e-7, worst <= 1e-7, "1000 random (region, x, h), both bounds")

    def lyapunov_norm_bounds(self, seed: int) -> Outcome:
        worst = math.inf
        for name in CLOSED_FORM_SCENARIOS:
            s = self.builtin[name]
            bounds = norm_bounds_certificate(LyapunovContext.from_model(s.region, s.model), samples=200, seed=seed)
            worst = min(worst, bounds.lower)
        return Outcome(worst, 0.0, worst > 0, "closed-form scenarios, 200 directions", "smallest lower bound")

    # traffic
    def traffic_drift_nonnegative(self, seed: int) -> Outcome:
        rng = self.rng(8, seed)
        worst = -math.inf
        for _ in range(10_000):
            n = int(rng.integers(1, 6))
            P = random_substochastic(rng, n)
            u = rng.uniform(-3.0, 3.0, n)
            r = int(rng.integers(n))
            value = drift_functional(P, u, r)
            positive = drift_functional(P, np.maximum(u, 0.0), r)
            bounded = drift_functional(P, u, r, g=np.tanh)
            worst = max(worst, -value, positive - value, -bounded)
        return Outcome(worst, 1e-12, worst <= 1e-12, "10^4 random (P, u, r), exp and tanh weights")

    def traffic_drift_equality(self, seed: int) -> Outcome:
        rng = self.rng(9, seed)
        violations = 0
        for k in range(100):
            n = int(rng.integers(1, 6))
            P = random_substochastic(rng, n)
            r = int(rng.integers(n))
            u = -rng.uniform(0.0, 1.0, n) if k % 2 == 0 else rng.uniform(-1e-3, 1e-3, n)
            if drift_functional(P, u, r) <= 1e-12:
                green = np.linalg.solve((np.eye(n) - P).T, np.eye(n)[r])
                violations += bool(np.any(u[green > 1e-9] > 1e-6))
        return Outcome(violations, 0, violations == 0, "100 near-zero instances")

    def traffic_excursion_identity(self, seed: int) -> Outcome:
        rng = self.rng(10, seed)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 6))
            model = TrafficModel(rng.uniform(0.0, 1.0, n), np.ones(n), random_substochastic(rng, n))
            inside = [r for r in range(n) if rng.random() < 0.4][: n - 1]
            nu_tilde, P_tilde, outside = reduce_routing(model.nu_bar, model.P, inside)
            if not check_spectral_radius(P_tilde).certified:
                worst = math.inf
                continue
            nu_out = np.linalg.solve(np.eye(len(outside)) - P_tilde.T, nu_tilde)
            worst = max(worst, float(np.max(np.abs(nu_out - model.nu[outside]))))
        return Outcome(worst, 1e-10, worst <= 1e-10, "1000 random (model, I) pairs")

    def traffic_phase_loads(self) -> Outcome:
        worst = 0.0
        expected = {"erlang2": 1.0, "hyperexponential": 0.75}
        for name, sigma in expected.items():
            expansion = self.builtin[name].expansion()
            worst = max(worst, expansion.load_identity_residual())
            worst = max(worst, float(np.max(np.abs(expansion.mean_service() - sigma))))
        worst = max(worst, abs(PhaseType.erlang(2, 3.0).mean() - 2 / 3.0))
        return Outcome(worst, 1e-12, worst <= 1e-12, "Erlang-2 and hyperexponential specs")

    # stationary
    def stationary_pf_prime_balance(self) -> Outcome:
        worst = 0.0
        for s in self.reversible_scenarios():
            ctx = LyapunovContext.from_model(s.region, s.model)
            N = exact_box(s)
            dist = pf_prime_stationary(s.region, ctx, N)
            worst = max(worst, detailed_balance_residual(dist, s.region, Allocator(AllocatorKind.PF_PRIME, s.region), s.model))
        return Outcome(worst, 1e-9, worst <= 1e-9, "reversible scenarios on their exact boxes")

    def stationary_bf_balance(self) -> Outcome:
        worst = 0.0
        for s in self.reversible_scenarios():
            ctx = LyapunovContext.from_model(s.region, s.model)
            N = exact_box(s)
            table = self.table(s.region, N)
            dist = bf_stationary(table, ctx, N)
            worst = max(worst, detailed_balance_residual(dist, s.region, Allocator(AllocatorKind.BF, s.region, table=table), s.model))
        return Outcome(worst, 1e-9, worst <= 1e-9, "reversible scenarios on their exact boxes")

    def stationary_oracle_agreement(self) -> Outcome:
        worst = 0.0
        for s in self.reversible_scenarios(include_random=False) + [self.builtin["reversible_routing"]]:
            ctx = LyapunovContext.from_model(s.region, s.model)
            N = exact_box(s)
            table = self.table(s.region, N)
            bf = truncated_exact(s.region, Allocator(AllocatorKind.BF, s.region, table=table), s.model, N)
            worst = max(worst, total_variation(bf, bf_stationary(table, ctx, N)))
            if not s.model.has_routing:
                pf_prime = truncated_exact(s.region, Allocator(AllocatorKind.PF_PRIME, s.region), s.model, N)
                worst = max(worst, total_variation(pf_prime, pf_prime_stationary(s.region, ctx, N)))
        return Outcome(worst, 1e-9, worst <= 1e-9, "closed-form scenarios and reversible routing, exact boxes")

    def stationary_pf_irreversible(self) -> Outcome:
        s = self.builtin["two_link"]
        ctx = LyapunovContext.from_model(s.region, s.model)
        dist = pf_prime_stationary(s.region, ctx, 4)
        residual = detailed_balance_residual(dist, s.region, Allocator(AllocatorKind.PF, s.region), s.model)
        return Outcome(residual, 1e-6, residual > 1e-6, "two_link, box 4, PF against the PF' law", "must be materially positive")

    def stationary_routing_bias(self) -> Outcome:
        s = self.builtin["tandem"]
        ctx = LyapunovContext.from_model(s.region, s.model)
        N = exact_box(s)
        table = self.table(s.region, N)
        exact = truncated_exact(s.region, Allocator(AllocatorKind.BF, s.region, table=table), s.model, N)
        tv = total_variation(exact, bf_stationary(table, ctx, N))
        return Outcome(tv, math.nan, True, f"tandem routing, box {N}", "box truncation bias of a non-reversible chain", diagnostic=True)

    # fluid
    def _level_one_start(self, s: LoadedScenario) -> Tuple[LyapunovContext, np.ndarray]:
        ctx = LyapunovContext.from_model(s.region, s.model)
        ones = np.ones(s.num_classes)
        return ctx, ones / lyapunov_value(ctx, ones)

    def fluid_descent(self) -> Outcome:
        worst_final = 0.0
        passed = True
        details = []
        for name in CLOSED_FORM_SCENARIOS:
            s = self.builtin[name]
            ctx, x0 = self._level_one_start(s)
            traj = integrate(s.region, s.model, x0, T=200.0, h_step=1e-2, stop_level=0.01, ctx=ctx)
            report = descent_report(traj, ctx)
            nonzero = np.any(traj.states > 0, axis=1)
            negative = bool(np.all(traj.h_bounds[nonzero] < 0))
            passed &= report.monotone and report.final_value <= 0.01 and negative
            worst_final = max(worst_final, report.final_value)
            details.append(f"{name}: t_half={report.t_half:.3f}, T={traj.times[-1]:.2f}")
        return Outcome(worst_final, 0.01, passed, "closed-form scenarios from the L=1 level set", "; ".join(details))

    def fluid_first_order(self) -> Outcome:
        s = self.builtin["two_link"]
        x0 = np.array([1.0, 0.5, 2.0])
        T = 0.5
        ref = integrate(s.region, s.model, x0, T, h_step=2.5e-4)

        def error(h: float) -> float:
            traj = integrate(s.region, s.model, x0, T, h_step=h)
            stride = int(round(h / 2.5e-4))
            return float(np.max(np.abs(traj.states - ref.states[::stride])))

        coarse, fine = error(0.02), error(0.01)
        ratio = coarse / fine if fine > 0 else math.inf
        return Outcome(ratio, 2.0, 1.5 <= ratio <= 2.6, "two_link, x0=(1,0.5,2), T=0.5, h=0.02 vs 0.01", f"errors {coarse:.3e}, {fine:.3e}")

    def fluid_bookkeeping(self) -> Outcome:
        worst_ratio = 0.0
        face_gap = 0.0
        for name in ("tandem", "reversible_routing", "two_link"):
            s = self.builtin[name]
            h = 1e-2
            traj = integrate(s.region, s.model, np.ones(s.num_classes), T=6.0, h_step=h)
            worst_ratio = max(worst_ratio, traj.bookkeeping_residual() / (10 * h * traj.rate_scale))
            for face, velocity in zip(traj.faces, traj.velocities):
                if not face:
                    continue
                face_gap = max(face_gap, float(np.max(np.abs(velocity[list(face)]))))
                if len(face) < s.num_classes:
                    nu_tilde, P_tilde, outside = reduce_routing(s.model.nu_bar, s.model.P, face)
                    nu_out = np.linalg.solve(np.eye(len(outside)) - P_tilde.T, nu_tilde)
                    face_gap = max(face_gap, float(np.max(np.abs(nu_out - s.model.nu[outside]))))
        passed = worst_ratio <= 1.0 and face_gap <= 1e-10
        return Outcome(worst_ratio, 1.0, passed, "routing scenarios, x0=1, T=6", f"face consistency gap {face_gap:.2e}")

    # dynamics
    def dynamics_mm1_law(self, seed: int) -> Outcome:
        s = self.builtin["single_link_one"]
        run = simulate(s.model, s.region, Allocator(AllocatorKind.PF, s.region), T=1.1e6, seed=seed)
        box = 30
        empirical = empirical_distribution(run, burn_in=100.0, box=box)
        geometric = StateDistribution.from_mass(0.5 ** np.arange(box + 1))
        tv = total_variation(empirical, geometric)
        return Outcome(tv, 0.02, tv <= 0.02 and run.num_events >= 1e6, "unit link, nu_bar=0.5, mu=1", f"{run.num_events} events")

    def dynamics_insensitivity(self, seed: int) -> Outcome:
        s = self.builtin["erlang2"]
        expansion = s.expansion()
        phased = s.phase_allocator(expansion, AllocatorKind.PF_PRIME)
        run_phase = simulate(expansion.model, expansion.region, phased, T=6.5e5, seed=seed)
        run_exp = simulate(s.model, s.region, Allocator(AllocatorKind.PF_PRIME, s.region), T=1e6, seed=seed, replication=1)
        box = 30
        d_phase = empirical_distribution(run_phase, burn_in=100.0, box=box, class_map=expansion.class_map)
        d_exp = empirical_distribution(run_exp, burn_in=100.0, box=box)
        tv = total_variation(d_phase, d_exp)
        events = min(run_phase.num_events, run_exp.num_events)
        return Outcome(tv, 0.02, tv <= 0.02 and events >= 1e6, "unit link, two classes, Erlang-2 vs exponential, PF'", f"{events} events")

    def dynamics_fluid_limit(self, seed: int) -> Outcome:
        s = self.builtin["single_link_one"]
        allocator = Allocator(AllocatorKind.PF, s.region)
        T = 0.5
        times = np.linspace(0.0, T, 501)
        line = np.maximum(1.0 - 0.5 * times, 0.0)[:, None]
        medians = {}
        for z in (50, 200):
            distances = [
                sup_distance(scaled_path(s.model, s.region, allocator, z, [1.0], T, seed=seed, replication=k), times, line)
                for k in range(20)
            ]
            medians[z] = float(np.median(distances))
        passed = medians[200] < medians[50] and medians[200] <= 0.1
        return Outcome(medians[200], 0.1, passed, "unit link, x0=1, T=0.5, 20 seeds", f"median at z=50: {medians[50]:.4f}")

    def dynamics_conservation(self, seed: int) -> Outcome:
        worst = 0
        deterministic = True
        for name in ("tandem", "reversible_routing", "two_link"):
            s = self.builtin[name]
            allocator = Allocator(AllocatorKind.PF, s.region)
            first = simulate(s.model, s.region, allocator, T=2000.0, seed=seed)
            second = simulate(s.model, s.region, allocator, T=2000.0, seed=seed)
            worst = max(worst, int(np.max(np.abs(first.conservation_gap()))))
            deterministic &= np.array_equal(first.times, second.times) and np.array_equal(first.states, second.states)
            deterministic &= bool(np.all(np.diff(first.times) > 0)) and bool(np.all(first.states >= 0))
        return Outcome(worst, 0, worst == 0 and deterministic, "routing scenarios, T=2000, repeated seed")

    def dynamics_instability(self, seed: int) -> Outcome:
        region = self.builtin["single_link_two"].region
        model = TrafficModel.without_routing([0.6, 0.6], [1.0, 1.0])
        run = simulate(model, region, Allocator(AllocatorKind.PF, region), T=2000.0, seed=seed)
        growth = lyapunov_growth(run, LyapunovContext.from_model(region, model))
        grows = growth.slope > 0 and growth.r_squared > 0.9
        return Outcome(
            growth.slope,
            math.nan,
            True,
            "unit link, loads (0.6, 0.6), PF",
            f"slope {growth.slope:.4f}, R^2 {growth.r_squared:.3f}, linear growth {'seen' if grows else 'not seen'}",
            diagnostic=True,
        )

    def dynamics_pf_decay(self, seed: int) -> Outcome:
        s = self.builtin["single_link_two"]
        ctx = LyapunovContext.from_model(s.region, s.model)
        run = simulate(s.model, s.region, Allocator(AllocatorKind.PF, s.region), T=2e5, seed=seed)
        dist = empirical_distribution(run, burn_in=100.0, box=20)
        gaps = []
        for n in range(1, 6):
            p = dist.probability([n, n])
            if p > 0:
                gaps.append(-math.log(p) / n - lyapunov_value(ctx, [1, 1]))
        measured = gaps[-1] if gaps else math.nan
        return Outcome(measured, math.nan, True, "unit link, PF, states (n, n)", f"decay gaps {np.round(gaps, 4).tolist()}", diagnostic=True)

    def checks(self) -> List[CheckSpec]:
        specs = [
            CheckSpec("allocators.bf_characterization", "bf-characterization", self.allocators_characterization),
            CheckSpec("allocators.pf_prime_feasible", "pf-prime-feasibility", self.allocators_pf_prime_feasible),
            CheckSpec("allocators.single_link_coincidence", "single-link-coincidence", self.allocators_single_link),
            CheckSpec("capacity.monotone_convex", "region-geometry", self.capacity_monotone_convex, seeded=True),
            CheckSpec("dynamics.conservation", "markov-dynamics", self.dynamics_conservation, seeded=True),
            CheckSpec("dynamics.fluid_limit", "fluid-limit", self.dynamics_fluid_limit, seeded=True),
            CheckSpec("dynamics.insensitivity", "insensitivity", self.dynamics_insensitivity, seeded=True),
            CheckSpec("dynamics.instability", "instability", self.dynamics_instability, seeded=True),
            CheckSpec("dynamics.mm1_law", "markov-dynamics", self.dynamics_mm1_law, seeded=True),
            CheckSpec("dynamics.pf_decay", "ld-window", self.dynamics_pf_decay, seeded=True),
            CheckSpec("fluid.bookkeeping", "fluid-trajectory", self.fluid_bookkeeping),
            CheckSpec("fluid.descent", "fluid-descent", self.fluid_descent),
            CheckSpec("fluid.first_order", "fluid-trajectory", self.fluid_first_order),
            CheckSpec("lyapunov.norm_bounds", "norm-equivalence", self.lyapunov_norm_bounds, seeded=True, lower_is_worse=True),
            CheckSpec("lyapunov.sandwich", "balance-sandwich", self.lyapunov_sandwich),
            CheckSpec("lyapunov.scaling_window", "ld-window", self.lyapunov_scaling_window),
            CheckSpec("lyapunov.second_order", "second-order-bound", self.lyapunov_second_order, seeded=True),
            CheckSpec("pf.closed_form", "pf-optimum", self.pf_closed_form),
            CheckSpec("pf.convexity", "legendre-convexity", self.pf_convexity, seeded=True),
            CheckSpec("pf.difference_quotients", "legendre-quotients", self.pf_difference_quotients, seeded=True),
            CheckSpec("pf.gradient_consistency", "legendre-gradient", self.pf_gradient_consistency, seeded=True),
            CheckSpec("pf.homogeneity", "legendre-homogeneity", self.pf_homogeneity, seeded=True),
            CheckSpec("pf.monotone_quotient", "legendre-quotients", self.pf_monotone_quotient, seeded=True),
            CheckSpec("stationary.bf_detailed_balance", "bf-reversibility", self.stationary_bf_balance),
            CheckSpec("stationary.oracle_agreement", "exact-oracle", self.stationary_oracle_agreement),
            CheckSpec("stationary.pf_irreversible", "pf-irreversibility", self.stationary_pf_irreversible),
            CheckSpec("stationary.pf_prime_detailed_balance", "pf-prime-reversibility", self.stationary_pf_prime_balance),
            CheckSpec("stationary.routing_bias", "exact-oracle", self.stationary_routing_bias),
            CheckSpec("traffic.drift_equality", "drift-functional", self.traffic_drift_equality, seeded=True),
            CheckSpec("traffic.drift_nonnegative", "drift-functional", self.traffic_drift_nonnegative, seeded=True),
            CheckSpec("traffic.excursion_identity", "excursion-removal", self.traffic_excursion_identity, seeded=True),
            CheckSpec("traffic.phase_loads", "phase-loads", self.traffic_phase_loads),
        ]
        return sorted(specs, key=lambda c: c.id)


def _record(spec: CheckSpec, seeds: Sequence[int], budget_left: float) -> CheckRecord:
    if budget_left <= 0:
        return CheckRecord(id=spec.id, ref=spec.ref, instance="", status=CheckStatus.SKIPPED, detail="time budget exhausted")

    started = time.perf_counter()
    try:
        outcome = spec.evaluate(seeds)
    except FairshareError as e:
        logger.error(f"❌ {spec.id} raised {type(e).__name__}: {e}")
        return CheckRecord(
            id=spec.id, ref=spec.ref, instance="", status=CheckStatus.FAIL,
            runtime=time.perf_counter() - started, detail=f"{type(e).__name__}: {e}",
        )

    if outcome.diagnostic:
        status = CheckStatus.DIAGNOSTIC
    else:
        status = CheckStatus.PASS if outcome.passed else CheckStatus.FAIL

    def finite(v: float) -> Optional[float]:
        return float(v) if v is not None and math.isfinite(v) else None

    record = CheckRecord(
        id=spec.id,
        ref=spec.ref,
        instance=outcome.instance,
        measured=finite(outcome.measured),
        threshold=finite(outcome.threshold),
        status=status,
        runtime=time.perf_counter() - started,
        detail=outcome.detail,
    )
    icon = {CheckStatus.PASS: "✅", CheckStatus.FAIL: "❌"}.get(status, "📝")
    logger.info(f"{icon} {spec.id}: {status.value} (measured {outcome.measured}, {record.runtime:.1f}s)")
    return record


def run_all(
    scenarios: Optional[Sequence[LoadedScenario]] = None,
    seeds: Sequence[int] = (0,),
    budget: float = 3600.0,
    table_hook: Optional[TableHook] = None,
    only: Optional[Sequence[str]] = None,
    workers: Optional[int] = None,
) -> VerificationReport:
    """
    Run the battery. `only` restricts it to check ids with one of the given
    prefixes; `table_hook` rewrites every balance table the battery builds.
    Each check reads the remaining budget when a worker picks it up.
    """
    verifier = Verifier(scenarios=scenarios, seeds=seeds, table_hook=table_hook)
    specs = verifier.checks()
    if only:
        specs = [s for s in specs if any(s.id.startswith(prefix) for prefix in only)]

    logger.info(f"🚀 Running {len(specs)} checks over seeds {verifier.seeds} with budget {budget:g}s")
    workers = settings.VERIFY_WORKERS if workers is None else workers
    started = time.perf_counter()

    def run(spec: CheckSpec) -> CheckRecord:
        return _record(spec, verifier.seeds, budget - (time.perf_counter() - started))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = sorted(pool.map(run, specs), key=lambda r: r.id)

    if any(r.status == CheckStatus.FAIL for r in records):
        status = "fail"
    elif any(r.status == CheckStatus.SKIPPED for r in records):
        status = "incomplete"
    else:
        status = "pass"
    logger.info(f"Verification finished: {status}")
    return VerificationReport(status=status, seeds=verifier.seeds, budget=budget, checks=records)
