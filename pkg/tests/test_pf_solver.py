"""
Tests for the alpha-fair solver and the legendre function
Run with: pytest tests/test_pf_solver.py -v
"""

import itertools
import math

import numpy as np
import pytest

from fairshare.capacity import CapacityRegion
from fairshare.errors import DimensionError, InvalidInputError, SolverError
from fairshare.pf_solver import (
    DualBarrierSolver,
    alpha_fair_allocate,
    legendre,
    pf_allocate,
    pf_gradient,
)


def grid_search_pf(region, x, steps=200):
    """Brute-force maximizer of sum x log lam on a grid of the region's boundary (two classes)"""
    best, best_lam = -math.inf, None
    for a in np.linspace(1e-6, 1.0, steps):
        direction = np.array([a, 1.0 - a])
        lam = direction / np.max(region.A @ direction / region.c)
        value = float(np.sum(x * np.log(lam)))
        if value > best:
            best, best_lam = value, lam
    return best, best_lam


class TestClosedForms:
    """Allocations with known answers"""

    def test_two_link_network(self, two_link):
        """x=(1,1,1) gives (2/3, 2/3, 1/3)"""
        result = pf_allocate(two_link, [1, 1, 1])
        np.testing.assert_allclose(result.rates, [2 / 3, 2 / 3, 1 / 3], atol=1e-7)
        assert result.kkt_residual <= 1e-9

    def test_single_link_shares(self, shared_link):
        """Rates proportional to populations on a single link"""
        result = pf_allocate(shared_link, [3, 1])
        np.testing.assert_allclose(result.rates, [0.75, 0.25], atol=1e-12)
        assert result.prices[0] == pytest.approx(4.0)

    def test_empty_class_gets_nothing(self, two_link):
        """x_r = 0 gives rate 0 and log rate -inf"""
        result = pf_allocate(two_link, [1, 0, 1])
        assert result.rates[1] == 0.0
        assert math.isinf(result.log_rates[1])
        np.testing.assert_allclose(result.rates, [0.5, 0.0, 0.5], atol=1e-7)
        assert result.to_dict()["log_rates"][1] is None

    def test_origin(self, two_link):
        """The empty network allocates nothing"""
        result = pf_allocate(two_link, [0, 0, 0])
        assert np.all(result.rates == 0)
        assert result.objective == 0.0

    def test_legendre_single_link(self, shared_link):
        """legendre((1,1)) = -2 log 2 on a unit link"""
        assert legendre(shared_link, [1, 1]) == pytest.approx(-2 * math.log(2), abs=1e-10)

    def test_grid_search_agreement(self, rng):
        """Barrier optimum matches a brute-force boundary search"""
        region = CapacityRegion.from_lists([[1.0, 2.0], [3.0, 1.0]], [2.0, 3.0])
        for _ in range(5):
            x = rng.uniform(0.5, 3.0, 2)
            best, _ = grid_search_pf(region, x, steps=4000)
            assert legendre(region, x) >= best - 1e-9
            assert legendre(region, x) - best <= 1e-3


    def test_two_link_three_dimensional_grid(self, two_link):
        """A full grid over the cube of rates finds the same PF point at x=(1,1,1)"""
        grid = np.linspace(0.0, 1.0, 91)
        lam = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
        lam = lam[np.all(lam @ two_link.A.T <= two_link.c + 1e-12, axis=1) & np.all(lam > 0, axis=1)]
        values = np.log(lam).sum(axis=1)
        best = lam[np.argmax(values)]
        np.testing.assert_allclose(best, [2 / 3, 2 / 3, 1 / 3], atol=1e-12)
        assert legendre(two_link, [1, 1, 1]) == pytest.approx(values.max(), abs=1e-9)

class TestAlphaFair:
    """(w, alpha)-fair allocations"""

    def test_alpha_one_is_pf(self, line_network):
        """alpha=1 with unit weights reproduces PF"""
        x = [1.0, 2.0, 1.0, 3.0]
        np.testing.assert_allclose(
            alpha_fair_allocate(line_network, x).rates, pf_allocate(line_network, x).rates, atol=1e-8
        )

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 5.0])
    def test_single_link_closed_form(self, shared_link, alpha):
        """On one link per-user rates follow (w_r)^(1/alpha)"""
        w = np.array([1.0, 4.0])
        result = alpha_fair_allocate(shared_link, [1, 1], w=w, alpha=alpha)
        expected = w ** (1 / alpha) / np.sum(w ** (1 / alpha))
        np.testing.assert_allclose(result.rates, expected, atol=1e-10)

    def test_large_alpha_approaches_max_min(self, two_link):
        """Large alpha moves the two-link allocation towards (1/2, 1/2, 1/2)"""
        result = alpha_fair_allocate(two_link, [1, 1, 1], alpha=20.0)
        np.testing.assert_allclose(result.rates, [0.5, 0.5, 0.5], atol=0.02)

    def test_saturates_and_certifies(self, line_network, rng):
        """Every solution is feasible, saturates a link and carries a certificate"""
        for alpha in (0.5, 1.0, 3.0):
            x = rng.uniform(0.1, 5.0, 4)
            result = alpha_fair_allocate(line_network, x, alpha=alpha)
            slack = line_network.slack(result.rates)
            assert slack.min() >= -1e-9
            assert slack.min() <= 1e-7
            assert result.kkt_residual <= 1e-9

    def test_invalid_parameters(self, two_link):
        """Bad weights, alpha or populations are input errors"""
        with pytest.raises(InvalidInputError):
            alpha_fair_allocate(two_link, [1, 1, 1], alpha=0.0)
        with pytest.raises(InvalidInputError):
            alpha_fair_allocate(two_link, [1, 1, 1], w=[1, -1, 1])
        with pytest.raises(InvalidInputError):
            alpha_fair_allocate(two_link, [1, -1, 1])
        with pytest.raises(DimensionError):
            alpha_fair_allocate(two_link, [1, 1])

    def test_iteration_cap_is_reported(self, two_link):
        """A solver without iterations cannot certify"""
        with pytest.raises(SolverError) as excinfo:
            alpha_fair_allocate(two_link, [1, 2, 3], solver=DualBarrierSolver(max_iter=1))
        assert excinfo.value.iterations >= 1


class TestLegendreProperties:
    """Homogeneity, convexity and the gradient identity"""

    def test_homogeneity(self, line_network, rng):
        """legendre(a x) = a legendre(x)"""
        for _ in range(10):
            x = rng.uniform(0.0, 4.0, 4)
            a = rng.uniform(0.1, 10.0)
            assert legendre(line_network, a * x) == pytest.approx(a * legendre(line_network, x), rel=1e-8, abs=1e-8)

    def test_gradient_matches_log_rates(self, two_link, rng):
        """Central differences of legendre reproduce log PF rates"""
        eps = 1e-4
        x = rng.uniform(0.5, 3.0, 3)
        grad = pf_gradient(two_link, x)
        for r in range(3):
            e = np.zeros(3)
            e[r] = eps
            fd = (legendre(two_link, x + e) - legendre(two_link, x - e)) / (2 * eps)
            assert fd == pytest.approx(grad[r], abs=1e-5)

    def test_gradient_needs_positive_state(self, two_link):
        """Boundary states have no gradient"""
        with pytest.raises(InvalidInputError):
            pf_gradient(two_link, [1, 0, 1])

    def test_convex_along_segments(self, line_network, rng):
        """legendre lies below its chords"""
        for a, b in itertools.islice(zip(rng.uniform(0, 3, (20, 4)), rng.uniform(0, 3, (20, 4))), 20):
            mid = legendre(line_network, (a + b) / 2)
            assert mid <= (legendre(line_network, a) + legendre(line_network, b)) / 2 + 1e-9

    def test_difference_quotient_rates_feasible(self, two_link, rng):
        """exp of backward difference quotients is a feasible rate vector"""
        for _ in range(20):
            x = rng.uniform(0.5, 4.0, 3)
            step = x * rng.uniform(0.05, 1.0, 3)
            lam = np.array(
                [
                    math.exp((legendre(two_link, x) - legendre(two_link, x - step[r] * np.eye(3)[r])) / step[r])
                    for r in range(3)
                ]
            )
            assert two_link.contains(lam, tol=1e-8)
