"""
Tests for routing, traffic equations, excursion removal and phase-type service
Run with: pytest tests/test_traffic.py -v
"""

import math

import numpy as np
import pytest

from fairshare.capacity import CapacityRegion
from fairshare.errors import DimensionError, InvalidInputError, SpectralRadiusError
from fairshare.traffic import (
    PhaseType,
    PhaseTypeSpec,
    TrafficModel,
    check_spectral_radius,
    drift_functional,
    expand_phase_type,
    reduce_routing,
    remove_excursions,
    solve_traffic,
)
from fairshare.verify import random_substochastic


def neumann_traffic(nu_bar, P, terms=2000):
    """nu = sum_k (P^T)^k nu_bar, truncated"""
    total = np.zeros(len(nu_bar))
    term = np.asarray(nu_bar, dtype=float)
    for _ in range(terms):
        total += term
        term = P.T @ term
    return total


class TestSpectralRadius:
    """Certification of substochastic routing"""

    def test_symmetric_example(self):
        """[[0, .5], [.5, 0]] has radius 0.5"""
        cert = check_spectral_radius([[0.0, 0.5], [0.5, 0.0]])
        assert cert.certified
        assert cert.radius == pytest.approx(0.5)

    def test_zero_matrix(self):
        """No routing is trivially certified"""
        assert check_spectral_radius(np.zeros((3, 3))).radius == 0.0

    def test_stochastic_cycle_rejected(self):
        """A closed cycle never lets work leave"""
        cert = check_spectral_radius([[0.0, 1.0], [1.0, 0.0]])
        assert not cert.certified
        assert cert.radius == pytest.approx(1.0)

    def test_periodic_cycle_with_leak(self):
        """Eigenvalues sharing the Perron modulus still give the radius"""
        P = 0.99 * np.roll(np.eye(3), 1, axis=1)
        cert = check_spectral_radius(P)
        assert cert.certified
        assert cert.radius == pytest.approx(0.99)

    def test_slow_leak_certified(self):
        """A radius just below one is certified by the squared-norm bound"""
        cert = check_spectral_radius([[0.0, 1.0], [0.0, 0.999999]])
        assert cert.certified
        assert cert.radius == pytest.approx(0.999999)

    def test_row_sum_above_one(self):
        """Rows summing above 1 are named in the error"""
        with pytest.raises(InvalidInputError, match="row 0"):
            check_spectral_radius([[0.9, 0.6], [0.0, 0.0]])

    def test_non_square(self):
        """Routing matrices are square"""
        with pytest.raises(DimensionError):
            check_spectral_radius([[0.1, 0.2, 0.3]])


class TestTrafficEquations:
    """Effective arrival rates"""

    def test_tandem(self):
        """Half of the class-1 completions feed class 2"""
        nu = solve_traffic([1.0, 0.0], [[0.0, 0.5], [0.0, 0.0]])
        np.testing.assert_allclose(nu, [1.0, 0.5])

    def test_feedback(self):
        """Class 2 sees its own arrivals plus half of class 1"""
        nu = solve_traffic([1.0, 0.5], [[0.0, 0.5], [0.0, 0.0]])
        np.testing.assert_allclose(nu, [1.0, 1.0])

    def test_neumann_agreement(self, rng):
        """Direct solve matches the truncated Neumann series"""
        for _ in range(50):
            n = int(rng.integers(1, 6))
            P = random_substochastic(rng, n, max_row=0.9)
            nu_bar = rng.uniform(0, 1, n)
            np.testing.assert_allclose(solve_traffic(nu_bar, P), neumann_traffic(nu_bar, P), atol=1e-10)

    def test_model_loads(self):
        """rho = nu / mu"""
        model = TrafficModel(np.array([1.0, 0.0]), np.array([2.0, 4.0]), np.array([[0.0, 1.0], [0.0, 0.0]]))
        np.testing.assert_allclose(model.rho, [0.5, 0.25])
        np.testing.assert_allclose(model.exit_probabilities, [0.0, 1.0])
        assert model.has_routing

    def test_uncertified_model(self):
        """A routing loop without exit is a spectral radius error"""
        with pytest.raises(SpectralRadiusError):
            TrafficModel(np.array([1.0, 1.0]), np.ones(2), np.array([[0.0, 1.0], [1.0, 0.0]]))

    def test_zero_arrivals_warn(self, caplog):
        """All-zero arrivals are accepted with a warning"""
        model = TrafficModel.without_routing([0.0, 0.0], [1.0, 1.0])
        assert np.all(model.rho == 0)
        assert "only drains" in caplog.text

    def test_invalid_rates(self):
        """Negative arrivals and zero service rates are rejected"""
        with pytest.raises(InvalidInputError):
            TrafficModel.without_routing([-1.0], [1.0])
        with pytest.raises(InvalidInputError):
            TrafficModel.without_routing([1.0], [0.0])

    def test_reversibility_gap(self, builtins):
        """Symmetric feedback is reversible, tandem routing is not"""
        assert builtins["reversible_routing"].model.reversibility_gap() <= 1e-12
        assert builtins["tandem"].model.reversibility_gap() > 0.1


class TestExcursionRemoval:
    """Routing seen from outside a class subset"""

    def test_feedback_example(self):
        """Removing class 2 from the feedback pair leaves class 2 alone with nu = 1"""
        model = TrafficModel(np.array([1.0, 0.5]), np.ones(2), np.array([[0.0, 0.5], [0.0, 0.0]]))
        nu_tilde, P_tilde = remove_excursions(model, [0])
        np.testing.assert_allclose(nu_tilde, [1.0])
        np.testing.assert_allclose(P_tilde, [[0.0]])

    def test_routing_into_kept_class(self):
        """p21 = 0.5 and nu_bar = (1, 1): removing class 2 gives nu_tilde = 1.5"""
        model = TrafficModel(np.array([1.0, 1.0]), np.ones(2), np.array([[0.0, 0.0], [0.5, 0.0]]))
        nu_tilde, P_tilde = remove_excursions(model, [1])
        np.testing.assert_allclose(nu_tilde, [1.5])
        np.testing.assert_allclose(P_tilde, [[0.0]])
        np.testing.assert_allclose(solve_traffic(nu_tilde, P_tilde), model.nu[[0]])

    def test_empty_subset_is_identity(self, builtins):
        """Removing nothing keeps the model"""
        model = builtins["tandem"].model
        nu_tilde, P_tilde = remove_excursions(model, [])
        np.testing.assert_allclose(nu_tilde, model.nu_bar)
        np.testing.assert_allclose(P_tilde, model.P)

    def test_full_subset(self, builtins):
        """Removing every class is an input error"""
        with pytest.raises(InvalidInputError):
            remove_excursions(builtins["tandem"].model, [0, 1])

    def test_effective_rates_preserved(self, rng):
        """Reduced traffic equations reproduce nu outside the subset"""
        for _ in range(100):
            n = int(rng.integers(2, 6))
            model = TrafficModel(rng.uniform(0, 1, n), np.ones(n), random_substochastic(rng, n))
            inside = sorted(set(rng.integers(0, n, int(rng.integers(1, n))).tolist()))
            nu_tilde, P_tilde, outside = reduce_routing(model.nu_bar, model.P, inside)
            assert np.all(P_tilde >= -1e-15)
            assert np.all(P_tilde.sum(axis=1) <= 1 + 1e-12)
            np.testing.assert_allclose(solve_traffic(nu_tilde, P_tilde), model.nu[outside], atol=1e-10)


class TestDriftFunctional:
    """F_r(u) over substochastic routing"""

    def test_no_routing_example(self):
        """With P = 0 and u = 1, F = e - 1"""
        assert drift_functional([[0.0]], [1.0], 0) == pytest.approx(math.e - 1)

    def test_zero_at_origin(self):
        """F vanishes at u = 0"""
        assert drift_functional([[0.0, 0.5], [0.2, 0.0]], [0.0, 0.0], 1) == 0.0

    def test_nonnegative(self, rng):
        """F_r(u) >= 0 and F_r(u) >= F_r(u+), for exp and tanh weights"""
        for _ in range(500):
            n = int(rng.integers(1, 6))
            P = random_substochastic(rng, n)
            u = rng.uniform(-3, 3, n)
            r = int(rng.integers(n))
            value = drift_functional(P, u, r)
            assert value >= -1e-12
            assert value >= drift_functional(P, np.maximum(u, 0), r) - 1e-12
            assert drift_functional(P, u, r, g=np.tanh) >= -1e-12

    def test_bad_class(self):
        """r must index u"""
        with pytest.raises(DimensionError):
            drift_functional([[0.0]], [1.0], 1)


class TestPhaseType:
    """Phase-type service and its expansion"""

    def test_means(self):
        """Erlang-2 has mean 2 / mu, the balanced hyperexponential 0.75"""
        assert PhaseType.erlang(2, 3.0).mean() == pytest.approx(2 / 3)
        assert PhaseType.hyperexponential([0.5, 0.5], [1.0, 2.0]).mean() == pytest.approx(0.75)
        assert PhaseType.exponential(4.0).mean() == pytest.approx(0.25)

    def test_invalid_initial_law(self):
        """alpha must be a probability vector"""
        with pytest.raises(InvalidInputError):
            PhaseType(np.array([0.5, 0.4]), np.ones(2), np.zeros((2, 2)))

    def test_expansion_loads(self, shared_link, shared_model):
        """Phase loads of a class add up to nu_r times its mean service"""
        spec = PhaseTypeSpec((PhaseType.erlang(2, 2.0), PhaseType.hyperexponential([0.5, 0.5], [1.0, 2.0])))
        expansion = expand_phase_type(shared_link, shared_model, spec)
        assert expansion.num_phases == 4
        assert expansion.class_map.tolist() == [0, 0, 1, 1]
        assert expansion.load_identity_residual() <= 1e-12
        np.testing.assert_allclose(expansion.class_loads(), [0.3, 0.225])
        np.testing.assert_allclose(expansion.aggregate([1, 2, 3, 4]), [3, 7])
        assert isinstance(expansion.region, CapacityRegion)
        assert expansion.region.num_classes == 4

    def test_random_phase_type_loads(self, shared_link, shared_model, rng):
        """The load identity holds for random phase-type laws"""
        for _ in range(50):
            laws = []
            for _ in range(2):
                n = int(rng.integers(1, 5))
                laws.append(PhaseType(rng.dirichlet(np.ones(n)), rng.uniform(0.5, 3.0, n), random_substochastic(rng, n, max_row=0.5)))
            expansion = expand_phase_type(shared_link, shared_model, PhaseTypeSpec(tuple(laws)))
            scale = max(1.0, float(expansion.class_loads().max()))
            assert expansion.load_identity_residual() <= 1e-12 * scale

    def test_expansion_rejects_routing(self, builtins):
        """Inter-class routing cannot be combined with phases"""
        tandem = builtins["tandem"]
        spec = PhaseTypeSpec((PhaseType.exponential(1.0), PhaseType.exponential(1.0)))
        with pytest.raises(InvalidInputError):
            expand_phase_type(tandem.region, tandem.model, spec)
