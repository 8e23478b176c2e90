"""
Tests for the verification battery
Run with: pytest tests/test_verify.py -v
"""

import threading

import numpy as np
import pytest

from fairshare.errors import SolverError
from fairshare.models import CheckStatus
from fairshare.scenarios import build_scenario, builtin_scenarios
from fairshare.schemas import Scenario
from fairshare.verify import (
    CLOSED_FORM_SCENARIOS,
    RESULTS,
    CheckSpec,
    Outcome,
    Verifier,
    _record,
    exact_box,
    random_region,
    random_substochastic,
    run_all,
)


def perturb_all_ones(table):
    return table.perturbed([1] * table.num_classes, -1.0)


def raise_state(state_of, delta=0.1):
    """Table hook adding delta to phi at state_of(num_classes)"""
    return lambda table: table.perturbed(state_of(table.num_classes), delta)


class TestHelpers:
    """Instance generators and box sizing"""

    def test_exact_box_respects_state_limit(self, builtins):
        """(N + 1)^R stays within the limit and N never exceeds run.box"""
        for s in builtins.values():
            N = exact_box(s)
            assert 1 <= N <= max(s.spec.run.box, 1)
            if N > 1:
                assert (N + 1) ** s.num_classes <= 4096
        assert exact_box(builtins["line_network"]) == 6
        assert exact_box(builtins["single_link_one"], limit=4) == 3

    def test_random_region_has_no_empty_rows_or_columns(self, rng):
        """Every class uses a link and every link carries a class"""
        for _ in range(50):
            region = random_region(rng)
            assert np.all(region.A.any(axis=0))
            assert np.all(region.A.any(axis=1))

    def test_random_substochastic_rows(self, rng):
        """Row sums stay below the cap"""
        for n in range(1, 6):
            P = random_substochastic(rng, n)
            assert np.all(P >= 0)
            assert np.all(P.sum(axis=1) <= 0.95 + 1e-12)

    def test_check_ids_sorted_and_unique(self):
        """Checks come out in id order"""
        ids = [c.id for c in Verifier().checks()]
        assert ids == sorted(ids)
        assert len(ids) == len(set(ids))
        assert "lyapunov.sandwich" in ids

    def test_refs_name_known_results(self):
        """Every check names exactly one result from the fixed vocabulary"""
        specs = Verifier().checks()
        for spec in specs:
            assert spec.ref in RESULTS
            assert RESULTS[spec.ref]
        assert {spec.ref for spec in specs} == set(RESULTS)

    def test_user_scenarios_join_reversible_set(self):
        """User scenarios without routing or phases are checked next to the builtins"""
        spec = Scenario.model_validate({
            "name": "mine",
            "capacity": {"A": [[1.0, 2.0]], "c": [2.0]},
            "traffic": {"nu_bar": [0.2, 0.2], "mu": [1.0, 1.0]},
        })
        user = build_scenario(spec)
        routed = builtin_scenarios(["tandem"])["tandem"]
        names = [s.name for s in Verifier(scenarios=[user, routed]).reversible_scenarios()]
        assert names[: len(CLOSED_FORM_SCENARIOS)] == list(CLOSED_FORM_SCENARIOS)
        assert "mine" in names
        assert "tandem" not in names


class TestRecord:
    """Turning outcomes into report rows"""

    def test_exhausted_budget_skips(self):
        """No budget left means the check never runs"""
        spec = CheckSpec("x.y", "ref", lambda: pytest.fail("should not run"))
        record = _record(spec, [0], 0.0)
        assert record.status == CheckStatus.SKIPPED

    def test_library_error_is_a_failure(self):
        """A raised library error is recorded as FAIL with its message"""
        def boom():
            raise SolverError("did not converge")

        record = _record(CheckSpec("x.y", "ref", boom), [0], 10.0)
        assert record.status == CheckStatus.FAIL
        assert "did not converge" in record.detail

    def test_non_finite_values_are_dropped(self):
        """NaN and infinite numbers become nulls"""
        spec = CheckSpec("x.y", "ref", lambda: Outcome(float("inf"), float("nan"), True, "inst"))
        record = _record(spec, [0], 10.0)
        assert record.status == CheckStatus.PASS
        assert record.measured is None
        assert record.threshold is None


class TestSeeds:
    """Stochastic checks over several seeds"""

    def test_seed_changes_measured_value(self):
        """Different seeds draw different instances"""
        verifier = Verifier(seeds=[0, 1])
        first = verifier.pf_gradient_consistency(0).measured
        second = verifier.pf_gradient_consistency(1).measured
        assert first != second

    def test_report_takes_worst_seed(self):
        """A two-seed run reports the larger error and names its seed"""
        verifier = Verifier(seeds=[0, 1])
        values = {seed: verifier.pf_gradient_consistency(seed).measured for seed in (0, 1)}
        worst = max(values, key=values.get)
        report = run_all(only=["pf.gradient_consistency"], seeds=[0, 1])
        (record,) = report.checks
        assert record.measured == pytest.approx(values[worst])
        assert f"seed {worst}" in record.detail
        assert report.seeds == [0, 1]

    def test_failing_seed_wins(self):
        """Any failing seed fails the check"""
        spec = CheckSpec(
            "x.y", "ref", lambda seed: Outcome(float(seed), 1.0, seed != 1, "inst"), seeded=True
        )
        outcome = spec.evaluate([0, 1, 2])
        assert not outcome.passed
        assert outcome.measured == 1.0
        assert "seed 1" in outcome.detail

    def test_lower_is_worse(self):
        """Lower bounds report the smallest value across seeds"""
        spec = CheckSpec(
            "x.y", "ref", lambda seed: Outcome(10.0 - seed, 0.0, True, "inst"), seeded=True, lower_is_worse=True
        )
        assert spec.evaluate([0, 3, 1]).measured == 7.0

    def test_unseeded_checks_run_once(self):
        """Deterministic checks ignore the seed list"""
        calls = []
        spec = CheckSpec("x.y", "ref", lambda: calls.append(1) or Outcome(0.0, 0.0, True, "inst"))
        spec.evaluate([0, 1, 2])
        assert calls == [1]


class TestRunAll:
    """Whole-battery behavior on small selections"""

    def test_selected_checks_pass(self):
        """Closed forms and the sandwich hold for the real tables"""
        report = run_all(only=["pf.closed_form", "lyapunov.sandwich", "allocators.single_link"])
        assert report.status == "pass"
        assert [c.id for c in report.checks] == [
            "allocators.single_link_coincidence",
            "lyapunov.sandwich",
            "pf.closed_form",
        ]

    def test_perturbed_tables_fail(self):
        """Shifting phi at the all-ones state breaks the sandwich"""
        report = run_all(only=["lyapunov.sandwich"], table_hook=perturb_all_ones)
        assert report.status == "fail"
        assert [c.id for c in report.failed] == ["lyapunov.sandwich"]

    @pytest.mark.parametrize(
        "state_of",
        [
            lambda R: [1] * R,
            lambda R: [1] + [0] * (R - 1),
            lambda R: [0] * (R - 1) + [1],
        ],
        ids=["all_ones", "first_axis", "last_axis"],
    )
    def test_small_shift_breaks_characterization(self, state_of):
        """Raising one entry of phi by 0.1 is caught"""
        report = run_all(only=["allocators.bf_characterization"], table_hook=raise_state(state_of))
        (record,) = report.checks
        assert record.status == CheckStatus.FAIL
        assert record.measured > 0.05

    def test_perturbed_tables_break_characterization(self):
        """Perturbed rates are no longer feasible and saturating"""
        report = run_all(only=["allocators.bf_characterization"], table_hook=perturb_all_ones)
        assert report.status == "fail"

    def test_zero_budget_is_incomplete(self):
        """With no time every check is skipped"""
        report = run_all(only=["pf."], budget=0.0)
        assert report.status == "incomplete"
        assert report.checks
        assert all(c.status == CheckStatus.SKIPPED for c in report.checks)

    def test_diagnostics_do_not_fail(self):
        """Diagnostic checks carry a value but no threshold"""
        report = run_all(only=["stationary.routing_bias"])
        (record,) = report.checks
        assert record.status == CheckStatus.DIAGNOSTIC
        assert record.threshold is None
        assert record.measured is not None and record.measured >= 0
        assert report.status == "pass"

    def test_reports_are_reproducible(self):
        """Same seeds give the same report apart from runtimes"""
        first = run_all(only=["pf.homogeneity", "traffic.excursion_identity"], seeds=[3])
        second = run_all(only=["pf.homogeneity", "traffic.excursion_identity"], seeds=[3])
        assert first.deterministic_view() == second.deterministic_view()
        assert first.seeds == [3]

    @pytest.mark.slow
    def test_full_battery(self):
        """Every non-diagnostic check passes on the builtins"""
        report = run_all(budget=7200.0)
        assert report.failed == []
        assert report.status == "pass"

    def test_checks_run_concurrently(self, monkeypatch):
        """Two checks waiting on each other both finish on a two-worker pool"""
        barrier = threading.Barrier(2, timeout=10)

        def meet():
            barrier.wait()
            return Outcome(0.0, 0.0, True, "inst")

        specs = [CheckSpec("b.second", "ref", meet), CheckSpec("a.first", "ref", meet)]
        monkeypatch.setattr(Verifier, "checks", lambda self: specs)
        report = run_all(workers=2)
        assert [c.id for c in report.checks] == ["a.first", "b.second"]
        assert report.status == "pass"

    def test_worker_count_does_not_change_results(self):
        """Per-check random streams keep reports identical across pool sizes"""
        only = ["pf.homogeneity", "pf.convexity", "traffic.drift_equality"]
        serial = run_all(only=only, seeds=[2], workers=1)
        pooled = run_all(only=only, seeds=[2], workers=3)
        assert serial.deterministic_view() == pooled.deterministic_view()
