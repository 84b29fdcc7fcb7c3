import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resflow.dynamics import Domain, SystemDef, builtin_systems, get_system, zero_system
from resflow.errors import ContractError
from resflow.flowmodels import make_model, oracle_model
from resflow.theory import (
    BoundReport,
    InconclusiveError,
    check_composition,
    check_flow_lipschitz,
    check_near_identity,
    check_rollout_bound,
    check_rollout_bounds,
    format_table,
    reports_to_json,
    rollout_error_bound,
)


class TestBoundFormula:
    def test_single_step_is_sup_error(self):
        assert rollout_error_bound(1.0, 0.1, 1, 0.0, 0.37) == pytest.approx(0.37, rel=1e-15)

    def test_hand_value(self):
        g = math.exp(0.2)
        expected = (1 + g) ** 3 * 0.01 + 0.5 * ((1 + g) ** 3 - 1) / g
        assert rollout_error_bound(2.0, 0.1, 3, 0.01, 0.5) == pytest.approx(expected, rel=1e-15)

    def test_m_zero(self):
        assert rollout_error_bound(3.0, 0.1, 0, 0.25, 9.0) == 0.25

    def test_overflow_is_infinite(self):
        assert rollout_error_bound(115.0, 0.1, 500, 0.0, 1e-3) == math.inf

    @given(st.floats(0, 20), st.floats(0.01, 1), st.integers(1, 30), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_m(self, L, delta, m, e0, sup):
        assert rollout_error_bound(L, delta, m + 1, e0, sup) >= rollout_error_bound(L, delta, m, e0, sup)

    def test_negative_m(self):
        with pytest.raises(ContractError):
            rollout_error_bound(1.0, 0.1, -1, 0.0, 0.1)


class TestReport:
    def test_tolerance_recorded(self):
        r = BoundReport("x", 1.0 + 5e-10, 1.0)
        assert r.satisfied
        assert r.context["abs_tol"] == 1e-9 and r.context["rel_tol"] == 1e-9

    def test_violation(self):
        assert not BoundReport("x", 1.0 + 1e-8, 1.0).satisfied

    def test_json_and_table(self):
        r = BoundReport("near_identity", 0.1, 0.2, context={"K": 3})
        data = json.loads(reports_to_json([r]))
        assert data[0]["satisfied"] is True and data[0]["context"]["K"] == 3
        assert "near_identity" in format_table([r])


class TestFlowLipschitz:
    def test_decay_contraction(self):
        s = get_system("decay")
        r = check_flow_lipschitz(s, s.default_domain, 0.5, 200, 1.0)
        assert r.measured == pytest.approx(math.exp(-0.5), rel=1e-9)
        assert r.bound == pytest.approx(1.6487, abs=1e-4)
        assert r.satisfied

    def test_example2(self):
        s = get_system("example2")
        r = check_flow_lipschitz(s, s.default_domain, 0.1, 500, 9.0)
        assert r.satisfied and r.bound == pytest.approx(math.exp(0.9))
        # the exact stretching factor is the spectral norm of exp(0.1 A)
        prop = math.exp(-0.3) * (np.eye(2) + 0.1 * np.array([[4.0, -4.0], [4.0, -4.0]]))
        assert r.measured <= np.linalg.norm(prop, 2) + 1e-6

    def test_zero_time(self):
        s = get_system("example1")
        r = check_flow_lipschitz(s, s.default_domain, 0.0, 50, math.sqrt(2))
        assert r.measured == pytest.approx(1.0, abs=1e-12) and r.bound == 1.0 and r.satisfied

    def test_undersized_constant_detected(self):
        s = get_system("example2")
        r = check_flow_lipschitz(s, s.default_domain, 0.1, 2000, 0.9)
        assert not r.satisfied

    def test_exclusions_counted(self):
        s = get_system("example1")
        r = check_flow_lipschitz(s, s.default_domain, 1.0, 200, math.sqrt(2))
        assert r.context["excluded"] > 0
        assert 0 < r.context["exclusion_rate"] < 1

    def test_all_excluded(self):
        drift = SystemDef("drift", 1, lambda x: np.ones_like(x) * 10.0, Domain((0.0,), (1.0,)))
        with pytest.raises(InconclusiveError):
            check_flow_lipschitz(drift, drift.default_domain, 0.5, 20, 0.0)


class TestComposition:
    def test_decay(self):
        assert check_composition(get_system("decay"), np.array([1.0]), 0.1, 3).measured < 1e-10

    def test_k1_exact(self):
        s = get_system("pendulum")
        x = s.default_domain.sample(10, np.random.default_rng(0))
        assert check_composition(s, x, 0.1, 1).measured == 0.0

    def test_example2(self):
        r = check_composition(get_system("example2"), np.array([0.0, -1.0]), 0.1, 5)
        assert r.measured < 1e-9 and r.satisfied and r.bound == 1e-8

    @pytest.mark.parametrize("system", builtin_systems(), ids=lambda s: s.name)
    def test_against_analytic_or_budget(self, system):
        x = system.default_domain.sample(20, np.random.default_rng(1))
        for K in (2, 3, 5):
            assert check_composition(system, x, 0.1, K).satisfied

    def test_bad_k(self):
        with pytest.raises(ContractError):
            check_composition(get_system("decay"), np.array([1.0]), 0.1, 0)


class TestNearIdentity:
    def test_decay(self):
        s = get_system("decay")
        r = check_near_identity(s, s.default_domain, 0.1, 1, 2000)
        assert r.measured == pytest.approx(1 - math.exp(-0.1), abs=1e-3)
        assert r.bound == pytest.approx(0.1) and r.satisfied

    def test_zero_system(self):
        s = zero_system(2)
        r = check_near_identity(s, s.default_domain, 0.1, 1, 100)
        assert r.measured == 0.0 and r.bound == 0.0 and r.satisfied

    def test_example1(self):
        s = get_system("example1")
        r = check_near_identity(s, s.default_domain, 0.1, 1, 2000)
        assert r.bound == pytest.approx(0.2, abs=5e-3) and r.measured < r.bound

    def test_k3_shrinks(self):
        s = get_system("pendulum")
        r1 = check_near_identity(s, s.default_domain, 0.1, 1, 1000)
        r3 = check_near_identity(s, s.default_domain, 0.1, 3, 1000)
        assert r3.bound == pytest.approx(r1.bound / 3) and r3.measured < r1.measured


class TestRolloutBound:
    def test_oracle_model_zero_error(self):
        s = get_system("example2")
        reports = check_rollout_bounds(oracle_model(s, 0.1), s, s.default_domain, np.array([0.0, -1.0]),
                                       20, 9.0, 1e-12)
        assert len(reports) == 20
        assert all(r.measured < 1e-12 and r.satisfied for r in reports)
        assert [r.context["m"] for r in reports] == list(range(1, 21))

    def test_context_fields(self):
        s = get_system("example1")
        m = make_model("resnet", 1, (4,), 2, 0.1, seed=0)
        r = check_rollout_bound(m, s, s.default_domain, np.array([1.0, 0.5]), 3, math.sqrt(2), 0.5)
        for key in ("L", "delta", "K", "m", "sup_error", "e0", "abs_tol", "rel_tol"):
            assert key in r.context
        assert r.context["m"] == 3 and r.context["e0"] == 0.0

    def test_initial_error(self):
        s = get_system("decay")
        r = check_rollout_bound(oracle_model(s, 0.1), s, s.default_domain, np.array([0.5]), 1, 1.0, 0.0,
                                y0=np.array([0.6]))
        assert r.context["e0"] == pytest.approx(0.1)
        assert r.measured == pytest.approx(0.1 * math.exp(-0.1), rel=1e-9)
        assert r.bound == pytest.approx((1 + math.exp(0.1)) * 0.1)

    def test_exit_flagged(self):
        s = get_system("example1")
        reports = check_rollout_bounds(oracle_model(s, 0.1), s, s.default_domain, np.array([1.5, 0.0]),
                                       20, math.sqrt(2), 1e-9)
        assert not reports[0].flags
        assert reports[-1].flags == ["hypothesis violated: a state left the domain"]

    def test_bad_m(self):
        s = get_system("decay")
        with pytest.raises(ContractError):
            check_rollout_bound(oracle_model(s, 0.1), s, s.default_domain, np.array([0.5]), 0, 1.0, 0.0)
