import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from resflow.dynamics import (
    DEFAULT_INTEGRATOR,
    Domain,
    IntegratorConfig,
    SystemDef,
    builtin_systems,
    effective_increment_oracle,
    estimate_lipschitz,
    get_system,
    integrate_flow,
    integrate_flow_in_domain,
    make_toggle,
    rhs_eval,
    sup_f_norm,
    toggle_algebraic_z,
    toggle_dae_rhs,
    zero_system,
)
from resflow.errors import ContractError, DomainError, IntegrationError

A2 = np.array([[1.0, -4.0], [4.0, -7.0]])
A1 = np.array([[1.0, 1.0], [1.0, -1.0]])


class TestDomain:
    def test_degenerate_rejected(self):
        with pytest.raises(ContractError):
            Domain((0.0, 1.0), (1.0, 1.0))

    def test_corners(self):
        d = Domain((0.0, -1.0), (2.0, 3.0))
        corners = {tuple(c) for c in d.corners()}
        assert corners == {(0.0, -1.0), (2.0, -1.0), (0.0, 3.0), (2.0, 3.0)}

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_samples_inside(self, seed):
        d = Domain((-np.pi, -2 * np.pi), (np.pi, 2 * np.pi))
        x = d.sample(50, np.random.default_rng(seed))
        assert d.contains(x).all()

    def test_dict_round_trip(self):
        d = Domain((0.0, 0.0), (20.0, 20.0))
        assert Domain.from_dict(d.to_dict()) == d


class TestRhs:
    def test_example1_equilibrium(self):
        np.testing.assert_array_equal(rhs_eval(get_system("example1"), [1.0, 1.0]), [0.0, 0.0])

    def test_example2_substitution(self):
        np.testing.assert_array_equal(rhs_eval(get_system("example2"), [1.0, 1.0]), [-3.0, -3.0])

    def test_pendulum_equilibrium(self):
        np.testing.assert_array_equal(rhs_eval(get_system("pendulum"), [0.0, 0.0]), [0.0, 0.0])

    def test_example1_lookup_value(self):
        np.testing.assert_array_equal(rhs_eval(get_system("example1"), [1.5, 0.0]), [-0.5, 1.5])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            rhs_eval(get_system("example1"), [1.0, 2.0, 3.0])

    def test_toggle_negative_state_is_domain_error(self):
        # a negative repressor concentration raised to the 2.5 power is not real
        with pytest.raises(DomainError):
            rhs_eval(get_system("toggle"), [1.0, -0.5])

    def test_batched_matches_pointwise(self):
        s = get_system("pendulum")
        x = s.default_domain.sample(7, np.random.default_rng(3))
        np.testing.assert_array_equal(rhs_eval(s, x), np.array([rhs_eval(s, p) for p in x]))


class TestParameters:
    def test_pendulum(self):
        p = get_system("pendulum").parameters
        assert p["alpha"] == 8.91 and p["beta"] == 0.2

    def test_toggle(self):
        p = get_system("toggle").parameters
        assert p["K"] == 2.9618e-5
        assert p["alpha1"] == 156.25 and p["alpha2"] == 15.6
        assert p["beta"] == 2.5 and p["gamma"] == 1.0
        assert p["iptg"] == 1e-5 and p["eta"] == 2.0015

    def test_eta_override(self):
        assert get_system("toggle", eta=2.5).parameters["eta"] == 2.5

    def test_unknown_system(self):
        with pytest.raises(KeyError):
            get_system("lorenz")

    def test_builtin_names(self):
        assert [s.name for s in builtin_systems()] == ["example1", "example2", "pendulum", "toggle", "decay"]


class TestToggleReduction:
    """Eliminating the algebraic variable leaves the ODE right-hand side."""

    @pytest.mark.parametrize("eta", [2.0015, 1.0, 2.5])
    def test_matches_dae(self, eta):
        s = make_toggle(eta)
        x = s.default_domain.sample(200, np.random.default_rng(11))
        z = toggle_algebraic_z(x[:, 0], s.parameters)
        d1, d2 = toggle_dae_rhs(x[:, 0], x[:, 1], z, s.parameters)
        np.testing.assert_allclose(rhs_eval(s, x), np.stack([d1, d2], axis=1), rtol=1e-14, atol=1e-12)


class TestIntegrateFlow:
    def test_decay(self):
        x = integrate_flow(get_system("decay"), [1.0], 0.1)
        assert abs(x[0] - math.exp(-0.1)) < 1e-10
        np.testing.assert_allclose(x, [0.904837418], atol=5e-10)

    def test_example2_value(self):
        x = integrate_flow(get_system("example2"), [0.0, -1.0], 0.1)
        np.testing.assert_allclose(x, [0.296327, -0.444491], atol=5e-7)

    @pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
    def test_example2_against_expm(self, t):
        x0 = np.array([0.0, -1.0])
        np.testing.assert_allclose(integrate_flow(get_system("example2"), x0, t), expm(A2 * t) @ x0,
                                   atol=1e-8, rtol=0)

    @pytest.mark.parametrize("t", [0.1, 0.7, 2.0])
    def test_example1_against_expm(self, t):
        x0 = np.array([1.5, 0.0])
        expected = np.ones(2) + expm(A1 * t) @ (x0 - 1.0)
        np.testing.assert_allclose(integrate_flow(get_system("example1"), x0, t), expected, atol=1e-9)

    @pytest.mark.parametrize("name", ["example1", "example2", "decay"])
    def test_analytic_flow_helpers_match_expm(self, name):
        s = get_system(name)
        x = s.default_domain.sample(20, np.random.default_rng(0))
        np.testing.assert_allclose(s.analytic_flow(x, 0.3), integrate_flow(s, x, 0.3), atol=1e-10)

    @pytest.mark.parametrize("system", builtin_systems(), ids=lambda s: s.name)
    def test_zero_time_is_identity(self, system):
        x = system.default_domain.sample(5, np.random.default_rng(1))
        out = integrate_flow(system, x, 0.0)
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_rk45_agrees_with_rk4(self):
        s = get_system("pendulum")
        x = s.default_domain.sample(10, np.random.default_rng(2))
        a = integrate_flow(s, x, 0.1)
        b = integrate_flow(s, x, 0.1, IntegratorConfig(method="rk45"))
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_step_count_rounding(self):
        cfg = DEFAULT_INTEGRATOR
        assert cfg.steps_for(0.1) == 100
        assert cfg.steps_for(0.05) == 50
        assert cfg.steps_for(0.1 / 3) == 34

    def test_blow_up_reports_index(self):
        blow = SystemDef("blow", 1, lambda x: x * x, Domain((0.0,), (1.0,)))
        with pytest.raises(IntegrationError) as info:
            integrate_flow(blow, np.array([[0.1], [50.0]]), 1.0)
        assert info.value.index == 1

    def test_negative_time_rejected(self):
        with pytest.raises(ContractError):
            integrate_flow(get_system("decay"), [1.0], -0.1)


class TestInDomain:
    def test_exit_detected(self):
        s = get_system("example1")
        # the unstable direction carries (1.5, 0) out of [0, 2]^2 before t = 2
        _, inside = integrate_flow_in_domain(s, np.array([[1.5, 0.0], [1.0, 1.0]]), 2.0, s.default_domain)
        np.testing.assert_array_equal(inside, [False, True])

    def test_same_endpoint_as_plain(self):
        s = get_system("example2")
        x = s.default_domain.sample(10, np.random.default_rng(4))
        out, _ = integrate_flow_in_domain(s, x, 0.1, s.default_domain)
        np.testing.assert_array_equal(out, integrate_flow(s, x, 0.1))


class TestIncrementOracle:
    def test_equilibrium(self):
        np.testing.assert_array_equal(
            effective_increment_oracle(get_system("example1"), [1.0, 1.0], 0.1), [0.0, 0.0])

    def test_decay(self):
        np.testing.assert_allclose(effective_increment_oracle(get_system("decay"), [1.0], 0.1),
                                   [-0.095162582], atol=5e-10)

    def test_example2(self):
        np.testing.assert_allclose(effective_increment_oracle(get_system("example2"), [0.0, -1.0], 0.1),
                                   [0.296327, 0.555509], atol=5e-7)


class TestLipschitz:
    def test_decay(self):
        s = get_system("decay")
        assert abs(estimate_lipschitz(s, s.default_domain, 2000).value - 1.0) < 1e-6

    def test_example2_singular_value(self):
        # singular values of A are 9 and 1
        assert abs(np.linalg.svd(A2, compute_uv=False)[0] - 9.0) < 1e-12
        s = get_system("example2")
        assert abs(estimate_lipschitz(s, Domain((-5.0, -5.0), (5.0, 5.0)), 2000).value - 9.0) < 1e-4

    def test_example1(self):
        s = get_system("example1")
        assert abs(estimate_lipschitz(s, s.default_domain, 2000).value - math.sqrt(2)) < 1e-4

    def test_seeded(self):
        s = get_system("pendulum")
        a = estimate_lipschitz(s, s.default_domain, 500, seed=3)
        b = estimate_lipschitz(s, s.default_domain, 500, seed=3)
        assert a == b

    def test_pendulum_bounds(self):
        # |J| is at most the norm of [[0, 1], [beta, alpha]] and at least alpha
        s = get_system("pendulum")
        L = estimate_lipschitz(s, s.default_domain, 2000).value
        assert 8.91 <= L <= np.linalg.norm([[0.0, 1.0], [0.2, 8.91]], 2) + 1e-6


class TestSupNorm:
    def test_example1_corner_max(self):
        s = get_system("example1")
        assert abs(sup_f_norm(s, s.default_domain, 1000) - 2.0) < 0.05

    def test_decay(self):
        s = get_system("decay")
        assert sup_f_norm(s, s.default_domain, 100) == 1.0

    def test_zero(self):
        s = zero_system(2)
        assert sup_f_norm(s, s.default_domain, 100) == 0.0
