"""Oracle self-tests plus small-trial campaigns. The full 10^4-trial runs live
in test_acceptance.py."""
import math

import numpy as np
import pytest

from nac import oracle
from nac.oracle import ScalarODE


def test_rk4_is_fourth_order():
    # error of a single integration should drop ~16x per step doubling
    errs = []
    for steps in (16, 32, 64):
        traj = oracle.rk4_batch(3.0, 1.0, 0.5, 1.0, steps)
        errs.append(abs(traj[-1] - ScalarODE(3.0, 1.0, 0.5).exact(1.0)))
    assert 14 < errs[0] / errs[1] < 18
    assert 14 < errs[1] / errs[2] < 18


def test_rk4_needs_enough_steps():
    with pytest.raises(ValueError):
        oracle.rk4_batch(1.0, 1.0, 0.0, 1.0, 8)


def test_rk4_longdouble_dtype():
    out = oracle.rk4_batch(1.0, 0.5, 0.0, 1.0, 32, dtype=np.longdouble)
    assert out.dtype == np.longdouble


def test_exact_solution_limits():
    ode = ScalarODE(2.0, 0.6, a0=1.0)
    assert ode.exact(0.0) == pytest.approx(1.0)
    assert ode.exact(50.0) == pytest.approx(0.3, abs=1e-15)


def test_multi_connection_totals():
    ode = ScalarODE((1.0, 3.0), (0.2, 0.9))
    assert ode.multi
    assert ode.total_rate == 4.0 and ode.total_drive == pytest.approx(1.1)
    assert ode.interval() == (0.0, pytest.approx(0.3))


def test_bad_ode_rejected():
    with pytest.raises(ValueError):
        ScalarODE(0.0, 1.0)
    with pytest.raises(ValueError):
        ScalarODE((1.0, 2.0), (1.0,))


def test_state_bounds_reject_vacuous_start():
    ode = ScalarODE(1.0, 0.5, a0=2.0)
    with pytest.raises(ValueError):
        oracle.check_state_bounds(ode, oracle.integrate_rk4(ode, 64))


def test_state_bounds_single_trajectory():
    ode = ScalarODE(4.0, 0.8, a0=0.0, horizon=2.0)
    rec = oracle.check_state_bounds(ode, oracle.integrate_rk4(ode, 256))
    assert rec.passed


def test_decay_bound_is_tight_on_exact_solution():
    ode = ScalarODE(1.5, 0.3, a0=0.9)
    traj = oracle.integrate_rk4(ode, 2048)
    ok, margin = oracle.check_decay_bound(ode, traj)
    assert ok and margin > -1e-9
    # a smaller envelope must fail
    assert not oracle.check_decay_bound(ode, traj, bound_offset=0.5 * abs(0.9 - 0.2))[0]


def test_time_to_tolerance_formula():
    t = oracle.time_to_tolerance(1.0, 0.0, 2.0, 1e-3)
    assert t == pytest.approx(math.log(1e3) / 2.0)
    assert oracle.time_to_tolerance(0.1, 0.0, 1.0, 0.5) == 0.0
    with pytest.raises(ValueError):
        oracle.time_to_tolerance(1.0, 0.0, 1.0, 0.0)


def test_sensitivities_match_finite_difference():
    phi, omega, a0, t = 0.4, 1.3, 0.2, 0.7
    h = 1e-6
    f = lambda p, w: ScalarODE(w, p, a0).exact(t)
    assert oracle.sensitivity_phi(omega, t) == pytest.approx((f(phi + h, omega) - f(phi - h, omega)) / (2 * h),
                                                             rel=1e-8)
    assert oracle.sensitivity_omega(phi, omega, a0, t) == pytest.approx(
        (f(phi, omega + h) - f(phi, omega - h)) / (2 * h), rel=1e-7)


@pytest.mark.parametrize("campaign", [
    lambda: [oracle.campaign_closed_form(500, 1)],
    lambda: [oracle.campaign_state_bounds(500, 1)],
    lambda: [oracle.campaign_state_bounds(500, 1, multi=True)],
    lambda: [oracle.campaign_euler_invariance(500, 1)],
    lambda: oracle.campaign_decay(200, 1),
    lambda: [oracle.campaign_exact_law(100, 1)],
    lambda: oracle.campaign_sensitivities(500, 1),
])
def test_small_campaigns_pass(campaign):
    for res in campaign():
        assert res.passed, (res.property, res.worst_margin, res.worst_params)


def test_campaign_is_seed_deterministic():
    a = oracle.campaign_closed_form(200, 9)
    b = oracle.campaign_closed_form(200, 9)
    assert a.row() == b.row()


def test_euler_convergence_ratios():
    errs, ratios = oracle.euler_convergence(0, trials=500)
    assert len(errs) == 4 and len(ratios) == 3
    assert all(1.8 <= r <= 2.2 for r in ratios)


def test_euler_overshoot_beyond_unit_step():
    # dt * omega in (1, 2): the first Euler step jumps past the equilibrium
    omega, phi, dt = 1.5, 0.9, 1.0
    a1 = 0.0 + dt * (-omega * 0.0 + phi)
    assert a1 > phi / omega
