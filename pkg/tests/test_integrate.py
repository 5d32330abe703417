import numpy as np
import pytest

from mmhop.control import zero_policy
from mmhop.errors import SimulationDiverged
from mmhop.hybrid import GUARDS, DomainId, GuardKind, constraint_jacobian
from mmhop.integrate import (
    APEX,
    IntegratorConfig,
    StopCondition,
    integrate_domain,
    simulate_hybrid,
)
from mmhop.model import State, mechanical_energy

TIGHT = IntegratorConfig(rtol=1e-12, atol=1e-14)


@pytest.fixture
def undamped(double_params):
    return double_params.replace(c_b=0.0, c_p=0.0, c_s=0.0)


def test_d2_projectile_apex(undamped):
    """Free flight with relaxed springs: z_b rises by v^2 / 2g."""
    p = undamped
    v0 = 2.0
    s = State([1.0, 0.0, 0.0], [v0, 0.0, 0.0], DomainId.D2)
    ph = integrate_domain(p, DomainId.D2, s, None, 2.0, TIGHT, sections=(APEX,))
    assert ph.exit_event[0] == "Apex"
    rise = ph.x[-1, 0] - 1.0
    assert rise == pytest.approx(v0**2 / (2 * p.g), rel=1e-8)
    assert ph.duration == pytest.approx(v0 / p.g, rel=1e-8)


def test_d1_free_fall_touchdown_speed(undamped):
    p = undamped
    h = 0.25
    s = State([p.l0 + h, 0.0, 0.0], np.zeros(3), DomainId.D1)
    ph = integrate_domain(p, DomainId.D1, s, None, 2.0, TIGHT)
    assert ph.exit_event == (GuardKind.TOUCHDOWN, DomainId.D3)
    assert -ph.x[-1, 3] == pytest.approx(np.sqrt(2 * p.g * h), rel=1e-8)


def test_d3_passive_invariants(undamped):
    p = undamped
    s = State([0.28, 0.01, p.l0 - 0.28], [-1.0, 0.5, 1.0], DomainId.D3)
    ph = integrate_domain(p, DomainId.D3, s, None, 0.02, TIGHT, guards=False)
    foot = ph.x[:, 0] + ph.x[:, 2]
    assert np.ptp(foot) < 1e-10
    E = [mechanical_energy(p, st) for st in ph.states]
    assert np.ptp(E) < 1e-9 * abs(E[0])


def test_event_localization(double_solutions):
    sol = double_solutions[0.3]
    tr = simulate_hybrid(sol.params, sol.apex_state, sol.policy(), StopCondition(hops=2), clock0=sol.apex_clock)
    for ph in tr.phases:
        if ph.exit_event and ph.exit_event[0] != "Apex":
            g = GUARDS[ph.exit_event[0]]
            assert abs(g.value(sol.params, ph.x[-1], ph.u[-1], ph.domain)) < 1e-10


def test_samples_strictly_increasing_and_admissible(double_solutions):
    sol = double_solutions[0.3]
    tr = simulate_hybrid(sol.params, sol.apex_state, sol.policy(), StopCondition(hops=1), clock0=sol.apex_clock)
    for ph in tr.phases:
        assert np.all(np.diff(ph.t) > 0)
        J = constraint_jacobian(ph.domain)
        assert np.all(np.abs(J @ ph.x[0, 3:]) < 1e-10)


def test_determinism(double_params):
    s = State([0.6, 0.0, 0.0], np.zeros(3), DomainId.D1)
    a = simulate_hybrid(double_params, s, None, StopCondition(hops=3))
    b = simulate_hybrid(double_params, s, None, StopCondition(hops=3))
    ta, _, xa, _, _ = a.stacked()
    tb, _, xb, _, _ = b.stacked()
    assert np.array_equal(ta, tb) and np.array_equal(xa, xb)


@pytest.mark.parametrize("variant", ["double", "single"])
def test_passive_hops_decay(double_params, single_params, variant):
    p = double_params if variant == "double" else single_params
    dom = DomainId.D1 if variant == "double" else DomainId.FLIGHT
    s = State([0.7, 0.0, 0.0], np.zeros(3), dom)
    tr = simulate_hybrid(p, s, None, StopCondition(hops=4))
    heights = [x[0] for _, x in tr.apexes]
    assert len(heights) == 4
    assert np.all(np.diff(heights) < 0)


def test_resets_follow_cycle(double_params):
    s = State([0.7, 0.0, 0.0], np.zeros(3), DomainId.D1)
    tr = simulate_hybrid(double_params, s, None, StopCondition(hops=1))
    assert [ph.domain.value for ph in tr.phases] == ["D1", "D3", "D4", "D1"]


def test_open_loop_playback_is_periodic(double_solutions):
    sol = double_solutions[0.3]
    tr = simulate_hybrid(sol.params, sol.apex_state, sol.policy(), StopCondition(hops=20), clock0=sol.apex_clock)
    clearance = np.array([x[0] + x[2] - sol.params.l0 for _, x in tr.apexes])
    assert len(clearance) == 20
    assert np.max(np.abs(clearance / sol.H_f - 1)) < 0.01


def test_dense_output_matches_samples(double_params):
    s = State([0.7, 0.0, 0.0], np.zeros(3), DomainId.D1)
    tr = simulate_hybrid(double_params, s, None, StopCondition(hops=1))
    t, _, X, _, _ = tr.stacked()
    # phase boundaries repeat a time stamp; compare interior samples only
    keep = np.r_[np.diff(t) > 0, False]
    assert np.allclose(tr.state_at(t[keep]), X[keep], atol=1e-12)


def test_zero_hops_and_horizon(double_params):
    s = State([0.7, 0.0, 0.0], np.zeros(3), DomainId.D1)
    assert simulate_hybrid(double_params, s, None, StopCondition(hops=0)).phases == []
    tr = simulate_hybrid(double_params, s, None, StopCondition(hops=50, t_final=0.1))
    assert tr.duration == pytest.approx(0.1)


def test_divergence_is_reported(double_params):
    s = State([0.7, 0.0, 0.0], np.zeros(3), DomainId.D1)
    with pytest.raises(SimulationDiverged):
        simulate_hybrid(double_params, s, zero_policy(double_params.u_max), StopCondition(hops=5, max_events=3))


def test_initial_state_needs_domain(double_params):
    with pytest.raises(ValueError):
        simulate_hybrid(double_params, State([0.7, 0, 0], np.zeros(3)), None)


def test_fixed_step_mode(double_params):
    s = State([0.7, 0.0, 0.0], np.zeros(3), DomainId.D2)
    ph = integrate_domain(double_params, DomainId.D2, s, None, 0.1, IntegratorConfig(fixed_step=0.01), guards=False)
    assert np.allclose(np.diff(ph.t), 0.01)
