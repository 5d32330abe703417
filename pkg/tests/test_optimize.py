import numpy as np
import pytest

from mmhop.errors import InfeasibleStructure
from mmhop.hybrid import GUARDS, DomainId, domain_dynamics
from mmhop.integrate import StopCondition, simulate_hybrid
from mmhop.optimize import (
    EQ_TOL,
    EXIT_RATE,
    HopProblem,
    HopSolution,
    actuated_domains,
    default_sequence,
    solve_hop,
    transcribe,
    validate_solution,
)


def test_problem_validation(double_params):
    with pytest.raises(ValueError):
        HopProblem(double_params, 0.0)
    with pytest.raises(ValueError):
        HopProblem(double_params, 0.3, knots_per_phase=2)
    pr = HopProblem(double_params, 0.3)
    assert pr.phase_sequence == (DomainId.D1, DomainId.D3, DomainId.D4)
    assert pr.limits == (double_params.u_max, double_params.y_max)


@pytest.mark.parametrize(
    "seq",
    [
        (DomainId.D3, DomainId.D4, DomainId.D1),  # must start in flight
        (DomainId.D1, DomainId.D4),  # no touchdown edge into D4 on the cycle
        (DomainId.FLIGHT, DomainId.GROUND),  # wrong variant
    ],
)
def test_infeasible_structure(double_params, seq):
    with pytest.raises(InfeasibleStructure):
        transcribe(HopProblem(double_params, 0.3, seq))


def test_default_sequences():
    assert default_sequence("single") == [DomainId.FLIGHT, DomainId.GROUND]
    assert actuated_domains("double") == {DomainId.D3}
    assert actuated_domains("single") == {DomainId.GROUND}


@pytest.mark.parametrize("variant", ["double", "single"])
@pytest.mark.parametrize("H", [0.1, 0.3, 0.5])
def test_solutions_converge(double_solutions, single_solutions, variant, H):
    sol = (double_solutions if variant == "double" else single_solutions)[H]
    d = sol.diagnostics
    assert sol.converged
    assert d["equality_residual"] < EQ_TOL and d["bound_violation"] < EQ_TOL
    assert d["periodicity_residual"] < 1e-6
    assert np.all(np.abs(sol.control.u) <= sol.params.u_max + 1e-9)
    assert sol.cost > 0


@pytest.mark.parametrize("variant", ["double", "single"])
def test_actuation_ends_at_zero_force(double_solutions, single_solutions, variant):
    """The feedforward is zero past its last knot, so the optimized force must end there too."""
    sol = (double_solutions if variant == "double" else single_solutions)[0.3]
    act = actuated_domains(sol.params.variant)
    for ph in sol.trajectory.phases:
        if ph.domain in act:
            assert abs(ph.u[-1]) < 1e-9
        else:
            assert np.all(ph.u == 0.0)


@pytest.mark.parametrize("variant", ["double", "single"])
def test_actuated_exit_is_transversal(double_solutions, single_solutions, variant):
    sol = (double_solutions if variant == "double" else single_solutions)[0.1]
    act = actuated_domains(sol.params.variant)
    for ph in sol.trajectory.phases:
        if ph.domain in act:
            kind = ph.exit_event[0]
            g = GUARDS[kind]
            h = 1e-7
            x = ph.x[-1]
            # guard rate along the passive vector field at the exit knot
            dyn = domain_dynamics(sol.params, ph.domain)
            xd = dyn.A @ x + dyn.c
            rate = (g.value(sol.params, x + h * xd, 0.0, ph.domain) - g.value(sol.params, x, 0.0, ph.domain)) / h
            assert rate <= -EXIT_RATE[kind] * 0.99


def test_open_loop_twenty_hops(double_solutions):
    sol = double_solutions[0.5]
    tr = simulate_hybrid(sol.params, sol.apex_state, sol.policy(), StopCondition(hops=20), clock0=sol.apex_clock)
    clear = np.array([x[0] + x[2] - sol.params.l0 for _, x in tr.apexes])
    assert clear.size == 20 and np.max(np.abs(clear / 0.5 - 1)) < 0.01


def test_validate_solution(double_solutions, single_solutions):
    for sol in (double_solutions[0.2], single_solutions[0.2]):
        rep = validate_solution(sol.params, sol)
        assert rep.relative_deviation < 1e-6
        assert rep.apex_error < 1e-6
        assert max(rep.guard_residuals) < 1e-6
        assert rep.constraint_violation < 1e-6


def test_save_load_roundtrip(tmp_path, double_solutions):
    sol = double_solutions[0.3]
    path = tmp_path / "s.json"
    sol.save(path)
    back = HopSolution.load(path)
    assert back.H_f == sol.H_f and back.params == sol.params
    assert np.array_equal(back.z, sol.z)
    assert np.array_equal(back.control.u, sol.control.u)
    assert back.apex_clock == pytest.approx(sol.apex_clock, abs=1e-15)


def test_warm_start(double_params, double_solutions):
    cold = double_solutions[0.3]
    warm = solve_hop(HopProblem(double_params, 0.3), init=cold)
    assert warm.converged
    assert warm.cost == pytest.approx(cold.cost, rel=1e-6)
    assert warm.diagnostics["iterations"] <= cold.diagnostics["iterations"]


def test_bad_initial_guess_length(double_params):
    with pytest.raises(ValueError):
        solve_hop(HopProblem(double_params, 0.3), init=np.zeros(5))


def test_peak_force_grows_with_height(double_solutions, single_solutions):
    for sols in (double_solutions, single_solutions):
        F = [sols[H].control.peak() for H in sorted(sols)]
        assert np.all(np.diff(F) > 0)
