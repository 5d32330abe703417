import numpy as np
import pytest

from mmhop.analyze import (
    REFERENCE_TABLE,
    TABLE_COLUMNS,
    EnergyReport,
    compare_models,
    energy_report,
    from_section,
    passive_loss,
    poincare_return,
    read_table_csv,
    reference_reports,
    section_dim,
    solution_stability,
    stability_eigenvalues,
    to_section,
)
from mmhop.errors import FixedPointResidualTooLarge, MismatchedGrids
from mmhop.hybrid import DomainId


def test_section_mapping(double_params, single_params):
    assert section_dim(double_params) == 3 and section_dim(single_params) == 5
    x = np.arange(1.0, 7.0)
    s = to_section(double_params, x)
    assert s.tolist() == [1.0, 3.0, 6.0]
    back = from_section(double_params, s)
    assert back.domain is DomainId.D1 and back.x[3] == 0.0
    assert np.array_equal(to_section(double_params, back.x), s)
    assert from_section(single_params, np.zeros(5)).domain is DomainId.FLIGHT


def test_fixed_point_residual(double_solutions):
    sol = double_solutions[0.3]
    s0 = to_section(sol.params, sol.apex_state.x)
    s1 = poincare_return(sol.params, sol.policy(), s0, sol.apex_clock)
    assert np.max(np.abs(s1 - s0)) < 1e-6


def test_residual_too_large(double_solutions):
    sol = double_solutions[0.3]
    s0 = to_section(sol.params, sol.apex_state.x) + np.array([0.02, 0.0, 0.0])
    with pytest.raises(FixedPointResidualTooLarge):
        stability_eigenvalues(sol.params, sol.policy(), s0, clock0=sol.apex_clock)


def test_double_open_loop_stable(double_solutions):
    rep = solution_stability(double_solutions[0.3])
    assert rep.stable and rep.lambda_max < 0.9
    assert rep.jacobian.shape == (3, 3)
    d = rep.to_dict()
    assert d["stable"] is True and len(d["eigenvalue_magnitudes"]) == 3


def test_passive_loss_positive(double_solutions, single_solutions):
    for sol in (double_solutions[0.3], single_solutions[0.3]):
        assert passive_loss(sol.params, sol.apex_state) > 0


def test_energy_report(double_solutions):
    sol = double_solutions[0.3]
    rep = energy_report(sol.params, sol, samples=801)
    assert rep.E_elec > rep.E_mech > 0
    assert 0 < rep.eta_elec < rep.eta_mech
    assert rep.F_max == sol.control.peak()
    assert rep.to_dict()["H_f"] == 0.3


def test_energy_converges_in_samples(double_solutions):
    sol = double_solutions[0.3]
    a = energy_report(sol.params, sol, samples=2001)
    b = energy_report(sol.params, sol, samples=4001)
    assert a.E_mech == pytest.approx(b.E_mech, rel=1e-3)


def test_compare_models_grids():
    s, d = reference_reports()
    cmp = compare_models(s, d)
    assert [r.H_f for r in cmp.rows] == [r[0] for r in REFERENCE_TABLE]
    assert cmp.rows[0].force_ratio == pytest.approx(50.9 / 95.2)
    with pytest.raises(MismatchedGrids):
        compare_models(s, d[:-1])
    with pytest.raises(MismatchedGrids):
        compare_models(s, d[::-1])
    with pytest.raises(MismatchedGrids):
        compare_models([], [])


def test_table_roundtrip(tmp_path):
    cmp = compare_models(*reference_reports())
    path = tmp_path / "table.csv"
    cmp.write_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(TABLE_COLUMNS)
    rows = read_table_csv(path)
    assert np.allclose(rows, REFERENCE_TABLE)
    js = tmp_path / "t.json"
    cmp.write_json(js)
    assert "force_ratio" in js.read_text()


def test_read_table_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_table_csv(path)


def test_report_infinite_efficiency_without_work():
    rep = EnergyReport(0.0, 0.0, 1.0, float("inf"), float("inf"), 0.0, 0.1)
    assert rep.to_dict()["eta_mech"] == float("inf")
