import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmhop.errors import InvalidParameters
from mmhop.model import (
    ModelParams,
    MotorModel,
    State,
    Variant,
    bias_vector,
    foot_height,
    kinetic_energy,
    load_params,
    mass_matrix,
    mechanical_energy,
    nominal_params,
    save_params,
)


def test_mass_matrix_layout(double_params):
    p = double_params
    M = mass_matrix(p)
    expected = np.array([[p.M0, -p.Mm, p.Mf], [-p.Mm, p.Mm, 0.0], [p.Mf, 0.0, p.Mf]])
    assert np.array_equal(M, expected)
    assert np.array_equal(M, M.T)


@settings(max_examples=200, deadline=None)
@given(
    M0=st.floats(1.0, 20.0),
    fm=st.floats(0.01, 0.6),
    ff=st.floats(0.01, 0.6),
)
def test_mass_matrix_positive_definite(M0, fm, ff):
    Mm = fm * M0 * 0.9
    Mf = ff * (M0 - Mm) * 0.9
    p = ModelParams(M0=M0, Mm=Mm, Mf=Mf, c_b=0, k_p=1, c_p=0, k_s=1, c_s=0)
    assert np.all(np.linalg.eigvalsh(mass_matrix(p)) > 0)


@pytest.mark.parametrize(
    "changes",
    [
        {"M0": 1.0},  # M0 must exceed Mm + Mf
        {"k_s": 0.0},
        {"c_b": -1.0},
        {"k_p": 0.0},  # double variant needs a parallel spring
        {"u_max": 0.0},
    ],
)
def test_invalid_parameters(double_params, changes):
    with pytest.raises(InvalidParameters):
        double_params.replace(**changes)


def test_single_variant_rejects_parallel_spring(single_params):
    with pytest.raises(InvalidParameters):
        single_params.replace(k_p=10.0)


def test_invalid_motor():
    with pytest.raises(InvalidParameters):
        MotorModel(k_f=0.0)


def test_as_single_spring(double_params):
    s = double_params.as_single_spring(c_p=0.0)
    assert s.variant is Variant.SINGLE
    assert s.k_p == 0.0 and s.c_p == 0.0
    assert s.k_s == double_params.k_s
    assert s == nominal_params("single")


def test_params_roundtrip(tmp_path, double_params):
    path = tmp_path / "p.json"
    save_params(double_params, path)
    assert load_params(path) == double_params
    d = json.loads(path.read_text())
    assert d["variant"] == "double" and d["motor"]["k_f"] == 20.0


def test_unknown_parameter_key(tmp_path, double_params):
    d = double_params.to_dict()
    d["spring"] = 1.0
    with pytest.raises(InvalidParameters, match="spring"):
        ModelParams.from_dict(d)


def test_bias_vector_at_rest_is_gravity(double_params):
    p = double_params
    H = bias_vector(p, State(np.zeros(3), np.zeros(3)))
    assert np.allclose(H, [p.M0 * p.g, -p.Mm * p.g, p.Mf * p.g])


def test_foot_height(double_params):
    s = State([0.5, 0.0, -0.1], np.zeros(3))
    assert foot_height(double_params, s) == pytest.approx(0.5 - 0.1 - double_params.l0)


def test_kinetic_energy_matches_bodies(double_params):
    """KE from the mass matrix equals the sum over body, mover and foot."""
    p = double_params
    qd = np.array([0.7, -0.3, 0.2])
    zb, y, d = qd
    ke = 0.5 * p.Mb * zb**2 + 0.5 * p.Mm * (zb - y) ** 2 + 0.5 * p.Mf * (zb + d) ** 2
    assert kinetic_energy(p, State(np.zeros(3), qd)) == pytest.approx(ke, rel=1e-12)


def test_mechanical_energy_potential_difference(double_params):
    p = double_params
    a = State([0.5, 0.0, 0.0], np.zeros(3))
    b = State([0.6, 0.0, 0.0], np.zeros(3))
    assert mechanical_energy(p, b) - mechanical_energy(p, a) == pytest.approx(p.M0 * p.g * 0.1)


def test_state_roundtrip():
    x = np.arange(6.0)
    s = State.from_x(x, "D1")
    assert np.array_equal(s.x, x)
    assert s.with_(domain="D3").domain == "D3"
