import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmhop.control import (
    DEFAULT_PD,
    ControlPolicy,
    ControlSignal,
    PDGains,
    evaluate_policy,
    force_to_current,
    read_control_csv,
    write_control_csv,
    zero_policy,
)
from mmhop.hybrid import DomainId
from mmhop.model import MotorModel, State

D3 = DomainId.D3


def ramp():
    return ControlSignal(np.array([0.0, 0.1, 0.2]), np.array([0.0, 100.0, 50.0]), frozenset({D3}))


def state(y=0.0, yd=0.0, dom=D3):
    return State([0.3, y, 0.0], [0.0, yd, 0.0], dom)


def test_interpolation_and_ends():
    sig = ramp()
    assert sig(0.05) == pytest.approx(50.0)
    assert sig(0.15) == pytest.approx(75.0)
    assert sig(0.3) == 0.0  # beyond the last knot
    assert sig.duration == 0.2 and sig.peak() == 100.0


def test_signal_validation():
    with pytest.raises(ValueError):
        ControlSignal(np.array([0.1, 0.2]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        ControlSignal(np.array([0.0, 0.0]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        ControlSignal(np.array([0.0, 0.1]), np.array([0.0]))


def test_scope():
    pol = ControlPolicy(ramp(), 450.0)
    assert evaluate_policy(pol, state(dom=D3), 0.1) == pytest.approx(100.0)
    assert evaluate_policy(pol, state(dom=DomainId.D4), 0.1) == 0.0


def test_pd_arithmetic():
    sig = ControlSignal(np.array([0.0, 1.0]), np.zeros(2), frozenset({D3}))
    ref = (np.array([0.0, 1.0]), np.full(2, 0.01), np.zeros(2))
    pol = ControlPolicy(sig, 450.0, PDGains(100.0, 0.0), ref)
    assert evaluate_policy(pol, state(y=0.0), 0.5) == pytest.approx(1.0)


def test_on_reference_gives_feedforward():
    sig = ramp()
    ref = (np.array([0.0, 0.2]), np.array([0.01, 0.03]), np.array([0.1, 0.1]))
    pol = ControlPolicy(sig, 450.0, PDGains(1e4, 300.0), ref)
    assert evaluate_policy(pol, state(y=0.02, yd=0.1), 0.1) == pytest.approx(sig(0.1))


def test_zero_gains_reduce_to_feedforward():
    sig = ramp()
    ref = (np.array([0.0, 0.2]), np.zeros(2), np.zeros(2))
    pol = ControlPolicy(sig, 450.0, PDGains(0.0, 0.0), ref)
    for t in np.linspace(0, 0.25, 11):
        assert evaluate_policy(pol, state(y=0.05, yd=-1.0), t) == sig(t)


@settings(max_examples=200, deadline=None)
@given(y=st.floats(-1, 1), yd=st.floats(-50, 50), t=st.floats(0, 0.3))
def test_saturation(y, yd, t):
    ref = (np.array([0.0, 0.2]), np.zeros(2), np.zeros(2))
    pol = ControlPolicy(ramp(), 80.0, PDGains(1e5, 1e3), ref)
    assert abs(evaluate_policy(pol, state(y=y, yd=yd), t)) <= 80.0


def test_gains_nonnegative():
    with pytest.raises(ValueError):
        PDGains(-1.0, 0.0)
    assert DEFAULT_PD.k_P > 0 and DEFAULT_PD.k_D > 0


def test_force_to_current():
    motor = MotorModel(k_f=10.0, k_b=20.0, R=2.0)
    assert force_to_current(motor, 50.0, 0.0) == (5.0, 10.0)
    assert force_to_current(motor, 0.0, 0.5) == (0.0, 10.0)
    I, V = force_to_current(motor, np.array([-30.0, 30.0]), np.zeros(2))
    assert np.array_equal(np.sign(I), [-1.0, 1.0])


def test_control_csv_roundtrip(tmp_path):
    sig = ramp()
    path = tmp_path / "u.csv"
    write_control_csv(sig, path, MotorModel())
    assert path.read_text().splitlines()[0] == "t,u,I"
    back = read_control_csv(path, scope=(D3,))
    assert np.array_equal(back.t, sig.t) and np.array_equal(back.u, sig.u)


def test_zero_policy():
    pol = zero_policy(100.0)
    assert evaluate_policy(pol, state(), 0.0) == 0.0
