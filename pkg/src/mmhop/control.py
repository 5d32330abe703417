"""Control policies: open-loop playback, PD on the mover, motor electrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .hybrid import DomainId, GuardKind
from .model import MotorModel, State


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Piecewise-linear force profile in domain-local time.

    Outside ``[t[0], t[-1]]`` and outside ``domain_scope`` the force is zero.
    """

    t: np.ndarray
    u: np.ndarray
    domain_scope: frozenset = frozenset({DomainId.D3})

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if t.shape != u.shape or t.ndim != 1:
            raise ValueError("t and u must be 1-D arrays of equal length")
        if t.size and (t[0] != 0.0 or np.any(np.diff(t) <= 0)):
            raise ValueError("knot times must start at 0 and increase strictly")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "domain_scope", frozenset(DomainId(d) for d in self.domain_scope))

    @classmethod
    def zero(cls, scope=(DomainId.D3,)) -> "ControlSignal":
        return cls(np.zeros(0), np.zeros(0), frozenset(scope))

    @property
    def duration(self) -> float:
        return float(self.t[-1]) if self.t.size else 0.0

    def __call__(self, t: float) -> float:
        if self.t.size == 0 or t < 0.0 or t > self.t[-1]:
            return 0.0
        return float(np.interp(t, self.t, self.u))

    def peak(self) -> float:
        return float(np.max(np.abs(self.u))) if self.u.size else 0.0


@dataclass(frozen=True)
class PDGains:
    k_P: float
    k_D: float

    def __post_init__(self):
        if self.k_P < 0 or self.k_D < 0:
            raise ValueError("PD gains must be non-negative")


# Gains from a grid search of the single-spring return map (lambda_max
# 0.42-0.47 over H_f = 0.1-0.5 m with the bundled parameters).
DEFAULT_PD = PDGains(100.0, 30.0)


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """Feed-forward playback with optional PD correction on ``y``.

    ``reference`` holds ``(t, y_ref, ydot_ref)`` arrays; past its last sample
    the reference holds its final value.  The policy clock restarts whenever
    a ``clock_reset`` event fires.
    """

    feedforward: ControlSignal
    u_max: float
    feedback: PDGains | None = None
    reference: tuple | None = None
    clock_reset: GuardKind = GuardKind.TOUCHDOWN

    @property
    def scope(self) -> frozenset:
        return self.feedforward.domain_scope

    def breakpoints(self) -> np.ndarray:
        return self.feedforward.t


def zero_policy(u_max: float = 450.0, scope=(DomainId.D3,)) -> ControlPolicy:
    return ControlPolicy(ControlSignal.zero(scope), u_max)


def evaluate_policy(policy: ControlPolicy, state: State, t_local: float) -> float:
    if state.domain is not None and DomainId(state.domain) not in policy.scope:
        return 0.0
    u = policy.feedforward(t_local)
    if policy.feedback is not None and policy.reference is not None:
        t_ref, y_ref, yd_ref = policy.reference
        yr = np.interp(t_local, t_ref, y_ref)
        ydr = np.interp(t_local, t_ref, yd_ref)
        u += policy.feedback.k_P * (yr - state.q[1]) + policy.feedback.k_D * (ydr - state.qdot[1])
    return float(np.clip(u, -policy.u_max, policy.u_max))


def force_to_current(motor: MotorModel, u, ydot):
    """Motor current and terminal voltage for force ``u`` at mover speed ``ydot``."""
    current = np.asarray(u) / motor.k_f
    voltage = current * motor.R + motor.k_b * np.asarray(ydot)
    if np.ndim(current) == 0:
        return float(current), float(voltage)
    return current, voltage


def write_control_csv(signal: ControlSignal, path, motor: MotorModel | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u"] + (["I"] if motor else []))
        for t, u in zip(signal.t, signal.u):
            row = [repr(float(t)), repr(float(u))]
            if motor:
                row.append(repr(float(u / motor.k_f)))
            w.writerow(row)


def read_control_csv(path, scope=(DomainId.D3,)) -> ControlSignal:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    t = np.array([float(r["t"]) for r in rows])
    u = np.array([float(r["u"]) for r in rows])
    return ControlSignal(t, u, frozenset(scope))
