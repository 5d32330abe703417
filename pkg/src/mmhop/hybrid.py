"""Hybrid structure: contact domains, guards, constrained dynamics and resets.

Double-spring domains::

    D1  flight, mover locked on the hardstop      J = [0 1 0]
    D2  flight, mover free                         J = (empty)
    D3  ground contact, mover free                 J = [1 0 1]
    D4  ground contact + hardstop                  J = [[0 1 0], [1 0 1]]

Single-spring domains are ``FLIGHT`` (no constraint) and ``GROUND``
(``J = [1 0 1]``).  All Jacobians are constant, so ``Jdot = 0`` everywhere
and the constrained dynamics of each domain are affine in ``(q, qd, u)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np

from .errors import AmbiguousEvent, SingularConstraint
from .model import (
    B,
    ModelParams,
    State,
    Variant,
    bias_vector,
    damping_matrix,
    gravity_vector,
    mass_matrix,
    stiffness_matrix,
)


class DomainId(str, enum.Enum):
    D1 = "D1"
    D2 = "D2"
    D3 = "D3"
    D4 = "D4"
    FLIGHT = "FLIGHT"
    GROUND = "GROUND"

    @property
    def variant(self) -> Variant:
        return Variant.SINGLE if self in (DomainId.FLIGHT, DomainId.GROUND) else Variant.DOUBLE

    @property
    def grounded(self) -> bool:
        return self in (DomainId.D3, DomainId.D4, DomainId.GROUND)

    @property
    def hardstop(self) -> bool:
        return self in (DomainId.D1, DomainId.D4)


HARDSTOP_ROW = np.array([0.0, 1.0, 0.0])
GROUND_ROW = np.array([1.0, 0.0, 1.0])

_JACOBIANS = {
    DomainId.D1: np.array([HARDSTOP_ROW]),
    DomainId.D2: np.zeros((0, 3)),
    DomainId.D3: np.array([GROUND_ROW]),
    DomainId.D4: np.array([HARDSTOP_ROW, GROUND_ROW]),
    DomainId.FLIGHT: np.zeros((0, 3)),
    DomainId.GROUND: np.array([GROUND_ROW]),
}


def constraint_jacobian(domain: DomainId) -> np.ndarray:
    return _JACOBIANS[DomainId(domain)].copy()


def ground_row_index(domain: DomainId) -> int | None:
    """Index of the ground-contact row in the domain's constraint force vector."""
    domain = DomainId(domain)
    if domain in (DomainId.D3, DomainId.GROUND):
        return 0
    if domain is DomainId.D4:
        return 1
    return None


def hardstop_row_index(domain: DomainId) -> int | None:
    domain = DomainId(domain)
    return 0 if domain in (DomainId.D1, DomainId.D4) else None


def _check_domain(params: ModelParams, domain: DomainId) -> DomainId:
    domain = DomainId(domain)
    if domain.variant is not params.variant:
        raise ValueError(f"domain {domain.value} does not belong to the {params.variant.value} model")
    return domain


def _constraint_gain(M: np.ndarray, J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(M^-1 J^T, (J M^-1 J^T)^-1)``."""
    MinvJT = np.linalg.solve(M, J.T)
    if J.shape[0] == 0:
        return MinvJT, np.zeros((0, 0))
    A = J @ MinvJT
    if np.linalg.cond(A) > 1e12:
        raise SingularConstraint(f"J M^-1 J^T is singular (cond={np.linalg.cond(A):.3g})")
    return MinvJT, np.linalg.inv(A)


def constraint_force(params: ModelParams, state: State, u: float, domain: DomainId) -> np.ndarray:
    """Holonomic constraint force ``F_v`` keeping ``J qdd = 0``."""
    domain = _check_domain(params, domain)
    J = _JACOBIANS[domain]
    if J.shape[0] == 0:
        return np.zeros(0)
    M = mass_matrix(params)
    _, S = _constraint_gain(M, J)
    rhs = B * u - bias_vector(params, state)
    # Jdot qd vanishes: every Jacobian is constant.
    return -S @ (J @ np.linalg.solve(M, rhs))


def constrained_accel(
    params: ModelParams, state: State, u: float, domain: DomainId
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized accelerations and constraint forces in ``domain``."""
    F = constraint_force(params, state, u, domain)
    J = _JACOBIANS[DomainId(domain)]
    rhs = B * u + J.T @ F - bias_vector(params, state)
    return np.linalg.solve(mass_matrix(params), rhs), F


def reset_matrix(params: ModelParams, domain_post: DomainId) -> np.ndarray:
    """Plastic-impact velocity map ``I - M^-1 J^T (J M^-1 J^T)^-1 J``."""
    domain_post = _check_domain(params, domain_post)
    J = _JACOBIANS[domain_post]
    if J.shape[0] == 0:
        return np.eye(3)
    MinvJT, S = _constraint_gain(mass_matrix(params), J)
    return np.eye(3) - MinvJT @ S @ J


def apply_reset(params: ModelParams, state_pre: State, domain_post: DomainId) -> State:
    qdot = reset_matrix(params, domain_post) @ state_pre.qdot
    return State(state_pre.q.copy(), qdot, DomainId(domain_post), 0.0)


class AffineDynamics(NamedTuple):
    """``xdot = A x + b u + c`` and ``F_v = Fx x + Fu u + Fc`` for one domain."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    Fx: np.ndarray
    Fu: np.ndarray
    Fc: np.ndarray


@lru_cache(maxsize=256)
def domain_dynamics(params: ModelParams, domain: DomainId) -> AffineDynamics:
    """Affine state-space form of the constrained dynamics.

    Substituting ``H = K q + C qd + G`` into the constraint-force expression
    gives ``qdd = N (B u - K q - C qd - G)`` with
    ``N = M^-1 - M^-1 J^T (J M^-1 J^T)^-1 J M^-1``.
    """
    domain = _check_domain(params, domain)
    M = mass_matrix(params)
    J = _JACOBIANS[domain]
    K, C, G = stiffness_matrix(params), damping_matrix(params), gravity_vector(params)
    Minv = np.linalg.inv(M)
    if J.shape[0]:
        MinvJT, S = _constraint_gain(M, J)
        N = Minv - MinvJT @ S @ J @ Minv
        P = -S @ J @ Minv  # F_v = P (B u - H)
    else:
        N = Minv
        P = np.zeros((0, 3))
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    A[3:, :3] = -N @ K
    A[3:, 3:] = -N @ C
    b = np.concatenate([np.zeros(3), N @ B])
    c = np.concatenate([np.zeros(3), -N @ G])
    Fx = -P @ np.hstack([K, C])
    Fu = P @ B
    Fc = -P @ G
    for arr in (A, b, c, Fx, Fu, Fc):
        arr.setflags(write=False)
    return AffineDynamics(A, b, c, Fx, Fu, Fc)


# --------------------------------------------------------------------------
# Guards


class GuardKind(str, enum.Enum):
    TOUCHDOWN = "Touchdown"
    LIFTOFF = "Liftoff"
    HARDSTOP_IMPACT = "HardstopImpact"
    HARDSTOP_RELEASE = "HardstopRelease"


def _touchdown_value(params, x, u, domain):
    return x[0] + x[2] - params.l0


def _touchdown_rate(params, x, u, domain):
    return x[3] + x[5]


def _impact_value(params, x, u, domain):
    return x[1]


def _impact_rate(params, x, u, domain):
    return x[4]


def _force_row(row_fn):
    def value(params, x, u, domain):
        dyn = domain_dynamics(params, domain)
        i = row_fn(domain)
        return (dyn.Fx[i] @ x + dyn.Fu[i] * u + dyn.Fc[i]) / (params.M0 * params.g)

    def rate(params, x, u, domain):
        dyn = domain_dynamics(params, domain)
        i = row_fn(domain)
        xdot = dyn.A @ x + dyn.b * u + dyn.c
        return dyn.Fx[i] @ xdot / (params.M0 * params.g)

    return value, rate


_liftoff_value, _liftoff_rate = _force_row(ground_row_index)
_release_value, _release_rate = _force_row(hardstop_row_index)


@dataclass(frozen=True)
class Guard:
    """Scalar event surface; fires when ``value`` decreases through zero.

    Lengths are in metres; constraint-force guards are normalized by the
    robot weight ``M0 g`` so a single event tolerance applies to both.
    """

    kind: GuardKind
    value_fn: Callable
    rate_fn: Callable

    def value(self, params: ModelParams, x: np.ndarray, u: float, domain: DomainId) -> float:
        return float(self.value_fn(params, x, u, domain))

    def rate(self, params: ModelParams, x: np.ndarray, u: float, domain: DomainId) -> float:
        return float(self.rate_fn(params, x, u, domain))


TOUCHDOWN = Guard(GuardKind.TOUCHDOWN, _touchdown_value, _touchdown_rate)
HARDSTOP_IMPACT = Guard(GuardKind.HARDSTOP_IMPACT, _impact_value, _impact_rate)
LIFTOFF = Guard(GuardKind.LIFTOFF, _liftoff_value, _liftoff_rate)
HARDSTOP_RELEASE = Guard(GuardKind.HARDSTOP_RELEASE, _release_value, _release_rate)

GUARDS = {g.kind: g for g in (TOUCHDOWN, HARDSTOP_IMPACT, LIFTOFF, HARDSTOP_RELEASE)}


@dataclass(frozen=True)
class DomainSpec:
    id: DomainId
    jacobian: np.ndarray
    guards: tuple
    admissible_exits: tuple  # ((Guard, DomainId), ...)


# The selected cycle D1 -> D3 -> D4 -> D1.  Touchdown from D1 lands in D3
# directly because the actuator is idle in flight.
CYCLE_EDGES = {
    DomainId.D1: ((TOUCHDOWN, DomainId.D3),),
    DomainId.D3: ((HARDSTOP_IMPACT, DomainId.D4),),
    DomainId.D4: ((LIFTOFF, DomainId.D1),),
    DomainId.FLIGHT: ((TOUCHDOWN, DomainId.GROUND),),
    DomainId.GROUND: ((LIFTOFF, DomainId.FLIGHT),),
}

# Every single-event switch between the four double-spring domains.
FULL_EDGES = {
    DomainId.D1: ((TOUCHDOWN, DomainId.D4), (HARDSTOP_RELEASE, DomainId.D2)),
    DomainId.D2: ((TOUCHDOWN, DomainId.D3), (HARDSTOP_IMPACT, DomainId.D1)),
    DomainId.D3: ((HARDSTOP_IMPACT, DomainId.D4), (LIFTOFF, DomainId.D2)),
    DomainId.D4: ((LIFTOFF, DomainId.D1), (HARDSTOP_RELEASE, DomainId.D3)),
    DomainId.FLIGHT: CYCLE_EDGES[DomainId.FLIGHT],
    DomainId.GROUND: CYCLE_EDGES[DomainId.GROUND],
}


def domain_spec(domain: DomainId, graph: str = "cycle") -> DomainSpec:
    domain = DomainId(domain)
    edges = (CYCLE_EDGES if graph == "cycle" else FULL_EDGES).get(domain, ())
    return DomainSpec(domain, constraint_jacobian(domain), tuple(g for g, _ in edges), edges)


def exits(domain: DomainId, u: float = 0.0, graph: str = "cycle") -> tuple:
    """Outgoing ``(Guard, target)`` edges of ``domain``.

    On the full graph a touchdown from D1 with an idle actuator takes the
    diagonal edge straight to D3.
    """
    domain = DomainId(domain)
    if graph == "cycle":
        return CYCLE_EDGES.get(domain, ())
    edges = FULL_EDGES[domain]
    if domain is DomainId.D1 and u == 0.0:
        edges = ((TOUCHDOWN, DomainId.D3),)
    return edges


EVENT_TOL = 1e-10


def evaluate_guards(
    params: ModelParams,
    state: State,
    u: float,
    domain: DomainId,
    previous: State | None = None,
    graph: str = "cycle",
    tol: float = EVENT_TOL,
):
    """Return the ``(Guard, target)`` edge that fires at ``state``, or ``None``.

    With ``previous`` given, a guard fires when its value goes from
    non-negative to negative between the two states.  Without it, a guard
    fires when its value is within ``tol`` of zero (or below) and decreasing.
    Two guards firing together raise :class:`AmbiguousEvent`.
    """
    domain = _check_domain(params, domain)
    x = state.x
    fired = []
    for guard, target in exits(domain, u, graph):
        val = guard.value(params, x, u, domain)
        if previous is not None:
            prev = guard.value(params, previous.x, u, domain)
            hit = prev >= 0.0 and val < 0.0 or prev > 0.0 and val == 0.0
        else:
            hit = val <= tol and guard.rate(params, x, u, domain) < 0.0
        if hit:
            fired.append((guard, target))
    if len(fired) > 1:
        kinds = ", ".join(g.kind.value for g, _ in fired)
        raise AmbiguousEvent(f"simultaneous guards in {domain.value}: {kinds}")
    return fired[0] if fired else None
