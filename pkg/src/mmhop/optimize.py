"""Minimum-effort periodic hops by multi-phase direct transcription.

One hop is cut at the flight apex, so the double-spring cycle
``D1 -> D3 -> D4 -> D1`` becomes four phases::

    D1 (apex -> touchdown), D3, D4, D1 (liftoff -> apex)

and the single-spring cycle becomes ``FLIGHT, GROUND, FLIGHT``.  Each phase
carries ``N`` knots of ``(x, u)`` plus a free duration.  Within a domain the
flow is linear time-invariant, so with a first-order-hold input the state at
the next knot is an exact affine function of the current knot, obtained
from one augmented matrix exponential per phase.  The defects therefore
carry no truncation error; the event-detecting integrator is used as the
independent cross-check in :func:`validate_solution`.

Decision vector layout: phase blocks of ``N x 7`` (state then force per
knot), followed by the phase durations.

:func:`solve_hop` does not hand that vector to the NLP solver directly.
Guard-terminated passive phases are resolved exactly, which leaves a small
smooth problem in the apex coordinates, the actuated forces and the
actuated durations (:class:`EventShooting`); the full knot vector is then
rebuilt and checked against every transcription constraint.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq, minimize

from .control import ControlPolicy, ControlSignal, PDGains
from .errors import InfeasibleStructure, NotConverged
from .hybrid import (
    CYCLE_EDGES,
    GUARDS,
    DomainId,
    GuardKind,
    apply_reset,
    domain_dynamics,
    ground_row_index,
    reset_matrix,
)
from .integrate import (
    APEX,
    HybridTrajectory,
    IntegratorConfig,
    PhaseTrajectory,
    StopCondition,
    integrate_domain,
    simulate_hybrid,
)
from .model import ModelParams, State, Variant

log = logging.getLogger(__name__)

NX = 7  # six states and one force per knot
EQ_TOL = 1e-6
# minimum crossing speed of an actuated phase's exit guard; keeps optimized
# events transversal so that playback does not graze the surface
EXIT_RATE = {
    GuardKind.HARDSTOP_IMPACT: 0.005,  # m/s
    GuardKind.LIFTOFF: 0.05,  # weight fractions per second
    GuardKind.TOUCHDOWN: 0.005,
    GuardKind.HARDSTOP_RELEASE: 0.05,
}


def default_sequence(variant: Variant) -> list[DomainId]:
    if Variant(variant) is Variant.DOUBLE:
        return [DomainId.D1, DomainId.D3, DomainId.D4]
    return [DomainId.FLIGHT, DomainId.GROUND]


def actuated_domains(variant: Variant) -> frozenset:
    """Domains in which the optimizer may apply force.

    In D1 and D4 the hardstop absorbs any force, so the double-spring hop
    is driven in D3 only.  The single-spring hop is driven in stance; in
    flight the motor is idle like the double-spring one.
    """
    if Variant(variant) is Variant.DOUBLE:
        return frozenset({DomainId.D3})
    return frozenset({DomainId.GROUND})


@dataclass(frozen=True, eq=False)
class HopProblem:
    params: ModelParams
    H_f: float
    phase_sequence: tuple = None
    knots_per_phase: int = 20

    def __post_init__(self):
        if not self.H_f > 0:
            raise ValueError("target clearance H_f must be positive")
        seq = self.phase_sequence or default_sequence(self.params.variant)
        object.__setattr__(self, "phase_sequence", tuple(DomainId(d) for d in seq))
        if self.knots_per_phase < 3:
            raise ValueError("need at least 3 knots per phase")

    @property
    def limits(self) -> tuple[float, float]:
        return self.params.u_max, self.params.y_max


def _check_cycle(params: ModelParams, seq) -> list[DomainId]:
    seq = [DomainId(d) for d in seq]
    if not seq or seq[0] not in (DomainId.D1, DomainId.D2, DomainId.FLIGHT):
        raise InfeasibleStructure("the cycle must start in a flight domain (apex section)")
    for d in seq:
        if d.variant is not params.variant:
            raise InfeasibleStructure(f"{d.value} is not a {params.variant.value} domain")
    for a, b in zip(seq, seq[1:] + seq[:1]):
        if b not in [t for _, t in CYCLE_EDGES.get(a, ())]:
            raise InfeasibleStructure(f"no edge {a.value} -> {b.value} in the hybrid cycle")
    return seq


# --------------------------------------------------------------------------
# Exact first-order-hold discretization


def _foh_blocks(A, b, c, h):
    """Return ``(Phi, G0, G1, gam)`` and their derivatives w.r.t. ``h``.

    Over one interval ``x+ = Phi x + G0 u0 + G1 u1 + gam`` for an input that
    is linear between ``u0`` and ``u1``.
    """
    Ab = np.zeros((9, 9))
    Ab[:6, :6] = A
    Ab[:6, 6] = b
    Ab[:6, 8] = c
    Ab[6, 7] = 1.0
    E = expm(Ab * h)
    dE = Ab @ E
    Phi, Eu, Es, gam = E[:6, :6], E[:6, 6], E[:6, 7], E[:6, 8]
    dPhi, dEu, dEs, dgam = dE[:6, :6], dE[:6, 6], dE[:6, 7], dE[:6, 8]
    G1 = Es / h
    G0 = Eu - G1
    dG1 = dEs / h - Es / h**2
    dG0 = dEu - dG1
    return (Phi, G0, G1, gam), (dPhi, dG0, dG1, dgam)


class Transcription:
    """The transcribed NLP: bounds, cost and constraint functions.

    ``eq(z)`` and ``ineq(z)`` return ``(values, jacobian)``; inequalities are
    of the form ``values >= 0``.
    """

    def __init__(self, problem: HopProblem):
        p = problem.params
        seq = _check_cycle(p, problem.phase_sequence)
        self.problem = problem
        self.params = p
        self.cycle = seq
        # the starting flight domain is split at the apex
        self.phases = seq + [seq[0]]
        self.N = problem.knots_per_phase
        self.n_phases = len(self.phases)
        self.n_knot_vars = self.n_phases * self.N * NX
        self.n = self.n_knot_vars + self.n_phases
        self.actuated_domains = actuated_domains(p.variant)
        self.dyn = [domain_dynamics(p, d) for d in self.phases]
        self.resets = []
        for d in self.phases[1:]:
            R = np.eye(6)
            R[3:, 3:] = reset_matrix(p, d)
            self.resets.append(R)
        self._build_bounds()

    # -- indexing ---------------------------------------------------------
    def xi(self, phase: int, knot: int) -> int:
        """Index of the first state component of a knot."""
        return (phase * self.N + knot) * NX

    def ui(self, phase: int, knot: int) -> int:
        return self.xi(phase, knot) + 6

    def ti(self, phase: int) -> int:
        return self.n_knot_vars + phase

    def unpack(self, z):
        knots = z[: self.n_knot_vars].reshape(self.n_phases, self.N, NX)
        return knots[:, :, :6], knots[:, :, 6], z[self.n_knot_vars :]

    def pack(self, X, U, T) -> np.ndarray:
        knots = np.concatenate([np.asarray(X), np.asarray(U)[:, :, None]], axis=2)
        return np.concatenate([knots.ravel(), np.asarray(T, dtype=float)])

    @property
    def actuated(self) -> list[int]:
        return [i for i, d in enumerate(self.phases) if d in self.actuated_domains]

    @property
    def linked(self) -> list[tuple[int, int]]:
        """Consecutive actuated phases whose boundary forces must agree."""
        act = set(self.actuated)
        pairs = [(i, i + 1) for i in range(self.n_phases - 1) if i in act and i + 1 in act]
        if self.n_phases - 1 in act and 0 in act:
            pairs.append((self.n_phases - 1, 0))
        return pairs

    @property
    def touchdown_phase(self) -> int:
        """Index of the first grounded phase; the policy clock starts there."""
        return next(i for i, d in enumerate(self.phases) if d.grounded)

    def _build_bounds(self):
        p, N = self.params, self.N
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        for i, d in enumerate(self.phases):
            for k in range(N):
                j = self.xi(i, k)
                if d.hardstop:
                    # y is pinned by the constraint; keep the bound inactive
                    lb[j + 1], ub[j + 1] = -p.y_max, p.y_max
                else:
                    lb[j + 1], ub[j + 1] = 0.0, p.y_max
                if d in self.actuated_domains:
                    lb[j + 6], ub[j + 6] = -p.u_max, p.u_max
                else:
                    lb[j + 6] = ub[j + 6] = 0.0
            if d is DomainId.D3 and self.phases[i - 1] is DomainId.D1:
                # entering D3 straight from D1: initial force must be non-negative
                lb[self.ui(i, 0)] = 0.0
            nxt = self.phases[(i + 1) % self.n_phases]
            if d in self.actuated_domains and nxt not in self.actuated_domains:
                # playback stops at the last knot; ending at zero force keeps
                # the return map smooth when the exit event shifts in time
                lb[self.ui(i, N - 1)] = ub[self.ui(i, N - 1)] = 0.0
            lb[self.ti(i)] = 1e-4
            ub[self.ti(i)] = 3.0
        self.lb, self.ub = lb, ub

    # -- cost -------------------------------------------------------------
    def cost(self, z):
        """``int u^2 dt`` for the piecewise-linear force, and its gradient."""
        _, U, T = self.unpack(z)
        f = 0.0
        grad = np.zeros(self.n)
        for i in self.actuated:
            h = T[i] / (self.N - 1)
            u0, u1 = U[i, :-1], U[i, 1:]
            s = np.sum(u0**2 + u0 * u1 + u1**2)
            f += h / 3 * s
            gu = np.zeros(self.N)
            gu[:-1] += h / 3 * (2 * u0 + u1)
            gu[1:] += h / 3 * (2 * u1 + u0)
            grad[[self.ui(i, k) for k in range(self.N)]] = gu
            grad[self.ti(i)] = s / 3 / (self.N - 1)
        return f, grad

    # -- equality constraints ---------------------------------------------
    def _ground_force(self, i, x, u):
        dyn = self.dyn[i]
        gi = ground_row_index(self.phases[i])
        return dyn.Fx[gi] @ x + dyn.Fu[gi] * u + dyn.Fc[gi], dyn.Fx[gi], dyn.Fu[gi]

    def eq(self, z, defects: bool = True):
        p, N = self.params, self.N
        X, U, T = self.unpack(z)
        rows, jac = [], []

        def add(value, entries):
            row = np.zeros(self.n)
            for idx, coef in entries:
                row[idx] += coef
            rows.append(value)
            jac.append(row)

        # pinned dynamics defects
        for i in range(self.n_phases if defects else 0):
            dyn = self.dyn[i]
            h = T[i] / (N - 1)
            (Phi, G0, G1, gam), (dPhi, dG0, dG1, dgam) = _foh_blocks(dyn.A, dyn.b, dyn.c, h)
            for k in range(N - 1):
                xk, xk1 = X[i, k], X[i, k + 1]
                d = xk1 - Phi @ xk - G0 * U[i, k] - G1 * U[i, k + 1] - gam
                dT = -(dPhi @ xk + dG0 * U[i, k] + dG1 * U[i, k + 1] + dgam) / (N - 1)
                block = np.zeros((6, self.n))
                a, b_ = self.xi(i, k), self.xi(i, k + 1)
                block[:, a : a + 6] = -Phi
                block[:, b_ : b_ + 6] += np.eye(6)
                block[:, a + 6] = -G0
                block[:, b_ + 6] = -G1
                block[:, self.ti(i)] = dT
                rows.extend(d)
                jac.extend(block)

        # hybrid continuity through the plastic resets
        for i, R in enumerate(self.resets):
            a, b_ = self.xi(i, N - 1), self.xi(i + 1, 0)
            d = X[i + 1, 0] - R @ X[i, N - 1]
            block = np.zeros((6, self.n))
            block[:, b_ : b_ + 6] = np.eye(6)
            block[:, a : a + 6] = -R
            rows.extend(d)
            jac.extend(block)

        # guard surfaces at the end of each pre-switch phase
        for i, dom in enumerate(self.phases[:-1]):
            j = self.xi(i, N - 1)
            x = X[i, N - 1]
            nxt = self.phases[i + 1]
            if not dom.grounded and nxt.grounded:  # touchdown: p_f = 0
                add(x[0] + x[2] - p.l0, [(j, 1.0), (j + 2, 1.0)])
            elif not dom.hardstop and nxt.hardstop:  # hardstop impact: y = 0
                add(x[1], [(j + 1, 1.0)])
            elif dom.grounded and not nxt.grounded:  # liftoff: ground force = 0
                Fg, Fx, Fu = self._ground_force(i, x, U[i, N - 1])
                scale = p.M0 * p.g
                add(Fg / scale, [(j + m, Fx[m] / scale) for m in range(6)] + [(j + 6, Fu / scale)])

        # force continuity between consecutive actuated phases
        for i, k in self.linked:
            add(U[k, 0] - U[i, N - 1], [(self.ui(k, 0), 1.0), (self.ui(i, N - 1), -1.0)])

        # apex section: periodic, zdot_b = 0, clearance H_f
        a, b_ = self.xi(0, 0), self.xi(self.n_phases - 1, N - 1)
        d = X[-1, N - 1] - X[0, 0]
        block = np.zeros((6, self.n))
        block[:, b_ : b_ + 6] = np.eye(6)
        block[:, a : a + 6] -= np.eye(6)
        rows.extend(d)
        jac.extend(block)
        x0 = X[0, 0]
        add(x0[3], [(a + 3, 1.0)])
        add(x0[0] + x0[2] - p.l0 - self.problem.H_f, [(a, 1.0), (a + 2, 1.0)])
        return np.array(rows), np.array(jac)

    # -- inequality constraints -------------------------------------------
    def ineq(self, z):
        p, N = self.params, self.N
        X, U, _ = self.unpack(z)
        rows, jac = [], []
        scale = p.M0 * p.g
        for i, dom in enumerate(self.phases):
            for k in range(N):
                j = self.xi(i, k)
                x = X[i, k]
                row = np.zeros(self.n)
                if dom.grounded:
                    if k == N - 1 and i + 1 < self.n_phases and not self.phases[i + 1].grounded:
                        continue  # equality at liftoff
                    Fg, Fx, Fu = self._ground_force(i, x, U[i, k])
                    rows.append(Fg / scale)
                    row[j : j + 6] = Fx / scale
                    row[j + 6] = Fu / scale
                else:
                    if (k == N - 1 and i == 0) or (k == 0 and i == self.n_phases - 1):
                        continue  # touchdown / liftoff knots sit on the ground
                    rows.append(x[0] + x[2] - p.l0)
                    row[j] = row[j + 2] = 1.0
                jac.append(row)
        return np.array(rows), np.array(jac)

    # -- diagnostics ------------------------------------------------------
    def defect_norm(self, z) -> float:
        c, _ = self.eq(z)
        return float(np.max(np.abs(c)))

    def bound_violation(self, z) -> float:
        v = np.maximum(self.lb - z, 0) + np.maximum(z - self.ub, 0)
        return float(np.max(v))


class EventShooting:
    """Reduced shooting view of a :class:`Transcription`.

    Free variables are the apex coordinates not fixed by the section, and
    for each actuated phase its force knots and duration.  Passive phases
    run until the first decreasing zero of their exit guard, located exactly
    on the affine flow; their durations follow from the implicit function
    theorem.  The knot vector ``z`` rebuilt by :meth:`rollout` satisfies all
    defects, resets and passive guards by construction, leaving only the
    actuated exit guards and periodicity as equality constraints.
    """

    def __init__(self, tr: Transcription, t_max: float = 3.0, sample: float = 2e-4):
        self.tr = tr
        self.t_max = t_max
        self.sample = sample
        p, N = tr.params, tr.N
        start = tr.phases[0]
        # apex coordinates: z_b follows from the clearance, zdot_b = 0
        self.apex_idx = [2, 5] if start.hardstop else [1, 2, 4, 5]
        self.act = tr.actuated
        # force columns; linked phase boundaries share one column
        col = len(self.apex_idx)
        self.ucols = {}
        for i in self.act:
            cols = list(range(col, col + N))
            col += N
            if i > 0 and (i - 1, i) in tr.linked:
                cols = [self.ucols[i - 1][-1]] + cols[:-1]
                col -= 1
            if (i, 0) in tr.linked and i != 0:
                cols[-1] = self.ucols[0][0]
                col -= 1
            self.ucols[i] = np.array(cols)
        self.tcols = {i: col + m for m, i in enumerate(self.act)}
        self.n = col + len(self.act)
        self.periodic_idx = [0] + self.apex_idx
        self.guards = []
        for i, dom in enumerate(tr.phases):
            if i == tr.n_phases - 1:
                a = np.zeros(7)
                a[3] = 1.0
                self.guards.append((a, 0.0))
                continue
            g = GUARDS[_edge_kind(dom, tr.phases[i + 1])]
            a0 = g.value(p, np.zeros(6), 0.0, dom)
            a = np.array([g.value(p, np.eye(7)[m, :6], np.eye(7)[m, 6], dom) - a0 for m in range(7)])
            self.guards.append((a, a0))
        self.aug = []
        for dyn in tr.dyn:
            Ab = np.zeros((7, 7))
            Ab[:6, :6] = dyn.A
            Ab[:6, 6] = dyn.c
            self.aug.append(Ab)

    # -- indexing ---------------------------------------------------------
    def us(self, i):
        return self.ucols[i]

    def ti(self, i):
        return self.tcols[i]

    def from_z(self, z):
        X, U, T = self.tr.unpack(z)
        w = np.zeros(self.n)
        w[: len(self.apex_idx)] = X[0, 0, self.apex_idx]
        for i in self.act:
            w[self.us(i)] = U[i]
            w[self.ti(i)] = T[i]
        return w

    def bounds(self):
        p, tr = self.tr.params, self.tr
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        for m, j in enumerate(self.apex_idx):
            if j == 1:
                lb[m], ub[m] = 0.0, p.y_max
        for i in self.act:
            idx = [tr.ui(i, k) for k in range(tr.N)]
            lb[self.us(i)] = np.maximum(lb[self.us(i)], tr.lb[idx])
            ub[self.us(i)] = np.minimum(ub[self.us(i)], tr.ub[idx])
            lb[self.ti(i)], ub[self.ti(i)] = tr.lb[tr.ti(i)], tr.ub[tr.ti(i)]
        return lb, ub

    # -- events -----------------------------------------------------------
    def _first_crossing(self, i, x0):
        """Time of the first decreasing zero of the exit guard (or ``t_max``)."""
        a, a0 = self.guards[i]
        Ab = self.aug[i]
        step = expm(Ab * self.sample)
        v = np.append(x0, 1.0)
        g_prev = a[:6] @ x0 + a0
        t = 0.0
        while t < self.t_max:
            v_next = step @ v
            g = a[:6] @ v_next[:6] + a0
            if g_prev > 0.0 >= g:
                def gt(s):
                    return a[:6] @ (expm(Ab * s) @ v)[:6] + a0
                s = brentq(gt, 0.0, self.sample, xtol=1e-16, rtol=4 * np.finfo(float).eps)
                return t + s, True
            v, g_prev, t = v_next, g, t + self.sample
        return self.t_max, False

    # -- rollout ----------------------------------------------------------
    def rollout(self, w):
        """Return the knot vector ``z``, ``dz/dw`` and whether every event fired."""
        tr, N, p = self.tr, self.tr.N, self.tr.params
        z = np.zeros(tr.n)
        Zw = np.zeros((tr.n, self.n))
        x = np.zeros(6)
        S = np.zeros((6, self.n))
        x[self.apex_idx] = w[: len(self.apex_idx)]
        S[self.apex_idx, np.arange(len(self.apex_idx))] = 1.0
        x[0] = tr.problem.H_f + p.l0 - x[2]
        S[0] = -S[2]
        fired = True
        for i, dom in enumerate(tr.phases):
            dyn = tr.dyn[i]
            if i > 0:
                R = tr.resets[i - 1]
                x, S = R @ x, R @ S
            if i in self.act:
                T = w[self.ti(i)]
                u = w[self.us(i)]
                ucols = self.us(i)
                h = T / (N - 1)
                (Phi, G0, G1, gam), (dPhi, dG0, dG1, dgam) = _foh_blocks(dyn.A, dyn.b, dyn.c, h)
                for k in range(N):
                    j = tr.xi(i, k)
                    z[j : j + 6], z[j + 6] = x, u[k]
                    Zw[j : j + 6] = S
                    Zw[j + 6, ucols[k]] += 1.0
                    if k == N - 1:
                        break
                    S_new = Phi @ S
                    S_new[:, self.ti(i)] += (dPhi @ x + dG0 * u[k] + dG1 * u[k + 1] + dgam) / (N - 1)
                    S_new[:, ucols[k]] += G0
                    S_new[:, ucols[k + 1]] += G1
                    x = Phi @ x + G0 * u[k] + G1 * u[k + 1] + gam
                    S = S_new
                z[tr.ti(i)] = T
                Zw[tr.ti(i), self.ti(i)] = 1.0
                continue
            T, ok = self._first_crossing(i, x)
            fired &= ok
            a = self.guards[i][0][:6]
            Ab = self.aug[i]
            E = expm(Ab * T)
            x_end = E[:6, :6] @ x + E[:6, 6]
            f_end = dyn.A @ x_end + dyn.c
            rate = a @ f_end
            dT = -(a @ E[:6, :6] @ S) / rate if ok and abs(rate) > 0 else np.zeros(self.n)
            step = expm(Ab * (T / (N - 1)))
            Phi_h, gam_h = step[:6, :6], step[:6, 6]
            xk, Sk = x.copy(), S.copy()  # Sk = Phi(tau_k) S
            for k in range(N):
                j = tr.xi(i, k)
                s = k / (N - 1)
                z[j : j + 6] = xk
                Zw[j : j + 6] = Sk + np.outer(dyn.A @ xk + dyn.c, s * dT)
                if k < N - 1:
                    xk = Phi_h @ xk + gam_h
                    Sk = Phi_h @ Sk
            x = xk
            S = Zw[tr.xi(i, N - 1) : tr.xi(i, N - 1) + 6].copy()
            z[tr.ti(i)] = T
            Zw[tr.ti(i)] = dT
        return z, Zw, fired

    # -- remaining equalities ---------------------------------------------
    def eq(self, z, Zw):
        tr, N = self.tr, self.tr.N
        rows, jac = [], []
        for i in self.act:
            a, a0 = self.guards[i]
            j = tr.xi(i, N - 1)
            rows.append(a @ z[j : j + 7] + a0)
            jac.append(a @ Zw[j : j + 7])
        a, b_ = tr.xi(0, 0), tr.xi(tr.n_phases - 1, N - 1)
        for m in self.periodic_idx:
            rows.append(z[b_ + m] - z[a + m])
            jac.append(Zw[b_ + m] - Zw[a + m])
        return np.array(rows), np.array(jac)

    def ineq_rows(self, z, Zw):
        """Knot inequalities of the transcription plus rolled-out ``y`` bounds."""
        tr, N = self.tr, self.tr.N
        ci, Ji = tr.ineq(z)
        rows, jac = [ci], [Ji @ Zw]
        for i, dom in enumerate(tr.phases):
            if dom.hardstop:
                continue
            prev_pinned = i > 0 and tr.phases[i - 1].hardstop
            nxt = tr.phases[i + 1] if i + 1 < tr.n_phases else None
            for k in range(N):
                if k == 0 and (prev_pinned or (i == 0 and 1 in self.apex_idx)):
                    continue  # pinned on entry, or a variable bound
                if k == N - 1 and nxt is not None and nxt.hardstop:
                    continue  # the hardstop guard
                j = tr.xi(i, k) + 1
                rows.append([z[j] - tr.lb[j], tr.ub[j] - z[j]])
                jac.append(np.vstack([Zw[j], -Zw[j]]))
        for i in self.act:
            if i == tr.n_phases - 1:
                continue
            r, dr = self._exit_rate(i, z, Zw)
            margin = EXIT_RATE[_edge_kind(tr.phases[i], tr.phases[i + 1])]
            rows.append([-r - margin])
            jac.append(-dr[None, :])
        return np.concatenate(rows), np.vstack(jac)

    def _exit_rate(self, i, z, Zw):
        """Time derivative of the exit guard at the last knot of phase ``i``."""
        tr, N = self.tr, self.tr.N
        a = self.guards[i][0]
        dyn = tr.dyn[i]
        j, jp = tr.xi(i, N - 1), tr.xi(i, N - 2)
        x, u = z[j : j + 6], z[j + 6]
        T = z[tr.ti(i)]
        du = (u - z[jp + 6]) * (N - 1) / T
        r = a[:6] @ (dyn.A @ x + dyn.b * u + dyn.c) + a[6] * du
        dr = a[:6] @ (dyn.A @ Zw[j : j + 6] + np.outer(dyn.b, Zw[j + 6]))
        dr = dr + a[6] * (N - 1) * ((Zw[j + 6] - Zw[jp + 6]) / T - (u - z[jp + 6]) / T**2 * Zw[tr.ti(i)])
        return r, dr


def transcribe(problem: HopProblem) -> Transcription:
    return Transcription(problem)


# --------------------------------------------------------------------------
# Solutions


@dataclass(eq=False)
class HopSolution:
    problem: HopProblem
    z: np.ndarray
    trajectory: HybridTrajectory
    control: ControlSignal
    phase_durations: list
    cost: float
    diagnostics: dict
    converged: bool
    phases: list = field(default_factory=list)

    @property
    def params(self) -> ModelParams:
        return self.problem.params

    @property
    def H_f(self) -> float:
        return self.problem.H_f

    @property
    def apex_state(self) -> State:
        return self.trajectory.phases[0].first

    @property
    def phase_clocks(self) -> list[float]:
        """Policy-clock value at the start of each phase."""
        return _phase_clocks(self.phases, self.phase_durations)

    @property
    def apex_clock(self) -> float:
        """Policy-clock value at the apex where the hop starts."""
        return self.phase_clocks[0]

    def policy(self, feedback=None, reference=True) -> ControlPolicy:
        """Open-loop playback policy (optionally with PD on ``y``)."""
        ref = None
        if feedback is not None and reference:
            ref = self.reference()
        return ControlPolicy(self.control, self.params.u_max, feedback, ref)

    def reference(self, substeps: int = 200):
        """``(t, y, ydot)`` over the whole cycle in policy time.

        Each knot interval is refined into ``substeps`` exact sub-intervals
        so that a PD loop sees no interpolation error on the nominal orbit.
        """
        clocks = self.phase_clocks
        g = next(i for i, d in enumerate(self.phases) if d.grounded)
        ts, ys, yds = [], [], []
        for i in _policy_order(len(self.phases), g):
            ph = self.trajectory.phases[i]
            t, x = _refine(self.params, ph, substeps)
            t = clocks[i] + t
            keep = slice(1, None) if ts and t[0] <= ts[-1][-1] else slice(None)
            ts.append(t[keep])
            ys.append(x[keep, 1])
            yds.append(x[keep, 4])
        return np.concatenate(ts), np.concatenate(ys), np.concatenate(yds)

    def to_dict(self) -> dict:
        return {
            "H_f": self.H_f,
            "params": self.params.to_dict(),
            "phase_sequence": [d.value for d in self.problem.phase_sequence],
            "knots_per_phase": self.problem.knots_per_phase,
            "phases": [
                {
                    "domain": ph.domain.value,
                    "duration": ph.duration,
                    "t": ph.t.tolist(),
                    "x": ph.x.tolist(),
                    "u": ph.u.tolist(),
                }
                for ph in self.trajectory.phases
            ],
            "control": {"t": self.control.t.tolist(), "u": self.control.u.tolist(),
                        "scope": sorted(d.value for d in self.control.domain_scope)},
            "phase_durations": list(map(float, self.phase_durations)),
            "cost": self.cost,
            "converged": bool(self.converged),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HopSolution":
        params = ModelParams.from_dict(d["params"])
        problem = HopProblem(params, d["H_f"], tuple(d["phase_sequence"]), d["knots_per_phase"])
        tr = Transcription(problem)
        X = np.array([ph["x"] for ph in d["phases"]])
        U = np.array([ph["u"] for ph in d["phases"]])
        z = tr.pack(X, U, d["phase_durations"])
        sol = _assemble(tr, z, d.get("diagnostics", {}), d.get("converged", False))
        return sol

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "HopSolution":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _assemble(tr: Transcription, z, diagnostics: dict, converged: bool) -> HopSolution:
    X, U, T = tr.unpack(z)
    phases = []
    for i, dom in enumerate(tr.phases):
        t = np.linspace(0.0, T[i], tr.N)
        dyn = tr.dyn[i]
        F = X[i] @ dyn.Fx.T + np.outer(U[i], dyn.Fu) + dyn.Fc
        ph = PhaseTrajectory(dom, t, X[i].copy(), U[i].copy(), F)
        phases.append(ph)
    for i, ph in enumerate(phases[:-1]):
        nxt = tr.phases[i + 1]
        ph.exit_event = (_edge_kind(tr.phases[i], nxt), nxt)
    phases[-1].exit_event = ("Apex", None)
    resets = [(phases[i].last, State(phases[i].last.q, R[3:, 3:] @ phases[i].last.qdot, tr.phases[i + 1]))
              for i, R in enumerate(tr.resets)]
    traj = HybridTrajectory(phases, resets, [(float(np.sum(T)), X[-1, -1].copy())])
    control = _policy_signal(tr, U, T)
    cost, _ = tr.cost(z)
    return HopSolution(tr.problem, z.copy(), traj, control, [float(v) for v in T], float(cost),
                       diagnostics, converged, list(tr.phases))


def _refine(params: ModelParams, ph: PhaseTrajectory, substeps: int):
    """Exact states on a grid ``substeps`` times finer than the knots."""
    n = ph.t.size
    if n < 2 or ph.duration <= 0:
        return ph.t.copy(), ph.x.copy()
    dyn = domain_dynamics(params, ph.domain)
    h = ph.duration / (n - 1) / substeps
    (Phi, G0, G1, gam), _ = _foh_blocks(dyn.A, dyn.b, dyn.c, h)
    x = ph.x[0].copy()
    xs = [x]
    for k in range(n - 1):
        u = np.linspace(ph.u[k], ph.u[k + 1], substeps + 1)
        for m in range(substeps):
            x = Phi @ x + G0 * u[m] + G1 * u[m + 1] + gam
            xs.append(x)
        x = ph.x[k + 1].copy()  # re-anchor on the knot
        xs[-1] = x
    return np.linspace(0.0, ph.duration, (n - 1) * substeps + 1), np.array(xs)


def _policy_order(n_phases: int, start: int) -> list[int]:
    return list(range(start, n_phases)) + list(range(start))


def _phase_clocks(phases, durations) -> list[float]:
    """Policy time at the start of each phase; the clock restarts at touchdown."""
    g = next(i for i, d in enumerate(phases) if DomainId(d).grounded)
    clocks = [0.0] * len(phases)
    t = 0.0
    for i in _policy_order(len(phases), g):
        clocks[i] = t
        t += durations[i]
    return clocks


def _policy_signal(tr: Transcription, U, T) -> ControlSignal:
    """Concatenate the actuated knots in policy time."""
    act = tr.actuated
    if not act:
        return ControlSignal.zero()
    clocks = _phase_clocks(tr.phases, T)
    order = [i for i in _policy_order(tr.n_phases, tr.touchdown_phase) if i in act]
    ts, us = [], []
    for i in order:
        t = clocks[i] + np.linspace(0.0, T[i], tr.N)
        u = U[i]
        if ts and t[0] <= ts[-1][-1]:
            t, u = t[1:], u[1:]
        ts.append(t)
        us.append(u)
    return ControlSignal(np.concatenate(ts), np.concatenate(us), tr.actuated_domains)


def _edge_kind(a: DomainId, b: DomainId):
    for guard, target in CYCLE_EDGES[a]:
        if target is b:
            return guard.kind
    return None


# --------------------------------------------------------------------------
# Initial guess


def passive_guess(tr: Transcription) -> np.ndarray:
    """Knots sampled from a simulated hop started at the target apex.

    The double-spring hop is unforced.  A free mover would drift through its
    stroke, so where it is actuated a stiff PD holds it at mid-stroke.  The
    hop loses height, so the guess violates periodicity only; everything
    else is dynamically consistent.
    """
    p, H = tr.params, tr.problem.H_f
    y0 = 0.0 if tr.phases[0].hardstop else 0.5 * p.y_max
    s0 = State([p.l0 + H, y0, 0.0], np.zeros(3), tr.phases[0])
    policy = None
    if not tr.phases[0].hardstop:
        k_hold = p.k_s
        gains = PDGains(k_hold, 2.0 * np.sqrt(k_hold * p.Mm))
        policy = ControlPolicy(ControlSignal.zero(tr.actuated_domains), p.u_max, gains,
                               (np.zeros(1), np.full(1, y0), np.zeros(1)))
    cfg = IntegratorConfig(rtol=1e-9, atol=1e-11)
    state = s0
    X = np.zeros((tr.n_phases, tr.N, 6))
    U = np.zeros((tr.n_phases, tr.N))
    T = np.zeros(tr.n_phases)
    for i, dom in enumerate(tr.phases):
        sections = (APEX,) if i == tr.n_phases - 1 else ()
        ph = integrate_domain(p, dom, state, policy, 3.0, cfg, 0.0, sections, guards=i < tr.n_phases - 1)
        T[i] = max(ph.duration, 2e-4)
        t = np.linspace(0.0, ph.duration, tr.N)
        X[i] = ph.state_at(t)
        U[i] = np.interp(t, ph.t, ph.u)
        if i < tr.n_phases - 1:
            nxt = tr.phases[i + 1]
            if ph.exit_event is None or ph.exit_event[1] is not nxt:
                raise NotConverged(f"initial guess left the cycle after {dom.value}")
            state = apply_reset(p, ph.last, nxt)
    return tr.pack(X, U, T)


# --------------------------------------------------------------------------
# Solver


def solve_hop(
    problem: HopProblem,
    init: HopSolution | np.ndarray | None = None,
    maxiter: int = 300,
    ftol: float = 1e-14,
    raise_on_failure: bool = False,
) -> HopSolution:
    """Minimum-effort periodic hop for ``problem``.

    SLSQP runs on the variables of :class:`EventShooting`; the returned
    solution carries the full knot vector of the transcription, whose
    defects sit at round-off level.  ``init`` may be a neighbouring
    :class:`HopSolution` (continuation) or a full decision vector.
    """
    tr = transcribe(problem)
    p = problem.params
    if init is None:
        z0 = passive_guess(tr)
    elif isinstance(init, HopSolution):
        z0 = _warm_start(tr, init)
    else:
        z0 = np.asarray(init, dtype=float)
    if z0.shape != (tr.n,):
        raise ValueError(f"initial guess has length {z0.size}, expected {tr.n}")

    sh = EventShooting(tr)
    lb, ub = sh.bounds()
    scale = np.ones(sh.n)
    for m, j in enumerate(sh.apex_idx):
        scale[m] = {1: p.y_max, 2: 1e-3, 4: 0.1, 5: 0.1}[j]
    for i in sh.act:
        scale[sh.us(i)] = p.u_max
        scale[sh.ti(i)] = max(z0[tr.ti(i)], 1e-2)
    cost_scale = 1.0 / (p.u_max**2 * 0.05)

    cache = {}

    def evaluate(v):
        key = v.tobytes()
        if key not in cache:
            cache.clear()
            z, Zw, _ = sh.rollout(v * scale)
            Zv = Zw * scale
            f, gz = tr.cost(z)
            ce, Je = sh.eq(z, Zv)
            ci, Ji = sh.ineq_rows(z, Zv)
            cache[key] = (f * cost_scale, gz @ Zv * cost_scale, ce, Je, ci, Ji)
        return cache[key]

    constraints = [
        {"type": "eq", "fun": lambda v: evaluate(v)[2], "jac": lambda v: evaluate(v)[3]},
        {"type": "ineq", "fun": lambda v: evaluate(v)[4], "jac": lambda v: evaluate(v)[5]},
    ]
    bounds = list(zip(lb / scale, ub / scale))
    v0 = np.clip(sh.from_z(z0) / scale, lb / scale, ub / scale)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(
            lambda v: evaluate(v)[:2],
            v0,
            jac=True,
            method="SLSQP",
            bounds=bounds,
            constraints=constraints,
            options={"maxiter": maxiter, "ftol": ftol},
            callback=_trace(evaluate),
        )
    z, _, fired = sh.rollout(np.clip(res.x, lb / scale, ub / scale) * scale)
    X = tr.unpack(z)[0]
    ci = sh.ineq_rows(z, np.zeros((tr.n, 0)))[0]
    diagnostics = {
        "equality_residual": tr.defect_norm(z),
        "inequality_min": float(ci.min(initial=0.0)),
        "bound_violation": tr.bound_violation(z),
        "events_fired": bool(fired),
        "iterations": int(res.nit),
        "solver_status": int(res.status),
        "solver_message": str(res.message),
        "solve_time": time.perf_counter() - t0,
        "periodicity_residual": float(np.max(np.abs(X[-1, -1] - X[0, 0]))),
    }
    converged = bool(
        fired
        and diagnostics["equality_residual"] < EQ_TOL
        and diagnostics["inequality_min"] > -EQ_TOL
        and diagnostics["bound_violation"] < EQ_TOL
        and (res.success or res.status == 8)
    )
    sol = _assemble(tr, z, diagnostics, converged)
    log.info(
        "H_f=%.3f %s: cost=%.4g eq=%.2e it=%d %s",
        problem.H_f, p.variant.value, sol.cost, diagnostics["equality_residual"], res.nit, res.message,
    )
    if not converged and raise_on_failure:
        raise NotConverged(f"solve_hop did not converge: {res.message}", sol)
    return sol


def _trace(evaluate):
    def cb(v):
        f, _, ce, _, ci, _ = evaluate(v)
        log.debug("f=%.4g |eq|=%.3g min ineq=%.3g", f, np.max(np.abs(ce), initial=0.0), ci.min(initial=0.0))

    return cb


def _warm_start(tr: Transcription, init: HopSolution) -> np.ndarray:
    """Re-use a neighbouring solution, resampled to this problem's knots."""
    X = np.zeros((tr.n_phases, tr.N, 6))
    U = np.zeros((tr.n_phases, tr.N))
    T = np.array(init.phase_durations, dtype=float)
    if len(init.trajectory.phases) != tr.n_phases:
        raise ValueError("warm start has a different phase structure")
    for i, ph in enumerate(init.trajectory.phases):
        s_old = np.linspace(0, 1, ph.t.size)
        s_new = np.linspace(0, 1, tr.N)
        for m in range(6):
            X[i, :, m] = np.interp(s_new, s_old, ph.x[:, m])
        U[i] = np.interp(s_new, s_old, ph.u)
    # shift the apex to the new clearance; the optimizer repairs the rest
    dH = tr.problem.H_f - init.H_f
    X[0, :, 0] += dH * np.linspace(1, 0, tr.N) ** 2
    X[-1, :, 0] += dH * np.linspace(0, 1, tr.N) ** 2
    return tr.pack(X, U, T)


# --------------------------------------------------------------------------
# Validation against the integrator


@dataclass
class DefectReport:
    max_state_deviation: float
    relative_deviation: float
    guard_residuals: list
    periodicity_residual: float
    constraint_violation: float
    apex_clearance: float
    apex_error: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def validate_solution(params: ModelParams, sol: HopSolution, tol: IntegratorConfig = IntegratorConfig()) -> DefectReport:
    """Re-integrate every phase from its first knot with the solution's force.

    Each phase is integrated for its optimized duration with guards off, so
    deviations measure transcription error rather than event timing.  The
    full open-loop hop is then replayed with :func:`simulate_hybrid` to
    compare the returning apex.
    """
    dev = 0.0
    guard_res = []
    viol = 0.0
    clocks = sol.phase_clocks
    for i, ph in enumerate(sol.trajectory.phases):
        dom = ph.domain
        T = ph.duration
        if T <= 0:
            continue
        sim = integrate_domain(params, dom, ph.first, sol.control, T, tol, clocks[i], guards=False)
        xs = sim.state_at(ph.t)
        dev = max(dev, float(np.max(np.abs(xs - ph.x))))
        end = sim.x[-1]
        if ph.exit_event and ph.exit_event[0] != "Apex":
            g = GUARDS[ph.exit_event[0]]
            guard_res.append(abs(g.value(params, end, float(sim.u[-1]), dom)))
        viol = max(viol, float(np.max(np.maximum(0, -sim.x[:, 1]))) if not dom.hardstop else 0.0)
        gi = ground_row_index(dom)
        if gi is not None:
            viol = max(viol, float(np.max(np.maximum(0, -sim.F[:, gi]))) / (params.M0 * params.g))
        viol = max(viol, float(np.max(np.maximum(0, np.abs(sim.u) - params.u_max))))
    X0 = sol.trajectory.phases[0].x[0]
    Xn = sol.trajectory.phases[-1].x[-1]
    scale = max(1.0, float(np.max(np.abs(np.vstack([ph.x for ph in sol.trajectory.phases])))))

    apex, err = np.nan, np.inf
    try:
        tr = simulate_hybrid(params, sol.apex_state, sol.policy(), StopCondition(hops=1, t_final=5.0), tol,
                             clock0=sol.apex_clock)
        if tr.apexes:
            xa = tr.apexes[0][1]
            apex = float(xa[0] + xa[2] - params.l0)
            err = abs(apex - sol.H_f) / sol.H_f
    except Exception as exc:  # report, never raise
        log.warning("replay failed: %s", exc)
    return DefectReport(
        max_state_deviation=dev,
        relative_deviation=dev / scale,
        guard_residuals=guard_res,
        periodicity_residual=float(np.max(np.abs(Xn - X0))),
        constraint_violation=viol,
        apex_clearance=apex,
        apex_error=err,
    )
