"""Event-detecting integration of the per-domain flows and hybrid chaining.

The stepper is the Dormand-Prince 5(4) pair with its standard 4th-order
continuous extension.  Steps land exactly on control breakpoints so the
piecewise-linear input never introduces a kink inside a step.  A guard is
bracketed on the dense output of each accepted step and then located by
bisection on genuine RK steps, so the state handed to the reset map is a
true integrator state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .control import ControlPolicy, ControlSignal, evaluate_policy
from .errors import AmbiguousEvent, SimulationDiverged, StepFailure
from .hybrid import (
    DomainId,
    GuardKind,
    apply_reset,
    domain_dynamics,
    exits,
    ground_row_index,
)
from .model import ModelParams, State

log = logging.getLogger(__name__)

# Dormand-Prince tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
# Continuous extension: x(t0 + s h) = x0 + h K^T P [s, s^2, s^3, s^4].
_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

ORDER = 5


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-10
    atol: float = 1e-12
    first_step: float = 1e-4
    min_step: float = 1e-13
    max_step: float = 0.02
    fixed_step: float | None = None
    event_tol: float = 1e-10
    event_time_tol: float = 1e-13
    dense_checks: int = 4
    max_norm: float = 1e4


def rk_step(f, t, x, h, k0=None):
    """One Dormand-Prince step; returns ``(x_new, K, err)``."""
    K = np.empty((7, x.size))
    K[0] = f(t, x) if k0 is None else k0
    for i in range(1, 7):
        K[i] = f(t + _C[i] * h, x + h * (np.dot(_A[i], K[:i])))
    x_new = x + h * (_B5 @ K)
    err = h * (_E @ K)
    return x_new, K, err


def dense_eval(x0, h, K, s):
    s = np.atleast_1d(s)
    powers = np.vstack([s, s**2, s**3, s**4])
    return x0[:, None] + h * (K.T @ _P) @ powers


@dataclass
class PhaseTrajectory:
    domain: DomainId
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    F: np.ndarray
    exit_event: tuple | None = None  # (kind, target DomainId or None)
    clock0: float = 0.0
    segments: list = field(default_factory=list, repr=False)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def states(self) -> list:
        return [State.from_x(x, self.domain, t) for t, x in zip(self.t, self.x)]

    @property
    def first(self) -> State:
        return State.from_x(self.x[0], self.domain, 0.0)

    @property
    def last(self) -> State:
        return State.from_x(self.x[-1], self.domain, self.duration)

    def state_at(self, t) -> np.ndarray:
        """Dense-output state(s) at domain-local time(s) ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        starts = np.array([s[0] for s in self.segments])
        out = np.empty((t.size, 6))
        for j, tj in enumerate(t):
            i = int(np.clip(np.searchsorted(starts, tj, side="right") - 1, 0, len(starts) - 1))
            t0, h, x0, K = self.segments[i]
            out[j] = dense_eval(x0, h, K, (tj - t0) / h)[:, 0] if h > 0 else x0
        return out


@dataclass
class HybridTrajectory:
    phases: list
    resets: list
    apexes: list = field(default_factory=list)  # (t_global, x) at each apex after liftoff
    status: str = "complete"

    def stacked(self):
        """Concatenate phases into global-time arrays.

        Returns ``(t, domain_labels, x, u, F_ground)``.
        """
        ts, doms, xs, us, fg = [], [], [], [], []
        t0 = 0.0
        for ph in self.phases:
            ts.append(t0 + ph.t)
            doms.extend([ph.domain.value] * ph.t.size)
            xs.append(ph.x)
            us.append(ph.u)
            gi = ground_row_index(ph.domain)
            fg.append(ph.F[:, gi] if gi is not None else np.zeros(ph.t.size))
            t0 += ph.duration
        if not ts:
            return np.zeros(0), [], np.zeros((0, 6)), np.zeros(0), np.zeros(0)
        return np.concatenate(ts), doms, np.vstack(xs), np.concatenate(us), np.concatenate(fg)

    @property
    def duration(self) -> float:
        return float(sum(ph.duration for ph in self.phases))

    def state_at(self, t) -> np.ndarray:
        """Dense-output states at global times ``t`` (clipped to the run)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        starts = np.cumsum([0.0] + [ph.duration for ph in self.phases[:-1]])
        idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(self.phases) - 1)
        out = np.empty((t.size, 6))
        for i in np.unique(idx):
            ph = self.phases[i]
            sel = idx == i
            out[sel] = ph.state_at(np.clip(t[sel] - starts[i], 0.0, ph.duration))
        return out


@dataclass(frozen=True)
class Section:
    """Non-resetting event surface, e.g. the flight apex ``zdot_b = 0``."""

    kind: str
    index: int

    def value(self, params, x, u, domain):
        return float(x[self.index])

    def rate(self, params, x, u, domain):
        dyn = domain_dynamics(params, domain)
        return float((dyn.A @ x + dyn.b * u + dyn.c)[self.index])


APEX = Section("Apex", 3)


def _as_policy(control, params: ModelParams) -> ControlPolicy:
    if control is None:
        return ControlPolicy(ControlSignal.zero(), params.u_max)
    if isinstance(control, ControlSignal):
        return ControlPolicy(control, params.u_max)
    return control


def integrate_domain(
    params: ModelParams,
    domain: DomainId,
    state0: State,
    control=None,
    t_max: float = 5.0,
    tol: IntegratorConfig = IntegratorConfig(),
    clock0: float = 0.0,
    sections=(),
    graph: str = "cycle",
    guards: bool = True,
) -> PhaseTrajectory:
    """Integrate the constrained flow of ``domain`` until a guard fires or ``t_max``.

    ``clock0`` is the policy clock at domain entry.  ``sections`` are extra
    terminal surfaces (no reset).  ``guards=False`` disables domain exits.
    """
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    domain = DomainId(domain)
    policy = _as_policy(control, params)
    dyn = domain_dynamics(params, domain)
    A, b, c = dyn.A, dyn.b, dyn.c
    probe = State(np.zeros(3), np.zeros(3), domain)

    def u_of(t, x):
        object.__setattr__(probe, "q", x[:3])
        object.__setattr__(probe, "qdot", x[3:])
        return evaluate_policy(policy, probe, clock0 + t)

    def f(t, x):
        return A @ x + b * u_of(t, x) + c

    x = state0.x.copy()
    t = 0.0
    bps = [bp - clock0 for bp in policy.breakpoints() if 0.0 < bp - clock0 < t_max]
    bps.append(t_max)
    bp_i = 0

    u0 = u_of(0.0, x)
    surfaces = (list(exits(domain, u0, graph)) if guards else []) + [(s, None) for s in sections]
    ev_tol = tol.event_tol
    trig = 0.1 * ev_tol

    ts, xs, us, Fs, segs = [0.0], [x.copy()], [u0], [dyn.Fx @ x + dyn.Fu * u0 + dyn.Fc], []
    h = tol.fixed_step or min(tol.first_step, tol.max_step)
    k0 = None
    exit_event = None

    while True:
        while bp_i < len(bps) and bps[bp_i] <= t + 1e-15:
            bp_i += 1
        t_stop = bps[bp_i] if bp_i < len(bps) else t_max
        h_try = min(h, t_stop - t)
        x_new, K, err = rk_step(f, t, x, h_try, k0)
        if tol.fixed_step is None:
            scale = tol.atol + tol.rtol * np.maximum(np.abs(x), np.abs(x_new))
            en = np.sqrt(np.mean((err / scale) ** 2))
            if en > 1.0:
                h = h_try * max(0.2, 0.9 * en ** (-1 / ORDER))
                k0 = K[0]
                if h < tol.min_step:
                    raise StepFailure(f"step size underflow in {domain.value} at t={t:.6g}")
                continue
            fac = 10.0 if en == 0 else min(10.0, 0.9 * en ** (-1 / ORDER))
            h_next = min(tol.max_step, h_try * fac)
        else:
            h_next = tol.fixed_step

        # Guard bracketing on the dense output of the accepted step.
        hit = None
        if surfaces:
            s_grid = np.linspace(0.0, 1.0, tol.dense_checks + 1)
            X = dense_eval(x, h_try, K, s_grid)
            X[:, 0], X[:, -1] = x, x_new
            for surf, target in surfaces:
                g = [surf.value(params, X[:, j], u_of(t + s * h_try, X[:, j]), domain) for j, s in enumerate(s_grid)]
                for j in range(len(g) - 1):
                    if g[j] >= -trig and g[j + 1] < -trig:
                        if hit is None or s_grid[j] < hit[0]:
                            hit = (s_grid[j], s_grid[j + 1], surf, target)
                        break
        if hit is not None:
            lo, hi = hit[0] * h_try, hit[1] * h_try
            surf = hit[2]

            def g_at(tau):
                xt = rk_step(f, t, x, tau, K[0])[0] if tau > 0 else x
                return surf.value(params, xt, u_of(t + tau, xt), domain), xt

            g_lo, x_lo = g_at(lo)
            best = (abs(g_lo), lo, x_lo)
            if g_lo >= 0.0:
                for _ in range(200):
                    mid = 0.5 * (lo + hi)
                    g_mid, x_mid = g_at(mid)
                    if abs(g_mid) < best[0]:
                        best = (abs(g_mid), mid, x_mid)
                    if g_mid >= 0.0:
                        lo = mid
                    else:
                        hi = mid
                    if hi - lo < tol.event_time_tol and best[0] < ev_tol:
                        break
                    if hi - lo < 1e-16:
                        break
            _, tau, x_ev = best
            if tau > 0:
                segs.append((t, tau, x.copy(), rk_step(f, t, x, tau, K[0])[1]))
            t, x = t + tau, x_ev
            u_ev = u_of(t, x)
            # A second surface within the tolerance window makes the switch ambiguous.
            for other, target in surfaces:
                if other is surf or isinstance(other, Section) or isinstance(surf, Section):
                    continue
                if abs(other.value(params, x, u_ev, domain)) < ev_tol and other.rate(params, x, u_ev, domain) < 0:
                    raise AmbiguousEvent(f"{surf.kind} and {other.kind} fire together in {domain.value}")
            if tau > 0:
                ts.append(t)
                xs.append(x.copy())
                us.append(u_ev)
                Fs.append(dyn.Fx @ x + dyn.Fu * u_ev + dyn.Fc)
            exit_event = (surf.kind, hit[3])
            break

        segs.append((t, h_try, x.copy(), K))
        t += h_try
        x = x_new
        k0 = K[6]  # FSAL
        if bp_i < len(bps) and abs(t - bps[bp_i]) < 1e-14:
            t = bps[bp_i]
            k0 = None  # input slope changes at the breakpoint
        u_new = u_of(t, x)
        ts.append(t)
        xs.append(x.copy())
        us.append(u_new)
        Fs.append(dyn.Fx @ x + dyn.Fu * u_new + dyn.Fc)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > tol.max_norm:
            raise SimulationDiverged(f"state norm exceeded {tol.max_norm} in {domain.value}")
        if t >= t_max - 1e-15:
            break
        h = h_next

    return PhaseTrajectory(
        domain=domain,
        t=np.array(ts),
        x=np.array(xs),
        u=np.array(us),
        F=np.array(Fs).reshape(len(ts), -1),
        exit_event=exit_event,
        clock0=clock0,
        segments=segs,
    )


@dataclass(frozen=True)
class StopCondition:
    hops: int = 20
    t_final: float = 30.0
    max_events: int = 10000


FLIGHT_DOMAINS = (DomainId.D1, DomainId.D2, DomainId.FLIGHT)


def simulate_hybrid(
    params: ModelParams,
    state0: State,
    policy=None,
    stop: StopCondition = StopCondition(),
    tol: IntegratorConfig = IntegratorConfig(),
    graph: str = "cycle",
    clock0: float = 0.0,
    apex_armed: bool = False,
) -> HybridTrajectory:
    """Chain domain flows through guards and plastic resets.

    A hop is counted at every flight apex reached after a liftoff.  The
    policy clock restarts whenever the policy's ``clock_reset`` event fires
    (touchdown by default); otherwise it keeps running across domains.
    ``apex_armed`` enables the apex section in the very first phase, for
    starts that are already past liftoff.
    """
    policy = _as_policy(policy, params)
    if state0.domain is None:
        raise ValueError("initial state needs a domain")
    domain = DomainId(state0.domain)
    state = state0
    clock = clock0
    t_global = 0.0
    phases, resets, apexes = [], [], []
    hops = 0
    armed = apex_armed
    for _ in range(stop.max_events):
        if hops >= stop.hops or t_global >= stop.t_final - 1e-12:
            break
        sections = (APEX,) if armed and domain in FLIGHT_DOMAINS else ()
        ph = integrate_domain(
            params, domain, state, policy, stop.t_final - t_global, tol, clock, sections, graph
        )
        phases.append(ph)
        t_global += ph.duration
        clock += ph.duration
        if ph.exit_event is None:
            break
        kind, target = ph.exit_event
        pre = ph.last
        if kind == "Apex":
            hops += 1
            armed = False
            apexes.append((t_global, pre.x.copy()))
            target = domain
            post = State(pre.q, pre.qdot, domain, 0.0)
        else:
            post = apply_reset(params, pre, target)
            if kind == GuardKind.LIFTOFF:
                armed = True
            if kind == policy.clock_reset:
                clock = 0.0
        resets.append((pre, post))
        state, domain = post, target
    else:
        raise SimulationDiverged("too many hybrid events (Zeno behaviour?)")
    return HybridTrajectory(phases, resets, apexes)
