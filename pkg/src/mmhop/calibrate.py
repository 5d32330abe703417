"""Spring and damper identification from unpowered drop tests.

The robot is released at rest with the motor at zero current and falls
onto the ground.  Free spring and damping constants are fitted so that the
simulated drop reproduces the logged ``z_b``, ``y`` and ``delta`` channels.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .control import zero_policy
from .errors import HopperError, NoImprovement
from .hybrid import DomainId
from .integrate import IntegratorConfig, StopCondition, simulate_hybrid
from .model import ModelParams, State, Variant

log = logging.getLogger(__name__)

CHANNELS = ("z_b", "y", "delta")
FITTABLE = ("c_b", "c_p", "c_s", "k_p", "k_s")
_CHANNEL_INDEX = {"z_b": 0, "y": 1, "delta": 2}
DROP_TOL = IntegratorConfig(rtol=1e-9, atol=1e-11)


@dataclass(eq=False)
class DropTestLog:
    """Sampled drop-test trajectory.

    ``initial_height`` is the body height ``z_b`` at release; the robot is
    at rest there with the foot hanging from its spring.  Only the channels
    present in ``channels`` take part in a fit.
    """

    t: np.ndarray
    channels: dict
    initial_height: float
    params_known: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if self.t.ndim != 1 or self.t.size < 2:
            raise ValueError("a drop log needs at least two samples")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("drop log samples must be strictly time-ordered")
        unknown = set(self.channels) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels {sorted(unknown)}")
        if not self.channels:
            raise ValueError("drop log has no measured channels")
        self.channels = {k: np.asarray(v, dtype=float) for k, v in self.channels.items()}
        for k, v in self.channels.items():
            if v.shape != self.t.shape:
                raise ValueError(f"channel {k} has {v.size} samples, expected {self.t.size}")

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def to_csv(self, path) -> None:
        names = [c for c in CHANNELS if c in self.channels]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *names])
            for j, t in enumerate(self.t):
                w.writerow([repr(float(t))] + [repr(float(self.channels[c][j])) for c in names])

    @classmethod
    def from_csv(cls, path, initial_height: float | None = None) -> "DropTestLog":
        """Read a ``t,z_b,y,delta`` CSV; absent columns are simply not fitted.

        Without ``initial_height`` the first ``z_b`` sample is used.
        """
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if not header or header[0] != "t":
                raise ValueError(f"{path}: first column must be 't'")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        data = np.array(rows)
        channels = {name: data[:, j] for j, name in enumerate(header) if j > 0}
        if initial_height is None:
            if "z_b" not in channels:
                raise ValueError(f"{path}: initial_height needed when z_b is not logged")
            initial_height = float(channels["z_b"][0])
        return cls(data[:, 0], channels, initial_height)


def release_state(params: ModelParams, initial_height: float) -> State:
    """Rest state at release: foot hanging, mover on the hardstop."""
    delta0 = -params.Mf * params.g / params.k_s
    domain = DomainId.D1 if params.variant is Variant.DOUBLE else DomainId.FLIGHT
    return State([initial_height, 0.0, delta0], np.zeros(3), domain)


def simulate_drop(params: ModelParams, initial_height: float, t, tol: IntegratorConfig = DROP_TOL) -> np.ndarray:
    """``(z_b, y, delta)`` of an unforced drop at times ``t`` after release."""
    t = np.asarray(t, dtype=float)
    stop = StopCondition(hops=10**6, t_final=float(t[-1]) + 1e-9, max_events=100000)
    traj = simulate_hybrid(params, release_state(params, initial_height), zero_policy(params.u_max), stop, tol)
    return traj.state_at(t)[:, :3]


def synthetic_drop_log(
    params: ModelParams,
    initial_height: float = 0.5,
    duration: float = 1.0,
    rate: float = 500.0,
    noise: float = 0.0,
    seed: int | None = 0,
    channels=CHANNELS,
    t0: float = 0.0,
) -> DropTestLog:
    """Drop log generated by the model itself, optionally with Gaussian noise (m)."""
    t = np.arange(0.0, duration + 0.5 / rate, 1.0 / rate)
    q = simulate_drop(params, initial_height, t)
    rng = np.random.default_rng(seed)
    data = {c: q[:, _CHANNEL_INDEX[c]] + noise * rng.standard_normal(t.size) for c in channels}
    return DropTestLog(t + t0, data, initial_height)


@dataclass
class FitResult:
    params: ModelParams
    residual: float
    initial_residual: float
    history: list
    evaluations: int
    message: str

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "residual": self.residual,
            "initial_residual": self.initial_residual,
            "history": list(self.history),
            "evaluations": self.evaluations,
            "message": self.message,
        }


def _residuals(params: ModelParams, drop: DropTestLog, tol: IntegratorConfig) -> np.ndarray:
    q = simulate_drop(params, drop.initial_height, drop.t - drop.t[0], tol)
    return np.concatenate([q[:, _CHANNEL_INDEX[c]] - drop.channels[c] for c in CHANNELS if c in drop.channels])


def drop_residual(params: ModelParams, drop: DropTestLog, tol: IntegratorConfig = DROP_TOL) -> float:
    """RMS deviation between the simulated drop and the log."""
    r = _residuals(params, drop, tol)
    return float(np.sqrt(np.mean(r**2)))


def _window(drop: DropTestLog, t_end: float) -> DropTestLog:
    m = drop.t - drop.t[0] <= t_end + 1e-12
    return DropTestLog(drop.t[m], {c: v[m] for c, v in drop.channels.items()}, drop.initial_height)


def fit_parameters(
    drop: DropTestLog,
    guess: ModelParams,
    free=FITTABLE,
    tol: IntegratorConfig = DROP_TOL,
    max_nfev: int = 60,
    windows=(0.3, 0.45, 0.6, 0.8),
) -> tuple[ModelParams, FitResult]:
    """Least-squares fit of the ``free`` spring and damping constants.

    The fit is continued over growing prefixes of the log (``windows``, in
    seconds after release, followed by the whole log): late bounces make the
    full-length residual strongly multimodal in the stiffnesses, while the
    first impact alone pins them down.  ``max_nfev`` applies per window.

    Returns ``(params, result)``; ``result.residual`` is the achieved RMS
    error in metres over the whole log.  The best point seen on the whole
    log is returned, so the recorded residual history never increases.
    """
    free = tuple(dict.fromkeys(free))
    bad = set(free) - set(FITTABLE)
    if bad:
        raise ValueError(f"cannot fit {sorted(bad)}; choose from {FITTABLE}")
    if guess.variant is Variant.SINGLE and "k_p" in free:
        raise ValueError("the single-spring variant has no parallel spring to fit")
    r0 = drop_residual(guess, drop, tol)
    if not free:
        return guess, FitResult(guess, r0, r0, [r0], 1, "no free parameters")

    x0 = np.array([getattr(guess, name) for name in free])
    scale = np.maximum(np.abs(x0), 1e-3)
    lower = np.array([1e-6 if name.startswith("k") else 0.0 for name in free]) / scale
    best = {"r": r0, "x": x0 / scale}
    history = [r0]

    def make(v):
        return guess.replace(**{name: float(val) for name, val in zip(free, v * scale)})

    def objective(part, final):
        n = sum(c.size for c in part.channels.values())

        def fun(v):
            try:
                r = _residuals(make(v), part, tol)
            except HopperError as exc:
                log.debug("drop simulation failed at %s: %s", v * scale, exc)
                return np.full(n, 1.0)
            if final:
                rms = float(np.sqrt(np.mean(r**2)))
                if rms < best["r"]:
                    best["r"], best["x"] = rms, v.copy()
                    history.append(rms)
            return r

        return fun

    stages = [_window(drop, w) for w in windows if w < drop.duration]
    stages = [d for d in stages if d.t.size > len(free)] + [drop]
    v = np.clip(x0 / scale, lower, None)
    nfev, message = 0, ""
    for k, part in enumerate(stages):
        final = k == len(stages) - 1
        res = least_squares(objective(part, final), v, bounds=(lower, np.inf), diff_step=1e-6,
                            xtol=1e-10, ftol=1e-10, gtol=1e-10, max_nfev=max_nfev)
        v = res.x
        nfev += int(res.nfev)
        message = str(res.message)
        log.info("window %.3g s: rms %.3g after %d evaluations", part.duration, np.sqrt(np.mean(res.fun**2)), res.nfev)
    fitted = make(best["x"])
    if not best["r"] < r0:
        raise NoImprovement(f"fit did not reduce the residual ({r0:.3g} m)")
    return fitted, FitResult(fitted, best["r"], r0, history, nfev, message)
