"""Model parameters and the unpinned equations of motion.

Generalized coordinates are ``q = (z_b, y, delta)``:

* ``z_b``   body height above the ground,
* ``y``     compression of the upper (parallel) spring, ``y >= 0``; the
  hardstop sits at ``y = 0``,
* ``delta`` compression of the lower (series) spring, signed so that the
  foot height is ``p_f = z_b + delta - l0``.

The unpinned dynamics read ``M qdd + H(q, qd) = B u`` with a constant mass
matrix and an affine bias vector.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidParameters

B = np.array([0.0, 1.0, 0.0])


class Variant(str, enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"


@dataclass(frozen=True)
class MotorModel:
    """Linear motor electrical constants.

    k_f is the force constant (N/A), k_b the back-emf constant (V s/m) and
    R the winding resistance (Ohm).
    """

    k_f: float = 20.0
    k_b: float = 20.0
    R: float = 4.0

    def __post_init__(self):
        if not self.k_f > 0 or not self.R > 0 or self.k_b < 0:
            raise InvalidParameters(f"invalid motor constants: {self}")


@dataclass(frozen=True)
class ModelParams:
    M0: float
    Mm: float
    Mf: float
    c_b: float
    k_p: float
    c_p: float
    k_s: float
    c_s: float
    g: float = 9.81
    l0: float = 0.3
    y_max: float = 0.08
    u_max: float = 450.0
    motor: MotorModel = field(default_factory=MotorModel)
    variant: Variant = Variant.DOUBLE

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if isinstance(self.motor, dict):
            object.__setattr__(self, "motor", MotorModel(**self.motor))
        if not (self.Mm > 0 and self.Mf > 0 and self.M0 > self.Mm + self.Mf):
            raise InvalidParameters("masses must satisfy M0 > Mm + Mf > 0")
        if not self.k_s > 0:
            raise InvalidParameters("k_s must be positive")
        if min(self.c_b, self.c_p, self.c_s) < 0:
            raise InvalidParameters("damping coefficients must be non-negative")
        if self.variant is Variant.DOUBLE and not self.k_p > 0:
            raise InvalidParameters("double-spring variant needs k_p > 0")
        if self.variant is Variant.SINGLE and self.k_p != 0:
            raise InvalidParameters("single-spring variant needs k_p == 0")
        if not (self.u_max > 0 and self.y_max > 0 and self.l0 > 0 and self.g > 0):
            raise InvalidParameters("u_max, y_max, l0 and g must be positive")

    @property
    def Mb(self) -> float:
        """Mass of the body alone (total minus mover and foot)."""
        return self.M0 - self.Mm - self.Mf

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def as_single_spring(self, c_p: float | None = None) -> "ModelParams":
        """Same robot with the parallel spring removed.

        ``c_p`` optionally overrides the mover/body damping, since removing
        the spring also removes its share of the damping.
        """
        return self.replace(
            k_p=0.0,
            c_p=self.c_p if c_p is None else c_p,
            variant=Variant.SINGLE,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameters(f"unknown parameter keys: {sorted(unknown)}")
        d = dict(d)
        if "motor" in d:
            d["motor"] = MotorModel(**d["motor"])
        return cls(**d)


def load_params(path) -> ModelParams:
    """Read a parameter file (JSON, SI units)."""
    with open(path) as fh:
        return ModelParams.from_dict(json.load(fh))


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")


def nominal_params(variant: Variant | str = Variant.DOUBLE) -> ModelParams:
    """Bundled nominal parameter set for the requested variant.

    These are calibration values chosen for a ~2.5 kg robot, not measured
    hardware data.
    """
    variant = Variant(variant)
    name = "nominal_double.json" if variant is Variant.DOUBLE else "nominal_single.json"
    with resources.files("mmhop.data").joinpath(name).open() as fh:
        return ModelParams.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class State:
    q: np.ndarray
    qdot: np.ndarray
    domain: object = None
    t_local: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(3))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=float).reshape(3))

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])

    @classmethod
    def from_x(cls, x, domain=None, t_local: float = 0.0) -> "State":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:], domain, t_local)

    def with_(self, **changes) -> "State":
        return dataclasses.replace(self, **changes)


def mass_matrix(params: ModelParams) -> np.ndarray:
    M0, Mm, Mf = params.M0, params.Mm, params.Mf
    return np.array([[M0, -Mm, Mf], [-Mm, Mm, 0.0], [Mf, 0.0, Mf]])


def stiffness_matrix(params: ModelParams) -> np.ndarray:
    return np.diag([0.0, params.k_p, params.k_s])


def damping_matrix(params: ModelParams) -> np.ndarray:
    return np.diag([params.c_b, params.c_p, params.c_s])


def gravity_vector(params: ModelParams) -> np.ndarray:
    g = params.g
    return np.array([params.M0 * g, -params.Mm * g, params.Mf * g])


def bias_vector(params: ModelParams, state: State) -> np.ndarray:
    """``H(q, qd)``: damping, spring and gravity terms of the unpinned dynamics."""
    _, y, delta = state.q
    zd, yd, dd = state.qdot
    F_p = params.k_p * y + params.c_p * yd
    F_s = params.k_s * delta + params.c_s * dd
    return np.array(
        [
            params.c_b * zd + params.M0 * params.g,
            F_p - params.Mm * params.g,
            F_s + params.Mf * params.g,
        ]
    )


def foot_height(params: ModelParams, state: State) -> float:
    return state.q[0] + state.q[2] - params.l0


def foot_velocity(state: State) -> float:
    return state.qdot[0] + state.qdot[2]


def kinetic_energy(params: ModelParams, state: State) -> float:
    return 0.5 * state.qdot @ mass_matrix(params) @ state.qdot


def mechanical_energy(params: ModelParams, state: State) -> float:
    """Kinetic + gravitational + elastic energy.

    Gravitational potential uses the ground as datum for the body and the
    rest geometry for mover and foot; only differences are meaningful.
    """
    z_b, y, delta = state.q
    potential = params.g * (params.M0 * z_b - params.Mm * y + params.Mf * delta)
    elastic = 0.5 * params.k_p * y**2 + 0.5 * params.k_s * delta**2
    return kinetic_energy(params, state) + potential + elastic
