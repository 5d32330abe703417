"""Apex return-map stability and per-hop energy accounting."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import trapezoid

from .control import ControlPolicy, evaluate_policy, force_to_current, zero_policy
from .errors import FixedPointResidualTooLarge, MismatchedGrids, SimulationDiverged
from .hybrid import DomainId
from .integrate import IntegratorConfig, StopCondition, integrate_domain, simulate_hybrid
from .model import ModelParams, State, Variant, mechanical_energy
from .optimize import HopSolution

# reduced apex coordinates (indices into the full 6-state)
SECTION_COORDS = {
    Variant.DOUBLE: (0, 2, 5),  # z_b, delta, delta_dot
    Variant.SINGLE: (0, 1, 4, 2, 5),  # z_b, y, y_dot, delta, delta_dot
}
SECTION_NAMES = {
    Variant.DOUBLE: ("z_b", "delta", "ddelta"),
    Variant.SINGLE: ("z_b", "y", "dy", "delta", "ddelta"),
}
FIXED_POINT_TOL = 1e-5
# multipliers within this distance of the unit circle are treated as neutral
STABILITY_MARGIN = 1e-3


def section_dim(params: ModelParams) -> int:
    return len(SECTION_COORDS[params.variant])


def to_section(params: ModelParams, x) -> np.ndarray:
    """Reduced apex coordinates of a full state vector."""
    return np.asarray(x, dtype=float)[list(SECTION_COORDS[params.variant])]


def from_section(params: ModelParams, s) -> State:
    """Lift reduced apex coordinates to a flight state with ``zdot_b = 0``."""
    x = np.zeros(6)
    x[list(SECTION_COORDS[params.variant])] = s
    domain = DomainId.D1 if params.variant is Variant.DOUBLE else DomainId.FLIGHT
    return State.from_x(x, domain)


def poincare_return(
    params: ModelParams,
    policy: ControlPolicy | None,
    section_state,
    clock0: float = 0.0,
    tol: IntegratorConfig = IntegratorConfig(),
) -> np.ndarray:
    """Next apex, in reduced coordinates, after one hop from ``section_state``.

    ``clock0`` is the policy clock at the starting apex (see
    :attr:`HopSolution.apex_clock`).
    """
    policy = policy if policy is not None else zero_policy(params.u_max)
    state = from_section(params, section_state)
    traj = simulate_hybrid(params, state, policy, StopCondition(hops=1, t_final=10.0), tol, clock0=clock0)
    if not traj.apexes:
        raise SimulationDiverged("no apex reached within one hop")
    return to_section(params, traj.apexes[0][1])


@dataclass
class StabilityReport:
    fixed_point: np.ndarray
    eigenvalue_magnitudes: list
    lambda_max: float
    stable: bool
    fd_step: float
    jacobian: np.ndarray = None
    residual: float = 0.0

    def to_dict(self) -> dict:
        return {
            "fixed_point": list(map(float, self.fixed_point)),
            "eigenvalue_magnitudes": list(map(float, self.eigenvalue_magnitudes)),
            "lambda_max": float(self.lambda_max),
            "stable": bool(self.stable),
            "fd_step": float(self.fd_step),
            "residual": float(self.residual),
            "jacobian": np.asarray(self.jacobian).tolist(),
        }


def stability_eigenvalues(
    params: ModelParams,
    policy: ControlPolicy | None,
    fixed_point,
    fd_step: float = 1e-6,
    clock0: float = 0.0,
    tol: IntegratorConfig = IntegratorConfig(),
    workers: int = 1,
) -> StabilityReport:
    """Eigenvalues of the return-map Jacobian at ``fixed_point``.

    Columns come from central differences with step ``fd_step * max(1, |x_i|)``.
    The orbit is reported stable only when ``lambda_max < 1 - STABILITY_MARGIN``;
    a neutral multiplier estimated at ``1 +- 1e-5`` is not asymptotic stability.
    """
    x0 = np.asarray(fixed_point, dtype=float)

    def ret(s):
        return poincare_return(params, policy, s, clock0, tol)

    residual = float(np.max(np.abs(ret(x0) - x0)))
    if residual > FIXED_POINT_TOL:
        raise FixedPointResidualTooLarge(f"|P(x) - x| = {residual:.3g} exceeds {FIXED_POINT_TOL}")
    n = x0.size

    def column(i):
        h = fd_step * max(1.0, abs(x0[i]))
        e = np.zeros(n)
        e[i] = h
        return (ret(x0 + e) - ret(x0 - e)) / (2 * h)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            cols = list(pool.map(column, range(n)))
    else:
        cols = [column(i) for i in range(n)]
    Jac = np.column_stack(cols)
    mags = np.sort(np.abs(np.linalg.eigvals(Jac)))[::-1]
    lam = float(mags[0])
    return StabilityReport(x0, list(mags), lam, lam < 1.0 - STABILITY_MARGIN, fd_step, Jac, residual)


def solution_stability(
    sol: HopSolution, feedback=None, fd_step: float = 1e-6, tol: IntegratorConfig = IntegratorConfig()
) -> StabilityReport:
    """Stability of an optimized orbit under open-loop playback (optionally with PD)."""
    params = sol.params
    return stability_eigenvalues(
        params, sol.policy(feedback), to_section(params, sol.apex_state.x), fd_step, sol.apex_clock, tol
    )


# --------------------------------------------------------------------------
# Energy


@dataclass
class EnergyReport:
    E_mech: float
    E_elec: float
    E_passive_loss: float
    eta_mech: float
    eta_elec: float
    F_max: float
    H_f: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _power_samples(params: ModelParams, sol: HopSolution, samples: int, tol: IntegratorConfig):
    """Time, force and mover speed over the hop on a uniform grid per phase."""
    policy = sol.policy()
    clocks = sol.phase_clocks
    chunks = []
    for i, ph in enumerate(sol.trajectory.phases):
        T = ph.duration
        if T <= 0:
            continue
        sim = integrate_domain(params, ph.domain, ph.first, policy, T, tol, clocks[i], guards=False)
        t = np.linspace(0.0, T, samples)
        X = sim.state_at(t)
        u = np.array([evaluate_policy(policy, State.from_x(x, ph.domain), clocks[i] + s) for s, x in zip(t, X)])
        chunks.append((t, u, X[:, 4]))
    return chunks


def actuator_energy(params: ModelParams, sol: HopSolution, samples: int = 4001,
                    tol: IntegratorConfig = IntegratorConfig()) -> tuple[float, float]:
    """``(E_mech, E_elec)`` delivered by the motor over one hop."""
    e_mech = e_elec = 0.0
    for t, u, yd in _power_samples(params, sol, samples, tol):
        current, voltage = force_to_current(params.motor, u, yd)
        e_mech += trapezoid(np.abs(u * yd), t)
        e_elec += trapezoid(np.abs(current * voltage), t)
    return float(e_mech), float(e_elec)


def passive_loss(params: ModelParams, apex: State, tol: IntegratorConfig = IntegratorConfig()) -> float:
    """Mechanical energy lost over one unforced hop from ``apex``."""
    traj = simulate_hybrid(params, apex, zero_policy(params.u_max), StopCondition(hops=1, t_final=10.0), tol)
    if not traj.apexes:
        raise SimulationDiverged("passive hop did not return to apex")
    end = State.from_x(traj.apexes[0][1], apex.domain)
    return float(mechanical_energy(params, apex) - mechanical_energy(params, end))


def energy_report(params: ModelParams, sol: HopSolution, samples: int = 4001,
                  tol: IntegratorConfig = IntegratorConfig()) -> EnergyReport:
    e_mech, e_elec = actuator_energy(params, sol, samples, tol)
    loss = passive_loss(params, sol.apex_state, tol)
    return EnergyReport(
        E_mech=e_mech,
        E_elec=e_elec,
        E_passive_loss=loss,
        eta_mech=loss / e_mech if e_mech > 0 else float("inf"),
        eta_elec=loss / e_elec if e_elec > 0 else float("inf"),
        F_max=sol.control.peak(),
        H_f=sol.H_f,
    )


# --------------------------------------------------------------------------
# Model comparison

TABLE_COLUMNS = (
    "H_f",
    "F_max_single",
    "eta_mech_single",
    "eta_elec_single",
    "F_max_double",
    "eta_mech_double",
    "eta_elec_double",
)

# Reference comparison values; the physical parameters behind them are not
# available, so these serve as a layout fixture and a trend reference only.
REFERENCE_TABLE = (
    # H_f, F_max_s, eta_mech_s, eta_elec_s, F_max_d, eta_mech_d, eta_elec_d
    (0.1, 95.2, 0.25, 0.17, 50.9, 0.78, 0.58),
    (0.2, 183.4, 0.26, 0.16, 98.3, 0.77, 0.55),
    (0.3, 250.1, 0.29, 0.16, 132.6, 0.76, 0.54),
    (0.4, 303.0, 0.30, 0.15, 165.2, 0.76, 0.52),
    (0.5, 348.1, 0.30, 0.15, 196.4, 0.76, 0.51),
)


def reference_reports() -> tuple[list, list]:
    """The reference table as two lists of :class:`EnergyReport`."""
    single, double = [], []
    for H, fs, ms, es, fd, md, ed in REFERENCE_TABLE:
        single.append(EnergyReport(np.nan, np.nan, np.nan, ms, es, fs, H))
        double.append(EnergyReport(np.nan, np.nan, np.nan, md, ed, fd, H))
    return single, double


@dataclass
class ComparisonRow:
    H_f: float
    single: EnergyReport
    double: EnergyReport

    @property
    def force_ratio(self) -> float:
        """Double-spring peak force over single-spring peak force."""
        return self.double.F_max / self.single.F_max

    @property
    def force_reduction(self) -> float:
        return 1.0 - self.force_ratio

    @property
    def mech_ratio(self) -> float:
        return self.double.eta_mech / self.single.eta_mech

    @property
    def elec_ratio(self) -> float:
        return self.double.eta_elec / self.single.eta_elec

    def values(self) -> tuple:
        s, d = self.single, self.double
        return (self.H_f, s.F_max, s.eta_mech, s.eta_elec, d.F_max, d.eta_mech, d.eta_elec)


@dataclass
class Comparison:
    rows: list

    def to_dict(self) -> dict:
        return {
            "columns": list(TABLE_COLUMNS),
            "rows": [
                dict(zip(TABLE_COLUMNS, map(float, r.values())),
                     force_ratio=r.force_ratio, mech_ratio=r.mech_ratio, elec_ratio=r.elec_ratio)
                for r in self.rows
            ],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TABLE_COLUMNS)
            for r in self.rows:
                w.writerow([f"{v:.6g}" for v in r.values()])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def compare_models(reports_single: list, reports_double: list, atol: float = 1e-9) -> Comparison:
    """Pair single- and double-spring reports on a shared ``H_f`` grid."""
    if not reports_single or len(reports_single) != len(reports_double):
        raise MismatchedGrids("report lists must be non-empty and of equal length")
    rows = []
    for s, d in zip(reports_single, reports_double):
        if abs(s.H_f - d.H_f) > atol:
            raise MismatchedGrids(f"H_f grids differ: {s.H_f} vs {d.H_f}")
        rows.append(ComparisonRow(s.H_f, s, d))
    return Comparison(rows)


def read_table_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TABLE_COLUMNS:
            raise ValueError(f"unexpected columns {header}")
        return [tuple(float(v) for v in row) for row in reader]
