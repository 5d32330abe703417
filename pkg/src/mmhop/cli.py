"""Command-line front end.

Usage::

    mmhop optimize  --variant double --heights 0.1,0.3,0.5 --out runs/opt
    mmhop simulate  --solution runs/opt/solution_H0.300.json --hops 20 --out runs/sim
    mmhop stability --variant single --pd 100,30 --heights 0.3 --out runs/stab
    mmhop report    --heights 0.1,0.2,0.3,0.4,0.5 --out runs/table
    mmhop fit       --log drop.csv --perturb 0.3 --seed 1 --out runs/fit

Every flag may also come from a JSON config file given with ``--config``;
flags given on the command line override the file.  Recognised keys::

    {
      "params": "robot.json",        # parameter file, see below
      "variant": "double",           # "double" | "single"
      "heights": [0.1, 0.3],         # target foot clearances H_f, m, in (0, 1]
      "hops": 20,                    # simulate: number of hops
      "pd": [100, 30],               # k_P (N/m), k_D (N s/m); omit for open loop
      "out": "runs/x",               # output directory
      "seed": 0,                     # seeds the fit-guess perturbation
      "solution": "sol.json",        # simulate/stability: optimized hop to replay
      "fd_step": 1e-6,               # stability: finite-difference step
      "log": "drop.csv",             # fit: drop-test log (t,z_b,y,delta)
      "free": ["k_s", "c_s"],        # fit: parameters to identify
      "perturb": 0.3,                # fit: relative +-perturbation of the guess
      "knots": 20,                   # optimize: knots per phase
      "workers": 1                   # optimize/report: parallel height solves
    }

Parameter files are flat JSON objects in SI units::

    {"M0": 2.7, "Mm": 1.2, "Mf": 0.1, "c_b": 0.5, "k_p": 4000.0, "c_p": 5.0,
     "k_s": 4000.0, "c_s": 5.0, "g": 9.81, "l0": 0.3, "y_max": 0.08,
     "u_max": 450.0, "motor": {"k_f": 20.0, "k_b": 20.0, "R": 4.0},
     "variant": "double"}

A double-spring file used with ``--variant single`` is turned into its
single-spring counterpart by removing the parallel spring and its damper.

Exit status: 0 on success, 2 for configuration or file errors, 3 when a
solve does not converge or a simulation fails numerically.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import HopperError, InvalidParameters, NotConverged
from .model import ModelParams, Variant, load_params, nominal_params, save_params

log = logging.getLogger("mmhop")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SIM_COLUMNS = ("t", "domain", "z_b", "y", "delta", "dz_b", "dy", "ddelta", "u", "F_ground")
CONFIG_KEYS = {"params", "variant", "heights", "hops", "pd", "out", "seed", "solution",
               "fd_step", "log", "free", "perturb", "knots", "workers"}
BUNDLED_LOG = "drop_synthetic.csv"


class ConfigError(Exception):
    """Bad flags, config file or input file; maps to exit status 2."""


@dataclass
class RunConfig:
    command: str
    params_file: str | None = None
    variant: str | None = None
    heights: list = field(default_factory=lambda: [0.3])
    hops: int = 20
    pd: tuple | None = None
    out: str = "out"
    seed: int = 0
    solution: str | None = None
    fd_step: float = 1e-6
    log: str | None = None
    free: tuple | None = None
    perturb: float = 0.0
    knots: int = 20
    workers: int = 1

    def __post_init__(self):
        if not self.heights:
            raise ConfigError("heights: at least one H_f is required")
        for h in self.heights:
            if not 0.0 < h <= 1.0:
                raise ConfigError(f"heights: H_f = {h} is outside (0, 1] m")
        if self.hops < 0:
            raise ConfigError("hops must be non-negative")
        if self.variant is not None and self.variant not in ("double", "single"):
            raise ConfigError(f"variant must be 'double' or 'single', not {self.variant!r}")
        if self.pd is not None and (len(self.pd) != 2 or min(self.pd) < 0):
            raise ConfigError("pd must be two non-negative gains kp,kd")
        if not self.fd_step > 0:
            raise ConfigError("fd_step must be positive")
        if self.knots < 3:
            raise ConfigError("knots must be at least 3")
        if not 0.0 <= self.perturb < 1.0:
            raise ConfigError("perturb must be in [0, 1)")
        for name in ("params_file", "solution", "log"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name.replace('_file', '')}: no such file {path}")


# --------------------------------------------------------------------------
# Config parsing


def _floats(text: str, what: str) -> list:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _read_config(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return data


def _normalise(key: str, value):
    if key == "heights":
        return _floats(value, key) if isinstance(value, str) else [float(v) for v in value]
    if key == "pd":
        return tuple(_floats(value, key) if isinstance(value, str) else map(float, value))
    if key == "free":
        return tuple(v for v in value.split(",") if v) if isinstance(value, str) else tuple(value)
    return value


def build_config(args: argparse.Namespace) -> RunConfig:
    merged = _read_config(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    kwargs = {}
    for key, value in merged.items():
        name = "params_file" if key == "params" else key
        try:
            kwargs[name] = _normalise(key, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    try:
        return RunConfig(args.command, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def resolve_params(cfg: RunConfig, variant: str | None = None) -> ModelParams:
    """Parameters for ``variant`` (default: the config's), from file or bundled."""
    want = variant or cfg.variant
    if cfg.params_file is None:
        return nominal_params(want or "double")
    try:
        params = load_params(cfg.params_file)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{cfg.params_file}:{exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"{cfg.params_file}: {exc.strerror}") from None
    except (InvalidParameters, TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg.params_file}: {exc}") from None
    if want is None or params.variant.value == want:
        return params
    if want == "single":
        return params.as_single_spring(c_p=0.0)
    raise ConfigError(f"{cfg.params_file}: single-spring parameters cannot drive the double-spring model")


# --------------------------------------------------------------------------
# Output helpers


def _metadata() -> dict:
    from . import __version__

    return {"created": datetime.now(timezone.utc).isoformat(timespec="seconds"), "version": __version__}


def _write_json(path: Path, payload: dict, meta: dict | None = None) -> None:
    if meta is not None:
        payload = {**payload, "metadata": meta}
    path.write_text(json.dumps(payload, indent=1, sort_keys=False) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _tag(H: float) -> str:
    return f"H{H:.3f}"


def _solution_payload(sol) -> tuple[dict, dict]:
    """Solution JSON body with run-time-dependent fields split off."""
    d = sol.to_dict()
    diag = dict(d["diagnostics"])
    meta = {"solve_time": diag.pop("solve_time", None)}
    d["diagnostics"] = diag
    return d, meta


def _solve_one(args):
    from .optimize import HopProblem, solve_hop

    params, H, knots = args
    return solve_hop(HopProblem(params, H, knots_per_phase=knots))


def _solve_all(params: ModelParams, heights, knots: int, workers: int) -> list:
    jobs = [(params, H, knots) for H in heights]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            return list(pool.map(_solve_one, jobs))
    return [_solve_one(j) for j in jobs]


def _load_or_solve(cfg: RunConfig, params: ModelParams):
    from .optimize import HopSolution

    if cfg.solution is None:
        sol = _solve_one((params, cfg.heights[0], cfg.knots))
    else:
        try:
            sol = HopSolution.load(cfg.solution)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg.solution}:{exc.lineno}: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{cfg.solution}: not a hop solution ({exc})") from None
    if not sol.converged:
        raise NotConverged(f"hop solution at H_f={sol.H_f} is not converged", sol)
    return sol


def _feedback(cfg: RunConfig):
    from .control import PDGains

    return PDGains(*cfg.pd) if cfg.pd is not None else None


# --------------------------------------------------------------------------
# Commands


def cmd_optimize(cfg: RunConfig) -> int:
    from .control import write_control_csv

    params = resolve_params(cfg)
    sols = _solve_all(params, cfg.heights, cfg.knots, cfg.workers)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for sol in sols:
        tag = _tag(sol.H_f)
        body, meta = _solution_payload(sol)
        _write_json(out / f"solution_{tag}.json", body, meta)
        write_control_csv(sol.control, out / f"control_{tag}.csv", params.motor)
        d = sol.diagnostics
        summary.append({
            "H_f": sol.H_f, "converged": sol.converged, "cost": sol.cost, "F_max": sol.control.peak(),
            "equality_residual": d["equality_residual"], "iterations": d["iterations"],
            "solver_message": d["solver_message"],
        })
    _write_json(out / "summary.json", {"variant": params.variant.value, "solves": summary}, _metadata())
    _write_csv(out / "summary.csv", ("H_f", "converged", "cost", "F_max", "equality_residual", "iterations"),
               [(s["H_f"], s["converged"], s["cost"], s["F_max"], s["equality_residual"], s["iterations"])
                for s in summary])
    failed = [s["H_f"] for s in summary if not s["converged"]]
    if failed:
        log.error("no convergence at H_f = %s", failed)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    from .integrate import StopCondition, simulate_hybrid

    params = resolve_params(cfg)
    sol = _load_or_solve(cfg, params)
    params = sol.params
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = sol.policy(_feedback(cfg))
    period = sum(sol.phase_durations)
    stop = StopCondition(hops=cfg.hops, t_final=max(1.0, 3.0 * period * (cfg.hops + 1)))
    status, error = "complete", None
    try:
        traj = simulate_hybrid(params, sol.apex_state, policy, stop, clock0=sol.apex_clock)
    except HopperError as exc:
        status, error, traj = "diverged", str(exc), None
    rows, portrait, apexes = [], [], []
    if traj is not None:
        t, doms, X, u, Fg = traj.stacked()
        rows = [(t[j], doms[j], *X[j], u[j], Fg[j]) for j in range(t.size)]
        portrait = [(t[j], X[j, 0], X[j, 3]) for j in range(t.size)]
        for k, (ta, xa) in enumerate(traj.apexes, start=1):
            clearance = xa[0] + xa[2] - params.l0
            apexes.append((k, ta, clearance, clearance / sol.H_f - 1.0))
    _write_csv(out / "timeseries.csv", SIM_COLUMNS, rows)
    _write_csv(out / "phase_portrait.csv", ("t", "z_b", "dz_b"), portrait)
    _write_csv(out / "apexes.csv", ("hop", "t", "clearance", "relative_error"), apexes)
    drift = max((abs(a[3]) for a in apexes), default=0.0)
    _write_json(out / "simulate.json", {
        "H_f": sol.H_f, "variant": params.variant.value, "hops_requested": cfg.hops, "hops_completed": len(apexes),
        "pd": list(cfg.pd) if cfg.pd else None, "status": status, "error": error, "max_relative_apex_error": drift,
    })
    if status != "complete":
        log.error("simulation diverged: %s", error)
        return EXIT_NUMERIC
    if len(apexes) < cfg.hops:
        log.error("only %d of %d hops completed", len(apexes), cfg.hops)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_stability(cfg: RunConfig) -> int:
    from .analyze import SECTION_NAMES, solution_stability

    params = resolve_params(cfg)
    sol = _load_or_solve(cfg, params)
    rep = solution_stability(sol, _feedback(cfg), cfg.fd_step)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    body = {"H_f": sol.H_f, "variant": sol.params.variant.value, "pd": list(cfg.pd) if cfg.pd else None,
            "coordinates": list(SECTION_NAMES[sol.params.variant]), **rep.to_dict()}
    _write_json(out / "stability.json", body)
    _write_csv(out / "eigenvalues.csv", ("index", "magnitude"), [(i, m) for i, m in enumerate(rep.eigenvalue_magnitudes)])
    _write_csv(out / "jacobian.csv", SECTION_NAMES[sol.params.variant], rep.jacobian)
    log.info("lambda_max = %.4f (%s)", rep.lambda_max, "stable" if rep.stable else "not stable")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    from .analyze import compare_models, energy_report

    reports = {}
    for variant in ("single", "double"):
        params = resolve_params(cfg, variant)
        sols = _solve_all(params, cfg.heights, cfg.knots, cfg.workers)
        bad = [s.H_f for s in sols if not s.converged]
        if bad:
            raise NotConverged(f"{variant}-spring solve failed at H_f = {bad}")
        reports[variant] = [energy_report(params, s) for s in sols]
    cmp = compare_models(reports["single"], reports["double"])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cmp.write_csv(out / "table.csv")
    body = cmp.to_dict()
    body["reports"] = {v: [r.to_dict() for r in rs] for v, rs in reports.items()}
    _write_json(out / "report.json", body)
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    from .calibrate import FITTABLE, DropTestLog, fit_parameters, simulate_drop

    truth = resolve_params(cfg)
    if cfg.log is None:
        with resources.as_file(resources.files("mmhop.data").joinpath(BUNDLED_LOG)) as p:
            drop = DropTestLog.from_csv(p)
    else:
        try:
            drop = DropTestLog.from_csv(cfg.log)
        except (ValueError, StopIteration) as exc:
            raise ConfigError(str(exc) or f"{cfg.log}: empty file") from None
    free = cfg.free or tuple(k for k in FITTABLE if truth.variant is Variant.DOUBLE or k != "k_p")
    bad = set(free) - set(FITTABLE)
    if bad:
        raise ConfigError(f"free: cannot fit {sorted(bad)}")
    rng = np.random.default_rng(cfg.seed)
    guess = truth.replace(**{k: getattr(truth, k) * (1 + cfg.perturb * rng.choice([-1.0, 1.0])) for k in free})
    fitted, result = fit_parameters(drop, guess, free)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    body = result.to_dict()
    body["free"] = list(free)
    body["guess"] = {k: getattr(guess, k) for k in free}
    body["fitted"] = {k: getattr(fitted, k) for k in free}
    _write_json(out / "fit.json", body)
    save_params(fitted, out / "fitted_params.json")
    sim = simulate_drop(fitted, drop.initial_height, drop.t - drop.t[0])
    names = [c for c in ("z_b", "y", "delta") if c in drop.channels]
    idx = {"z_b": 0, "y": 1, "delta": 2}
    header = ["t"] + [f"{c}_{k}" for c in names for k in ("log", "fit")]
    rows = [[t] + [v for c in names for v in (drop.channels[c][j], sim[j, idx[c]])] for j, t in enumerate(drop.t)]
    _write_csv(out / "fit_trace.csv", header, rows)
    return EXIT_OK


COMMANDS = {
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "stability": cmd_stability,
    "report": cmd_report,
    "fit": cmd_fit,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file supplying any of the flags below")
    common.add_argument("--params", help="parameter file (JSON, SI units)")
    common.add_argument("--variant", choices=("double", "single"))
    common.add_argument("--heights", help="comma-separated H_f values in metres")
    common.add_argument("--hops", type=int)
    common.add_argument("--pd", help="PD gains on the mover, 'kp,kd'")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--solution", help="optimized hop JSON (simulate, stability)")
    common.add_argument("--fd-step", dest="fd_step", type=float)
    common.add_argument("--log", help="drop-test CSV (fit)")
    common.add_argument("--free", help="comma-separated parameters to fit")
    common.add_argument("--perturb", type=float, help="relative perturbation of the fit guess")
    common.add_argument("--knots", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="mmhop", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.replace("cmd_", ""))
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"mmhop {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HopperError as exc:
        print(f"mmhop {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
