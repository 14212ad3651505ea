"""Command-line front-end: ``pdmkin {predict,simulate,fit,compare}``.

A run is described by one JSON document (``--config``), merged over the
defaults below; ``--set dotted.path=value`` overrides single fields, with
``value`` parsed as JSON when possible (``--set predict.u=[0.5,0.3]``).

Exit codes: 0 success, 2 invalid configuration, 3 solver failure,
4 simulation halted (partial output is still written), 5 fit failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dissipation import QuadratureSpec, TrackSpeeds
from .geometry import (
    TerrainKind,
    TerrainModel,
    ValidationError,
    VehicleGeometry,
    flipper_preset,
    validate,
)
from .reduction import (
    InfeasibleFitError,
    SingularReductionError,
    default_input_grid,
    extract_kinematic_map,
    fit_sos,
    sample_pdm,
)
from .solver import NotConvergedError, SolverOptions, predict
from .simulator import (
    BaselineModel,
    Trajectory,
    UnreachableVelocityError,
    baseline_map,
    initial_pose,
    invert_full_model,
    invert_velocity,
    simulate,
    turning_radius,
)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_HALTED, EXIT_FIT = 0, 2, 3, 4, 5
CSV_COLUMNS = (
    "t", "x", "y", "theta", "xdot", "ydot", "thetadot", "contacts_left", "contacts_right",
)
COMPARE_COLUMNS = (
    "model", "coeff", "S_r", "S_l", "xdot_cmd", "thetadot_cmd",
    "xdot", "ydot", "thetadot", "radius",
)

DEFAULTS = {
    "geometry": {"preset": "flipper"},
    "terrain": {"kind": "flat_smooth"},
    "quadrature": {"nodes_x": 41, "nodes_y": 9, "nodes_line": 21},
    "solver": {"gtol": 1e-8, "max_iter": 10_000, "n_starts": 5, "seed": 0, "eps": 1e-6},
    "predict": {"u": [0.5, 0.5]},
    "simulate": {
        "u": [0.32, 0.38],
        "schedule": None,
        "t_end": 3.0,
        "dt_max": 0.01,
        "pose0": {"x": 0.0, "y": 0.0, "theta": 0.0},
    },
    "fit": {"lo": -0.5, "hi": 0.5, "step": 0.1},
    "compare": {"xdot": 0.5, "thetadot": -0.5, "terrain": {"kind": "flat_grousers"}},
    "output": {"dir": None},
}


class ConfigError(ValidationError):
    pass


def fmt(value) -> str:
    """9 significant digits, no negative zero."""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    text = format(value, ".9g")
    return "0" if text in ("-0", "0") else text


def _round9(value):
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return float(fmt(value))
    if isinstance(value, dict):
        return {k: _round9(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round9(v) for v in value]
    return value


def _dump_json(obj) -> str:
    return json.dumps(_round9(obj), indent=2, sort_keys=True) + "\n"


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    """Set ``a.b.c=value`` in a copy of ``config``."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form path=value")
    path, text = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {assignment!r} has an empty path")
    out = copy.deepcopy(config)
    node = out
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = _parse_value(text)
    return out


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path:
        try:
            document = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(document, dict):
            raise ConfigError("config must be a JSON object")
        config = _merge(config, document)
    for assignment in overrides:
        config = apply_override(config, assignment)
    return config


def build_geometry(section: dict) -> VehicleGeometry:
    section = dict(section)
    preset = section.pop("preset", None)
    names = {f.name for f in fields(VehicleGeometry)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown geometry fields: {', '.join(sorted(unknown))}")
    if preset == "flipper":
        base = flipper_preset()
        return VehicleGeometry(**{**{n: getattr(base, n) for n in names}, **section})
    if preset is not None:
        raise ConfigError(f"unknown geometry preset {preset!r}")
    missing = names - set(section) - {"mass", "com_x"}
    if missing:
        raise ConfigError(f"missing geometry fields: {', '.join(sorted(missing))}")
    return VehicleGeometry(**section)


def build_terrain(section: dict) -> TerrainModel:
    section = dict(section)
    try:
        kind = TerrainKind(section.pop("kind"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid terrain kind: {exc}") from exc
    if kind is TerrainKind.STAIRS:
        defaults = TerrainModel.stairs()
        section.setdefault("stair_spacing", defaults.stair_spacing)
        section.setdefault("slope", defaults.slope)
        section.setdefault("stair_count", defaults.stair_count)
    names = {f.name for f in fields(TerrainModel)} - {"kind"}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown terrain fields: {', '.join(sorted(unknown))}")
    return TerrainModel(kind, **section)


def build_numerics(config: dict) -> tuple[QuadratureSpec, SolverOptions]:
    q, s = config["quadrature"], config["solver"]
    try:
        quad = QuadratureSpec(
            nodes_x=int(q["nodes_x"]), nodes_y=int(q["nodes_y"]),
            nodes_line=int(q["nodes_line"]), smoothing_eps=float(s["eps"]),
        )
        options = SolverOptions(
            gtol=float(s["gtol"]), max_iter=int(s["max_iter"]),
            n_starts=int(s["n_starts"]), seed=int(s["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid numerics: {exc}") from exc
    if min(quad.nodes_x, quad.nodes_y, quad.nodes_line) < 1 or not quad.smoothing_eps > 0:
        raise ConfigError("quadrature node counts and solver.eps must be positive")
    return quad, options


def _setup(config: dict, terrain_section: dict | None = None):
    geom = build_geometry(config["geometry"])
    terrain = build_terrain(terrain_section or config["terrain"])
    validate(geom, terrain)
    return geom, terrain, *build_numerics(config)


def _speeds(value, name: str) -> TrackSpeeds:
    try:
        sr, sl = (float(x) for x in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a pair of track speeds") from exc
    if not all(math.isfinite(x) for x in (sr, sl)):
        raise ConfigError(f"{name} must be finite")
    return TrackSpeeds(sr, sl)


def _write(out_dir: str | None, name: str, text: str) -> None:
    if out_dir is None:
        return
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / name, "w", newline="\n") as fh:
        fh.write(text)


def cmd_predict(config: dict, out=None) -> int:
    out = out or sys.stdout
    geom, terrain, quad, options = _setup(config)
    u = _speeds(config["predict"]["u"], "predict.u")
    res = predict(u, geom, terrain, quad, options=options)
    v = res.v_star
    print(
        f"xdot={v.xdot:.6f} ydot={v.ydot:.6f} thetadot={v.thetadot:.6f} "
        f"objective={fmt(res.objective)} converged={str(res.converged).lower()}".replace(
            "-0.000000", "0.000000"
        ),
        file=out,
    )
    _write(
        config["output"]["dir"],
        "predict.json",
        _dump_json(
            {
                "u": list(u),
                "v_star": list(v),
                "objective": res.objective,
                "converged": res.converged,
                "gradient_norm": res.gradient_norm,
            }
        ),
    )
    if not res.converged:
        print(f"error: not converged (gradient norm {res.gradient_norm:.3g})", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def trajectory_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for s in traj.samples:
        p, v = s.pose, s.v
        writer.writerow(
            [fmt(x) for x in (s.t, p.x, p.y, p.theta, v.xdot, v.ydot, v.thetadot)]
            + [str(s.contact_count[0]), str(s.contact_count[1])]
        )
    return buf.getvalue()


def read_trajectory_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        {k: (int(v) if k.startswith("contacts") else float(v)) for k, v in row.items()}
        for row in rows
    ]


def events_json(traj: Trajectory) -> str:
    return _dump_json(
        [{"t": e.t, "side": e.side.value, "kind": e.kind.value} for e in traj.events]
    )


def summary_json(traj: Trajectory, terrain: TerrainModel) -> str:
    final = traj.samples[-1] if traj.samples else None
    summary = {
        "termination": traj.termination.value,
        "halt_reason": traj.halt_reason,
        "n_samples": len(traj.samples),
        "n_events": len(traj.events),
        "turned_90": traj.turned,
        "climbed": traj.termination.value == "climbed",
        "final": None
        if final is None
        else {"t": final.t, "x": final.pose.x, "y": final.pose.y, "theta": final.pose.theta},
    }
    if terrain.is_stairs:
        summary["staircase_length"] = terrain.staircase_length
    return _dump_json(summary)


def _schedule_from(section: dict):
    if section.get("schedule"):
        try:
            return [(float(t0), _speeds(u, "simulate.schedule")) for t0, u in section["schedule"]]
        except (TypeError, ValueError) as exc:
            raise ConfigError("simulate.schedule must be a list of [t_start, [S_r, S_l]]") from exc
    return _speeds(section["u"], "simulate.u")


def cmd_simulate(config: dict, out=None) -> int:
    out = out or sys.stdout
    geom, terrain, quad, options = _setup(config)
    section = config["simulate"]
    schedule = _schedule_from(section)
    try:
        t_end, dt_max = float(section["t_end"]), float(section["dt_max"])
        p0 = section["pose0"]
        pose0 = initial_pose(
            geom, terrain, float(p0.get("x", 0.0)), float(p0.get("y", 0.0)),
            float(p0.get("theta", 0.0)),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid simulate section: {exc}") from exc
    if not (t_end > 0 and dt_max > 0):
        raise ConfigError("simulate.t_end and simulate.dt_max must be positive")
    traj = simulate(pose0, schedule, t_end, geom, terrain, dt_max, quad, options)
    out_dir = config["output"]["dir"]
    _write(out_dir, "trajectory.csv", trajectory_csv(traj))
    _write(out_dir, "events.json", events_json(traj))
    summary = summary_json(traj, terrain)
    _write(out_dir, "summary.json", summary)
    out.write(summary)
    if traj.termination.value == "halted":
        print(f"error: simulation halted: {traj.halt_reason}", file=sys.stderr)
        return EXIT_HALTED
    return EXIT_OK


def cmd_fit(config: dict, out=None) -> int:
    out = out or sys.stdout
    geom, terrain, quad, options = _setup(config)
    if terrain.is_stairs:
        raise ConfigError("fit needs a flat terrain (flat_smooth or flat_grousers)")
    g = config["fit"]
    grid = default_input_grid(float(g["lo"]), float(g["hi"]), float(g["step"]))
    samples = sample_pdm(geom, terrain, grid, quad, options)
    model = fit_sos(samples, 1)
    kin = extract_kinematic_map(model)
    out_dir = config["output"]["dir"]
    _write(
        out_dir,
        "sos_model.json",
        _dump_json(
            {
                "order_k": model.order_k,
                "basis": model.basis,
                "A": model.coeff_A.tolist(),
                "min_eigenvalue": model.min_eigenvalue,
                "stationarity_residual": model.stationarity_residual,
                "rms_error": model.rms_error,
                "n_samples": model.n_samples,
            }
        ),
    )
    _write(
        out_dir,
        "kinematic_map.json",
        _dump_json({"K": kin.K.tolist(), "offset": kin.offset.tolist()}),
    )
    for name, row in zip(("xdot", "ydot", "thetadot"), kin.K):
        print(f"{name}: {fmt(row[0])} {fmt(row[1])}", file=out)
    return EXIT_OK


def compare_rows(config: dict) -> list[list]:
    section = config["compare"]
    geom, terrain, quad, options = _setup(config, section.get("terrain"))
    if terrain.is_stairs:
        raise ConfigError("compare needs a flat terrain")
    desired = (float(section["xdot"]), 0.0, float(section["thetadot"]))
    rows = []
    plans = [(m.value, m.default_coeff, invert_velocity(desired, m)) for m in BaselineModel]
    plans.append(("PDM-full", None, invert_full_model(desired, geom, terrain, quad, options)))
    for name, coeff, u in plans:
        res = predict(u, geom, terrain, quad, options=options)
        v = res.v_star
        rows.append(
            [name, "" if coeff is None else fmt(coeff), *map(fmt, u),
             fmt(desired[0]), fmt(desired[2]), *map(fmt, v), fmt(turning_radius(v))]
        )
    return rows


def cmd_compare(config: dict, out=None) -> int:
    out = out or sys.stdout
    rows = compare_rows(config)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARE_COLUMNS)
    writer.writerows(rows)
    _write(config["output"]["dir"], "comparison.csv", buf.getvalue())
    out.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdmkin",
        description="Dissipation-based velocity prediction for tracked vehicles.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
        help="override one config field, e.g. solver.eps=1e-7 (repeatable)",
    )
    parser.add_argument("--out", help="output directory (same as --set output.dir=...)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        if args.out:
            config = apply_override(config, f"output.dir={json.dumps(args.out)}")
        return COMMANDS[args.command](config)
    except (ValidationError, TypeError, KeyError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NotConvergedError, UnreachableVelocityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InfeasibleFitError, SingularReductionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
