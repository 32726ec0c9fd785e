"""Config-driven batch front end.

Commands read a JSON config file, apply dotted key=value overrides and
flags (flag > SWBIN_THREADS env > config > default), run one computation,
and emit a JSON or CSV report. Exit codes: 0 success (possibly with
warnings), 1 internal or IO failure, 2 config problem.

Config schema (all sections optional unless a command needs them):

  command   one of exponent | zeta | bounds | threshold | tradeoff |
            simulate | demo-pathological | validate (the positional
            argument wins over this key)
  source    {"kind": "dsbs", "p": 0.2} | {"kind": "sign_magnitude"} |
            {"kind": "uniform", "sizes": [2, 2]} |
            {"kind": "table", "axes": [[..], [..]], "probs": [[..], ..]}
  rbc_x, rbc_y
            binning channel spec: {"family": "fixed_rate", "rate": 0.8}
            or family star/vrsw/general_table with conditional / marginal /
            constant_cost / cost_table; source_alphabet and bin_alphabet
            default to the matching source axis
  dist      {"table": [[..], ..], "level": 0.1} distortion matrix and budget
  q_ux      joint bin/source matrix for the zeta command
  r_tilde, r_tilde_x, r_tilde_y, ecl_level, ecl_levels, regime
            scalar knobs for bounds, threshold, tradeoff
  menu      list of [rbc_x, rbc_y] pairs for the tradeoff command
  sim       {"n": .., "trials": .., "seed": .., "decoder": ..,
             "r_tilde_x": .., "r_tilde_y": .., "drop_stream": ..,
             "fresh_code_per_trial": .., "n_max": .., "table_budget": ..,
             "threads": ..}
  budget    {"grid_resolution": .., "restarts": .., "refine_iters": ..,
             "tol": .., "multiplier_cap": .., "seed": ..}
  output    file path or "-" for stdout
  format    json | csv

CSV columns by command:
  exponent   branch,value,active_branch,certified_gap
  zeta       primal,dual,gap
  bounds     ecl_level,e_hat,e_tilde,combined
  threshold  regime,threshold_rate
  tradeoff   level,feasible,e_err,member_index,member_ecl
  simulate / demo-pathological: the simulator's report rows
  validate   family,residual
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import json
import math
import os
import subprocess
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .exponents import (
    error_exponent_general,
    error_exponent_star,
    result_to_jsonable,
    tradeoff_curve,
)
from .optimize import OptimizerBudget
from .probability import (
    Alphabet,
    JointPmf,
    doubly_symmetric_binary,
    sign_magnitude_source,
)
from .rbc import DistortionSpec, RbcSpec, validate_rbc
from .simulator import SimConfig, SimReport, run_trials
from .zeta import (
    RobustQuery,
    combined_error_exponent,
    threshold_rate,
    zeta_dual,
    zeta_primal,
)

__all__ = ["main", "parse_config", "run_command", "emit_report", "ConfigError"]

SCHEMA_VERSION = 1
COMMANDS = ("exponent", "zeta", "bounds", "threshold", "tradeoff",
            "simulate", "demo-pathological", "validate")


class ConfigError(Exception):
    """Schema or value problem in the effective configuration."""


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

_RBC_KEYS = {
    "family": None, "source_alphabet": None, "bin_alphabet": None,
    "rate": None, "marginal": None, "conditional": None,
    "marginal_table": "any", "conditional_table": "any",
    "constant_cost": None, "cost_table": "any",
}
_SCHEMA = {
    "command": None,
    "source": {"kind": None, "p": None, "axes": None, "probs": None,
               "sizes": None},
    "rbc_x": _RBC_KEYS,
    "rbc_y": _RBC_KEYS,
    "dist": {"source_alphabet": None, "bin_alphabet": None, "table": None,
             "level": None},
    "q_ux": None,
    "r_tilde": None, "r_tilde_x": None, "r_tilde_y": None,
    "ecl_level": None, "ecl_levels": None, "regime": None,
    "menu": "menu",
    "sim": {"n": None, "trials": None, "seed": None, "decoder": None,
            "r_tilde_x": None, "r_tilde_y": None, "drop_stream": None,
            "fresh_code_per_trial": None, "n_max": None,
            "table_budget": None, "threads": None},
    "budget": {"grid_resolution": None, "restarts": None,
               "refine_iters": None, "tol": None, "multiplier_cap": None,
               "seed": None},
    "output": None,
    "format": None,
}


def _check_keys(node, schema, path):
    if not isinstance(node, dict):
        return
    for key, value in node.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            allowed = ", ".join(sorted(schema))
            raise ConfigError(
                f"unknown config key {here!r}"
                f" (inside {path or 'the top level'!r}; allowed: {allowed})")
        sub = schema[key]
        if sub == "menu":
            if not isinstance(value, list):
                raise ConfigError(f"{here!r} must be a list of spec pairs")
            for i, pair in enumerate(value):
                if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                    raise ConfigError(f"{here}[{i}] must be a [rbc_x, rbc_y] pair")
                for j, spec in enumerate(pair):
                    _check_keys(spec, _RBC_KEYS, f"{here}[{i}][{j}]")
        elif isinstance(sub, dict):
            _check_keys(value, sub, here)


def _set_dotted(config: dict, dotted: str, raw: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {part!r} is not a section")
    node[parts[-1]] = value


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    config: dict            # effective merged config, echoed into reports
    output: str = "-"
    fmt: str = "json"
    p_xy: JointPmf | None = None
    spec_x: RbcSpec | None = None
    spec_y: RbcSpec | None = None
    dist: DistortionSpec | None = None
    budget: OptimizerBudget = field(default_factory=OptimizerBudget)
    sim: SimConfig | None = None
    menu: list = field(default_factory=list)
    q_ux: np.ndarray | None = None


def _build_source(section) -> JointPmf:
    kind = section.get("kind", "table")
    if kind == "dsbs":
        return doubly_symmetric_binary(float(section["p"]))
    if kind == "sign_magnitude":
        return sign_magnitude_source()
    if kind == "uniform":
        nx, ny = map(int, section["sizes"])
        axes = (Alphabet(tuple(range(nx))), Alphabet(tuple(range(ny))))
        return JointPmf(axes, np.full((nx, ny), 1.0 / (nx * ny)))
    if kind == "table":
        axes = tuple(Alphabet(tuple(a)) for a in section["axes"])
        return JointPmf(axes, np.asarray(section["probs"], dtype=float))
    raise ConfigError(f"unknown source kind {kind!r}")


def _build_spec(section: dict, axis: Alphabet | None, where: str) -> RbcSpec:
    data = dict(section)
    for key in ("source_alphabet", "bin_alphabet"):
        if key not in data:
            if axis is None:
                raise ConfigError(f"{where}.{key} is required without a source")
            data[key] = list(axis.symbols)
    try:
        return RbcSpec.from_jsonable(data)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def _build_dist(section: dict, p_xy: JointPmf | None) -> DistortionSpec:
    table = np.asarray(section["table"], dtype=float)
    if "source_alphabet" in section:
        src = Alphabet(tuple(section["source_alphabet"]))
    elif p_xy is not None:
        src = p_xy.axes[0]
    else:
        raise ConfigError("dist.source_alphabet is required without a source")
    if "bin_alphabet" in section:
        bins = Alphabet(tuple(section["bin_alphabet"]))
    else:
        bins = Alphabet(tuple(range(table.shape[1])))
    return DistortionSpec(src, bins, table, float(section.get("level", 0.0)))


def _build_budget(section: dict) -> OptimizerBudget:
    try:
        return OptimizerBudget(**{k: v for k, v in section.items()})
    except TypeError as exc:
        raise ConfigError(f"invalid budget: {exc}") from exc


def _need(config: dict, key: str, command: str):
    if key not in config:
        raise ConfigError(f"the {command} command needs config key {key!r}")
    return config[key]


def parse_config(argv_ns: argparse.Namespace) -> RunConfig:
    """Merge config file, dotted overrides, env, and flags into a RunConfig.

    Raises ConfigError on unknown keys (with their dotted location), missing
    command-specific fields, or invalid values.
    """
    config: dict = {}
    if argv_ns.config:
        try:
            with open(argv_ns.config) as fh:
                config = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise ConfigError("the config file must hold a JSON object")
    for item in argv_ns.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        _set_dotted(config, *item.split("=", 1))

    env_threads = os.environ.get("SWBIN_THREADS")
    if env_threads is not None:
        config.setdefault("sim", {})["threads"] = int(env_threads)
    for flag, dotted in (("seed", "sim.seed"), ("seed", "budget.seed"),
                         ("threads", "sim.threads"), ("n", "sim.n"),
                         ("trials", "sim.trials"),
                         ("budget_resolution", "budget.grid_resolution")):
        value = getattr(argv_ns, flag)
        if value is not None:
            _set_dotted(config, dotted, str(value))
    if argv_ns.output is not None:
        config["output"] = argv_ns.output
    if argv_ns.format is not None:
        config["format"] = argv_ns.format

    _check_keys(config, _SCHEMA, "")
    command = argv_ns.command or config.get("command")
    if command is None:
        raise ConfigError("no command given (positional argument or config key)")
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    config["command"] = command

    fmt = config.get("format", "json")
    if fmt not in ("json", "csv"):
        raise ConfigError(f"unknown format {fmt!r}")
    rc = RunConfig(command, config, output=config.get("output", "-"), fmt=fmt)
    try:
        _resolve_objects(rc)
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return rc


def _resolve_objects(rc: RunConfig):
    config, command = rc.config, rc.command
    if "budget" in config:
        rc.budget = _build_budget(config["budget"])
    if "source" in config:
        rc.p_xy = _build_source(config["source"])
    if command == "demo-pathological":
        rc.p_xy = sign_magnitude_source()
    elif command != "validate":
        if rc.p_xy is None:
            raise ConfigError(f"the {command} command needs config key 'source'")

    ax = rc.p_xy.axes if rc.p_xy is not None else (None, None)
    if "rbc_x" in config:
        rc.spec_x = _build_spec(config["rbc_x"], ax[0], "rbc_x")
    if "rbc_y" in config:
        rc.spec_y = _build_spec(config["rbc_y"], ax[1], "rbc_y")
    if "dist" in config:
        rc.dist = _build_dist(config["dist"], rc.p_xy)
    if "q_ux" in config:
        rc.q_ux = np.asarray(config["q_ux"], dtype=float)
    if "menu" in config:
        rc.menu = [(_build_spec(pair[0], ax[0], f"menu[{i}][0]"),
                    _build_spec(pair[1], ax[1], f"menu[{i}][1]"))
                   for i, pair in enumerate(config["menu"])]

    if command in ("exponent", "simulate"):
        if rc.spec_x is None or rc.spec_y is None:
            raise ConfigError(f"the {command} command needs rbc_x and rbc_y")
    if command == "zeta" and rc.q_ux is None:
        raise ConfigError("the zeta command needs config key 'q_ux'")
    if command in ("bounds", "threshold") and rc.dist is None:
        raise ConfigError(f"the {command} command needs config key 'dist'")
    if command == "tradeoff" and not rc.menu:
        raise ConfigError("the tradeoff command needs a non-empty 'menu'")
    if command == "validate" and rc.spec_x is None:
        raise ConfigError("the validate command needs config key 'rbc_x'")

    if command in ("simulate", "demo-pathological"):
        sim = dict(config.get("sim", {}))
        if command == "demo-pathological":
            sim.setdefault("n", 12)
            sim.setdefault("trials", 10000)
            sim.setdefault("n_max", 16)
            sim.setdefault("decoder", "map")
            sm = rc.p_xy
            rc.spec_x = RbcSpec(sm.axes[0], Alphabet((0, 1)), "star",
                                conditional_map=np.array([[1.0, 0.0], [1.0, 0.0],
                                                          [0.0, 1.0], [0.0, 1.0]]))
            rc.spec_y = RbcSpec(sm.axes[1], sm.axes[1], "star",
                                conditional_map=np.eye(2))
        for key in ("n", "trials"):
            if key not in sim:
                raise ConfigError(f"the {command} command needs config key 'sim.{key}'")
        sim.setdefault("seed", 0)
        if sim.get("drop_stream", "none") != "none" and rc.dist is None:
            raise ConfigError("sim.drop_stream needs a 'dist' section")
        rc.sim = SimConfig(rc.p_xy, rc.spec_x, rc.spec_y,
                           int(sim.pop("n")), int(sim.pop("trials")),
                           int(sim.pop("seed")), dist=rc.dist, **sim)


# ---------------------------------------------------------------------------
# command execution
# ---------------------------------------------------------------------------

def _levels_from(config: dict, command: str) -> list:
    if "ecl_levels" in config:
        return [float(v) for v in config["ecl_levels"]]
    if "ecl_level" in config:
        return [float(config["ecl_level"])]
    raise ConfigError(f"the {command} command needs 'ecl_level' or 'ecl_levels'")


def _cmd_exponent(rc: RunConfig, warnings: list):
    out = error_exponent_general(rc.p_xy, rc.spec_x, rc.spec_y, rc.budget)
    return {name: result_to_jsonable(res) for name, res in out.items()}


def _cmd_zeta(rc: RunConfig, warnings: list):
    primal = zeta_primal(rc.q_ux, rc.p_xy, rc.budget)
    dual = zeta_dual(rc.q_ux, rc.p_xy, rc.budget)
    return {"primal": primal, "dual": dual, "gap": abs(primal - dual)}


def _cmd_bounds(rc: RunConfig, warnings: list):
    r_tilde = float(rc.config.get("r_tilde", 0.0))
    rows = []
    for level in _levels_from(rc.config, "bounds"):
        report: dict = {}
        query = RobustQuery(rc.p_xy, rc.dist, r_tilde, level, rc.budget)
        combined = combined_error_exponent(query, report)
        sub = report.get("e_hat_report", {})
        if sub.get("cap_hit") or sub.get("theta_cap_hit"):
            warnings.append(f"bounds: optimizer multiplier cap reached at "
                            f"ecl_level {level}")
        rows.append({"ecl_level": level, "combined": combined,
                     "e_hat": report.get("e_hat"),
                     "e_tilde": report.get("e_tilde")})
    return {"r_tilde": r_tilde, "levels": rows}


def _cmd_threshold(rc: RunConfig, warnings: list):
    regime = rc.config.get("regime", "ecl_zero")
    report: dict = {}
    value = threshold_rate(rc.p_xy, rc.dist, regime, rc.budget, report)
    if report.get("cap_hit"):
        warnings.append("threshold: optimizer multiplier cap reached")
    return {"regime": regime, "threshold_rate": value}


def _cmd_tradeoff(rc: RunConfig, warnings: list):
    points = tradeoff_curve(rc.p_xy, rc.menu,
                            float(rc.config.get("r_tilde_x", 0.0)),
                            float(rc.config.get("r_tilde_y", 0.0)),
                            _levels_from(rc.config, "tradeoff"), rc.budget)
    return {"points": result_to_jsonable(points)}


def _cmd_simulate(rc: RunConfig, warnings: list):
    return run_trials(rc.sim).to_jsonable()


def _cmd_demo(rc: RunConfig, warnings: list):
    exps = error_exponent_star(
        rc.p_xy, np.asarray(rc.spec_x.conditional_map, dtype=float),
        np.asarray(rc.spec_y.conditional_map, dtype=float), rc.budget)
    for branch in ("E1", "E2", "E3"):
        res = exps[branch]
        if math.isfinite(res.value) or not res.diagnostics.get("empty_confusion"):
            raise RuntimeError(
                f"demo-pathological expected an empty confusion set on {branch}")
    report = run_trials(rc.sim)
    if report.err_total != 0:
        raise RuntimeError(
            f"demo-pathological expected zero errors, got {report.err_total}")
    return {"exponents": {k: result_to_jsonable(v) for k, v in exps.items()},
            "simulation": report.to_jsonable()}


def _cmd_validate(rc: RunConfig, warnings: list):
    resolution = rc.budget.grid_resolution or 24
    residual = validate_rbc(rc.spec_x, resolution=resolution,
                            restarts=rc.budget.restarts, seed=rc.budget.seed)
    return {"family": rc.spec_x.family, "residual": residual}


_DISPATCH = {
    "exponent": _cmd_exponent,
    "zeta": _cmd_zeta,
    "bounds": _cmd_bounds,
    "threshold": _cmd_threshold,
    "tradeoff": _cmd_tradeoff,
    "simulate": _cmd_simulate,
    "demo-pathological": _cmd_demo,
    "validate": _cmd_validate,
}


def _build_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=10)
        if described.returncode == 0:
            return f"swbin {__version__} ({described.stdout.strip()})"
    except OSError:
        pass
    return f"swbin {__version__}"


def run_command(rc: RunConfig) -> dict:
    """Execute one command and wrap its results into the report envelope."""
    warnings: list = []
    results = _DISPATCH[rc.command](rc, warnings)
    return {
        "schema_version": SCHEMA_VERSION,
        "command": rc.command,
        "config": rc.config,
        "build": _build_string(),
        "created_utc": datetime.datetime.now(datetime.timezone.utc)
            .isoformat(timespec="seconds"),
        "warnings": warnings,
        "results": results,
    }


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else "-inf"
    return str(value)


def _csv_payload(command: str, results) -> tuple:
    if command == "exponent":
        header = ["branch", "value", "active_branch", "certified_gap"]
        rows = [[name, res["value"], res["active_branch"], res["certified_gap"]]
                for name, res in results.items()]
        return header, rows
    if command == "zeta":
        return ["primal", "dual", "gap"], \
            [[results["primal"], results["dual"], results["gap"]]]
    if command == "bounds":
        header = ["ecl_level", "e_hat", "e_tilde", "combined"]
        return header, [[r["ecl_level"], r["e_hat"], r["e_tilde"], r["combined"]]
                        for r in results["levels"]]
    if command == "threshold":
        return ["regime", "threshold_rate"], \
            [[results["regime"], results["threshold_rate"]]]
    if command == "tradeoff":
        header = ["level", "feasible", "e_err", "member_index", "member_ecl"]
        return header, [[p["level"], p["feasible"], p["e_err"],
                         p["member_index"], p["member_ecl"]]
                        for p in results["points"]]
    if command in ("simulate", "demo-pathological"):
        sim = results if command == "simulate" else results["simulation"]
        header = SimReport.csv_header()
        rows = [[sim["n"], sim["trials"], d["name"], d["err_total"],
                 d["err_x_only"], d["err_y_only"], d["err_both"], d["p_err"],
                 d["wilson_ci"][0], d["wilson_ci"][1], d["empirical_exponent"],
                 sim["ecl_count"], sim["mean_distortion"]]
                for d in sim["decoders"]]
        if not rows:
            rows = [[sim["n"], sim["trials"], "none"] + [""] * 8
                    + [sim["ecl_count"], sim["mean_distortion"]]]
        return header, rows
    return ["family", "residual"], [[results["family"], results["residual"]]]


def emit_report(payload: dict, fmt: str, path: str):
    """Write the report as JSON (sorted keys) or CSV; path "-" is stdout."""
    if fmt == "json":
        text = json.dumps(payload, sort_keys=True, indent=2,
                          default=_json_default) + "\n"
    else:
        header, rows = _csv_payload(payload["command"], payload["results"])
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])
        text = buf.getvalue()
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else "-inf"
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swbin",
        description="Random-binning exponents, robustness bounds, and Monte "
                    "Carlo simulation over JSON configs.",
        epilog=__doc__.split("Config schema", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", nargs="?", choices=COMMANDS,
                        help="what to run (may also come from the config file)")
    parser.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted config overrides, e.g. sim.trials=500")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--output", help='report path, "-" for stdout')
    parser.add_argument("--format", choices=("json", "csv"))
    parser.add_argument("--seed", type=int, help="RNG seed (simulation and optimizers)")
    parser.add_argument("--threads", type=int,
                        help="simulation thread cap (else env SWBIN_THREADS)")
    parser.add_argument("--n", type=int, help="simulation block length")
    parser.add_argument("--trials", type=int, help="simulation trial count")
    parser.add_argument("--budget-resolution", type=int, dest="budget_resolution",
                        help="optimizer grid resolution")
    return parser


def main(argv=None) -> int:
    try:
        # intermixed parsing lets key=value overrides appear around flags
        ns = _parser().parse_intermixed_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags already
        return int(exc.code or 0)
    try:
        rc = parse_config(ns)
    except ConfigError as exc:
        print(f"swbin: config error: {exc}", file=sys.stderr)
        return 2
    try:
        payload = run_command(rc)
        emit_report(payload, rc.fmt, rc.output)
    except Exception as exc:  # noqa: BLE001 - batch tool, report and exit 1
        print(f"swbin: error: {exc}", file=sys.stderr)
        return 1
    for warning in payload["warnings"]:
        print(f"swbin: warning: {warning}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
