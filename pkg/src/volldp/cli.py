"""Configuration-driven command line binding the library into experiments.

Commands read one JSON config, validated against a strict schema (unknown
keys are rejected), run the requested computation, and write artifacts named
``<command>-<timestamp>-<seed>.*`` into the output directory.  Artifact
content never contains the timestamp, so re-running with the same config and
seed reproduces every CSV and JSON byte for byte.

Exit codes: 0 success, 2 config error, 3 optimizer non-convergence,
4 insufficient Monte-Carlo hits.
"""

from __future__ import annotations

import argparse
import datetime
import json
import math
import os
import sys

import jsonschema
import numpy as np

from . import report
from .kernels import Grid, KernelError, covariance_matrix, modulus_estimate
from .mc import InsufficientHitsError, ldp_slope
from .model import (
    ModelError,
    ModelSpec,
    SpeedSchedule,
    model_from_dict,
    validate_assumptions,
)
from .rate import (
    PathHypothesis,
    RateConfig,
    RateError,
    crossing_rate,
    pathwise_rate,
    rate_result_to_dict,
    terminal_rate,
)
from .simulate import (
    SimulationError,
    build_volterra_matrix,
    bundle_from_noise,
    iter_noise_blocks,
    simulate_log_price,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGE = 3
EXIT_NO_HITS = 4

OUTPUT_ENV = "VOLLDP_OUTPUT_DIR"

COMMANDS = (
    "check-kernel",
    "simulate",
    "rate-path",
    "rate-terminal",
    "crossing",
    "verify-ldp",
    "validate-model",
)


class ConfigError(Exception):
    """Configuration problem; the message names the offending key."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}

_COEFF = {
    "type": "object",
    "properties": {
        "kind": {
            "enum": ["constant", "affine_floor", "exponential", "power_growth", "sigmoid"]
        },
        "c": _NUM,
        "a": _NUM,
        "b": _NUM,
        "floor": _NUM,
        "lam": _NUM,
        "beta": _NUM,
        "lo": _NUM,
        "hi": _NUM,
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_KERNEL = {
    "type": "object",
    "properties": {
        "family": {"enum": ["bm", "fbm", "rl", "fou", "ibm", "conditioned"]},
        "H": _NUM,
        "a": _NUM,
        "T": _POS,
        "T_past": _NUM,
        "base": {"$ref": "#/$defs/kernel"},
    },
    "required": ["family"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$defs": {"kernel": _KERNEL, "coeff": _COEFF},
    "type": "object",
    "properties": {
        "model": {
            "type": "object",
            "properties": {
                "sigma": {"$ref": "#/$defs/coeff"},
                "mu": {"$ref": "#/$defs/coeff"},
                "rho": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
                "kernel": {"$ref": "#/$defs/kernel"},
                "x0": _NUM,
                "T": _POS,
            },
            "required": ["sigma", "mu", "rho", "kernel"],
            "additionalProperties": False,
        },
        "grid": {
            "type": "object",
            "properties": {"N": _POS_INT},
            "required": ["N"],
            "additionalProperties": False,
        },
        "simulate": {
            "type": "object",
            "properties": {
                "epsilon": _POS,
                "n_paths": _POS_INT,
                "dump_paths": {"type": "integer", "minimum": 0},
            },
            "required": ["epsilon", "n_paths"],
            "additionalProperties": False,
        },
        "rate": {
            "type": "object",
            "properties": {
                "objective": {"enum": ["pathwise", "terminal", "crossing"]},
                "target": {},
                "multistarts": _POS_INT,
                "grad_tol": _POS,
                "max_iter": _POS_INT,
                "start_energies": {"type": "array", "items": _POS, "minItems": 1},
            },
            "required": ["objective", "target"],
            "additionalProperties": False,
        },
        "verify": {
            "type": "object",
            "properties": {
                "schedule": {"type": "array", "items": _POS, "minItems": 4},
                "event": {"enum": ["terminal", "crossing"]},
                "target": _NUM,
                "n_paths": _POS_INT,
                "use_is": {"type": "boolean"},
            },
            "required": ["schedule", "event", "target", "n_paths"],
            "additionalProperties": False,
        },
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
    },
    "required": ["model", "grid"],
    "additionalProperties": False,
}

CONFIG_KEYS_HELP = """\
config keys (JSON object; unknown keys are rejected):
  model.sigma / model.mu   coefficient: {"kind": "constant", "c": ...} |
                           {"kind": "affine_floor", "a","b","floor"} |
                           {"kind": "exponential", "c","lam"} |
                           {"kind": "power_growth", "c","beta"} |
                           {"kind": "sigmoid", "lo","hi"}
  model.rho                leverage correlation in (-1, 1)
  model.kernel             {"family": "bm"|"fbm"|"rl"|"fou"|"ibm"|"conditioned",
                            "H": ..., "a": ..., "T": ...,
                            "base": <kernel>, "T_past": ...}
  model.x0, model.T        initial log price (default 0) and horizon (default 1)
  grid.N                   number of Euler cells
  simulate.epsilon         noise scale; simulate.n_paths: replications;
  simulate.dump_paths      write this many per-path CSV files (default 0)
  rate.objective           pathwise | terminal | crossing (must match command)
  rate.target              nodal path array (pathwise), terminal level y,
                           or barrier U (crossing)
  rate.multistarts, rate.grad_tol, rate.max_iter, rate.start_energies
                           optimizer settings (defaults: 8, 1e-7, 500,
                           [0.1,0.5,1,2,4,8,16])
  verify.schedule          decreasing epsilons, at least 4
  verify.event             terminal | crossing;  verify.target: y or U
  verify.n_paths           paths per epsilon;  verify.use_is: default true
  seed                     base RNG seed (default 0); --seed flag wins
  output                   artifact directory; default from $%s, else '.'
""" % OUTPUT_ENV


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def _parse_override(token: str):
    if not token.startswith("--") or "=" not in token:
        raise ConfigError(
            f"unrecognized argument '{token}' (overrides look like --rate.target=0.3)"
        )
    dotted, raw = token[2:].split("=", 1)
    if not dotted:
        raise ConfigError(f"override '{token}' is missing a config key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return dotted, value


def _set_by_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {dotted}: '{p}' is not an object")
    node[parts[-1]] = value


def load_config(path: str, overrides=(), seed=None, output=None) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError(f"config file {path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for token in overrides:
        dotted, value = _parse_override(token)
        _set_by_path(cfg, dotted, value)
    if seed is not None:
        cfg["seed"] = seed
    if output is not None:
        cfg["output"] = output
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "(top level)"
        raise ConfigError(f"config key {where}: {e.message}") from None


def _require(cfg: dict, block: str) -> dict:
    if block not in cfg:
        raise ConfigError(f"config key {block}: required by this command but missing")
    return cfg[block]


def _build_model(cfg: dict) -> ModelSpec:
    try:
        return model_from_dict(cfg["model"])
    except (ModelError, KernelError, ValueError) as e:
        raise ConfigError(f"config key model: {e}") from None


def _rate_config(cfg: dict, grid_n: int, seed: int) -> RateConfig:
    block = cfg.get("rate", {})
    return RateConfig(
        N=grid_n,
        multistarts=int(block.get("multistarts", 8)),
        grad_tol=float(block.get("grad_tol", 1e-7)),
        max_iter=int(block.get("max_iter", 500)),
        seed=seed,
        start_energies=tuple(block.get("start_energies", (0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0))),
    )


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def _artifact_base(cfg: dict, command: str) -> str:
    out_dir = cfg.get("output") or os.environ.get(OUTPUT_ENV) or "."
    os.makedirs(out_dir, exist_ok=True)
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return os.path.join(out_dir, f"{command}-{stamp}-{cfg.get('seed', 0)}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_check_kernel(cfg: dict, args) -> int:
    model = _build_model(cfg)
    kernel = model.kernel
    T = kernel.T
    deltas = [T * 0.5 ** k for k in range(1, 9)]
    rep = modulus_estimate(kernel, deltas, quad_N=512)
    info = {
        "kernel": cfg["model"]["kernel"],
        "alpha_hat": rep.alpha_hat,
        "alpha_tabulated": kernel.holder_alpha,
        "low_confidence": kernel.low_confidence,
    }
    exact = getattr(kernel, "covariance_exact", None)
    if exact is not None:
        ts = np.linspace(T / 8, T, 8)
        approx = covariance_matrix(kernel, ts, quad_N=1024)
        ref = np.array([[exact(t, s) for s in ts] for t in ts])
        info["covariance_max_rel_err"] = float(
            np.max(np.abs(approx - ref) / np.maximum(np.abs(ref), 1e-300))
        )
    base = _artifact_base(cfg, "check-kernel")
    report.write_csv(base + ".csv", "delta,modulus", list(zip(rep.deltas, rep.values)))
    report.write_json(base + ".json", info)
    report.save_modulus_figure(rep.deltas, rep.values, rep.alpha_hat, base + ".png")
    print(
        f"check-kernel: alpha_hat={rep.alpha_hat:.4f} "
        f"tabulated={kernel.holder_alpha:.4f} -> {base}.json"
    )
    return EXIT_OK


def cmd_simulate(cfg: dict, args) -> int:
    model = _build_model(cfg)
    block = _require(cfg, "simulate")
    grid = Grid(N=int(cfg["grid"]["N"]), T=model.T)
    seed = int(cfg.get("seed", 0))
    eps = float(block["epsilon"])
    n_paths = int(block["n_paths"])
    dump = min(int(block.get("dump_paths", 0)), n_paths)
    vm = build_volterra_matrix(model.kernel, grid)

    base = _artifact_base(cfg, "simulate")
    count = 0
    s1 = s2 = 0.0
    zmin, zmax = math.inf, -math.inf
    first_Z = None
    dumped = 0
    for xi, eta in iter_noise_blocks(seed, n_paths, grid.N):
        bundle = bundle_from_noise(vm, xi, eta, seed=seed)
        sim = simulate_log_price(model, bundle, eps)
        zT = sim.Z[:, -1]
        block_start = count
        count += zT.size
        s1 += float(np.sum(zT))
        s2 += float(zT @ zT)
        zmin = min(zmin, float(np.min(zT)))
        zmax = max(zmax, float(np.max(zT)))
        if first_Z is None:
            first_Z = sim.Z[:32].copy()
        while dumped < dump and dumped < count:
            k = dumped - block_start
            rows = report.path_rows(grid, bundle.B, bundle.Bhat, bundle.W, sim.Z, sim.X, sim.V, k)
            report.write_csv(f"{base}-path-{dumped:04d}.csv", report.PATH_HEADER, rows)
            dumped += 1
    mean = s1 / count
    var = max(s2 / count - mean * mean, 0.0)
    summary = {
        "epsilon": eps,
        "n_paths": n_paths,
        "terminal_mean": mean,
        "terminal_std": math.sqrt(var),
        "terminal_min": zmin,
        "terminal_max": zmax,
        "dumped_paths": dumped,
    }
    report.write_json(base + ".json", summary)
    report.save_paths_figure(grid, first_Z, base + ".png")
    print(
        f"simulate: {n_paths} paths at epsilon={eps:g}, terminal mean {mean:.6f} "
        f"std {math.sqrt(var):.6f} -> {base}.json"
    )
    return EXIT_OK


def _run_rate(cfg: dict, args, objective: str, command: str) -> int:
    model = _build_model(cfg)
    block = _require(cfg, "rate")
    if block["objective"] != objective:
        raise ConfigError(
            f"config key rate.objective: '{block['objective']}' does not match "
            f"command {command} (expected '{objective}')"
        )
    grid_n = int(cfg["grid"]["N"])
    seed = int(cfg.get("seed", 0))
    rcfg = _rate_config(cfg, grid_n, seed)
    target = block["target"]
    try:
        if objective == "pathwise":
            if not isinstance(target, list):
                raise ConfigError(
                    "config key rate.target: pathwise objective needs the nodal "
                    f"path as an array of {grid_n + 1} numbers"
                )
            x = PathHypothesis(x=np.asarray(target, dtype=float), grid=Grid(N=grid_n, T=model.T))
            res = pathwise_rate(model, x, rcfg)
        elif objective == "terminal":
            if not isinstance(target, (int, float)):
                raise ConfigError("config key rate.target: terminal objective needs a number y")
            res = terminal_rate(model, float(target), rcfg)
        else:
            if not isinstance(target, (int, float)):
                raise ConfigError("config key rate.target: crossing objective needs a barrier U")
            res = crossing_rate(model, float(target), rcfg)
    except RateError as e:
        raise ConfigError(f"config key rate.target: {e}") from None

    base = _artifact_base(cfg, command)
    info = rate_result_to_dict(res)
    info.update(
        {
            "objective": objective,
            "iterations": res.iterations,
            "multistart_index": res.multistart_index,
            "multistart_values": list(res.multistart_values),
            "fd_gap": res.fd_gap,
        }
    )
    grid = Grid(N=grid_n, T=model.T)
    fdot = res.argmin.fdot
    f = np.cumsum(fdot) * grid.delta
    rows = list(zip(grid.nodes[:-1], fdot, f))
    report.write_csv(base + ".csv", "t,fdot,f", rows)
    report.write_json(base + ".json", info)
    report.save_control_figure(grid, fdot, base + ".png", t_star=res.t_star)
    tail = "" if res.converged else " (NOT converged)"
    star = f" t*={res.t_star:.4f}" if res.t_star is not None else ""
    print(f"{command}: value={res.value:.6f}{star}{tail} -> {base}.json")
    return EXIT_OK if res.converged else EXIT_NO_CONVERGE


def cmd_verify_ldp(cfg: dict, args) -> int:
    model = _build_model(cfg)
    block = _require(cfg, "verify")
    seed = int(cfg.get("seed", 0))
    rcfg = _rate_config(cfg, int(cfg["grid"]["N"]), seed)
    try:
        schedule = SpeedSchedule(tuple(float(e) for e in block["schedule"]))
    except ModelError as e:
        raise ConfigError(f"config key verify.schedule: {e}") from None
    event = (block["event"], float(block["target"]))
    rep = ldp_slope(
        model,
        schedule,
        event,
        int(block["n_paths"]),
        seed,
        use_is=bool(block.get("use_is", True)),
        cfg=rcfg,
        threads=args.threads,
    )
    base = _artifact_base(cfg, "verify-ldp")
    report.write_csv(base + ".csv", report.SLOPE_HEADER, report.slope_rows(rep))
    report.write_json(base + ".json", report.slope_summary(rep))
    report.save_slope_figure(rep, base + ".png")
    print(
        f"verify-ldp: slope={rep.slope:.6f} predicted={rep.predicted:.6f} "
        f"rel_error={rep.rel_error:.4f} -> {base}.json"
    )
    return EXIT_OK if rep.rate_result.converged else EXIT_NO_CONVERGE


def cmd_validate_model(cfg: dict, args) -> int:
    model = _build_model(cfg)
    rep = validate_assumptions(model)
    base = _artifact_base(cfg, "validate-model")
    info = {
        "sigma_positive": rep.sigma_positive,
        "sigma_min_sampled": rep.sigma_min_sampled,
        "continuity_ok": rep.continuity_ok,
        "continuity_exponent": rep.continuity_exponent,
        "growth_ok": rep.growth_ok,
        "growth_exponent": rep.growth_exponent,
        "qualifies": rep.qualifies,
        "notes": list(rep.notes),
    }
    report.write_json(base + ".json", info)
    report.write_csv(base + ".csv", "delta,sigma_local_modulus", list(rep.local_modulus))
    ok = all(rep.qualifies.values())
    print(
        f"validate-model: qualifies={rep.qualifies} -> {base}.json"
        if ok
        else f"validate-model: FAILS {[k for k, v in rep.qualifies.items() if not v]} -> {base}.json"
    )
    return EXIT_OK


_DISPATCH = {
    "check-kernel": cmd_check_kernel,
    "simulate": cmd_simulate,
    "rate-path": lambda cfg, args: _run_rate(cfg, args, "pathwise", "rate-path"),
    "rate-terminal": lambda cfg, args: _run_rate(cfg, args, "terminal", "rate-terminal"),
    "crossing": lambda cfg, args: _run_rate(cfg, args, "crossing", "crossing"),
    "verify-ldp": cmd_verify_ldp,
    "validate-model": cmd_validate_model,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="volldp",
        description="Volterra stochastic-volatility simulation, variational "
        "rate functionals, and Monte-Carlo LDP verification.",
        epilog=CONFIG_KEYS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config", help="path to a JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument(
        "--threads", type=int, default=1, help="cap Monte-Carlo worker threads (default 1)"
    )
    p.add_argument(
        "--output", default=None, help=f"artifact directory (else config, else ${OUTPUT_ENV})"
    )
    return p


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    try:
        cfg = load_config(args.config, overrides=extra, seed=args.seed, output=args.output)
        return _DISPATCH[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientHitsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_HITS
    except (ModelError, KernelError, RateError, SimulationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
