"""Command-line front end: validate, simulate, analyze, oracle.

Configuration is a YAML file with nested tables; probabilities may be given
as "p/q" strings for exactness. A canonical serialization (sorted-key JSON
with 17-significant-digit floats) is hashed into every output file so that
``analyze`` can refuse inputs produced by a different configuration.

Exit codes are stable: 0 ok, 1 config error, 2 validation failure,
3 runtime integrity error, 4 config/output hash mismatch, 5 oracle
infeasible.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np
import yaml

from .engine import CheckpointGrid, IntegrityError, UrnEngine
from .kernels import (
    ReplacementKernel,
    SimonKernel,
    TableKernel,
    builtin_finite,
    builtin_simon,
    validate_assumptions,
)
from .measures import (
    CountingMeasure,
    FiniteColors,
    PiecewisePolynomial,
    TagFunction,
    TestFunction,
    UnitInterval,
)
from .montecarlo import (
    Campaign,
    MonteCarloError,
    analyze_campaign_from_rows,
    run_campaign_rows,
)
from .oracle import OracleError, exact_moments, oracle_vs_montecarlo
from .spectral import spectral_constants

CSV_VERSION = "urnlab-csv v1"
REPORT_SCHEMA = "urnlab-report/1"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VALIDATION = 2
EXIT_INTEGRITY = 3
EXIT_HASH = 4
EXIT_ORACLE = 5


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------
def _fraction(value, field: str) -> Fraction:
    try:
        if isinstance(value, str):
            return Fraction(value)
        if isinstance(value, (int, float)):
            return Fraction(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(field, str(exc))
    raise ConfigError(field, f"cannot read {value!r} as a probability")


def build_kernel(cfg: dict) -> ReplacementKernel:
    block = cfg.get("kernel")
    if not isinstance(block, dict) or "kind" not in block:
        raise ConfigError("kernel", "missing kernel block with a 'kind'")
    kind = block["kind"]
    if kind == "simon":
        if "p" not in block:
            raise ConfigError("kernel.p", "simon kernel needs p")
        p = block["p"]
        p = Fraction(p) if isinstance(p, str) else p
        try:
            return builtin_simon(p)
        except ValueError as exc:
            raise ConfigError("kernel.p", str(exc))
    if kind == "finite":
        d = block.get("d")
        if not isinstance(d, int) or d < 1:
            raise ConfigError("kernel.d", "finite kernel needs an integer d >= 1")
        copy_law = [( _fraction(p, "kernel.copy_law"), int(k))
                    for p, k in block.get("copy_law", [])]
        inn = [[(_fraction(p, "kernel.innovation_law"), list(tags))
                for p, tags in row] for row in block.get("innovation_law", [])]
        try:
            return builtin_finite(d, copy_law, inn)
        except Exception as exc:
            raise ConfigError("kernel", str(exc))
    if kind == "table":
        rows = block.get("rows")
        if not rows:
            raise ConfigError("kernel.rows", "table kernel needs outcome rows")
        parsed = [[(_fraction(p, "kernel.rows"), int(c), list(tags))
                   for p, c, tags in row] for row in rows]
        try:
            return TableKernel(parsed)
        except Exception as exc:
            raise ConfigError("kernel.rows", str(exc))
    raise ConfigError("kernel.kind", f"unknown kind {kind!r}")


def build_initial_urn(cfg: dict, kernel: ReplacementKernel) -> CountingMeasure:
    pairs = cfg.get("initial_urn")
    if not pairs:
        raise ConfigError("initial_urn", "missing or empty")
    urn = CountingMeasure()
    for i, item in enumerate(pairs):
        try:
            color, mult = item
        except (TypeError, ValueError):
            raise ConfigError(f"initial_urn[{i}]", "expected [color, multiplicity]")
        if not isinstance(mult, int) or mult < 1:
            raise ConfigError(f"initial_urn[{i}]", f"multiplicity {mult!r} must be a positive integer")
        if isinstance(kernel.space, FiniteColors):
            color = int(color)
        else:
            color = float(color)
        if not kernel.space.contains(color):
            raise ConfigError(f"initial_urn[{i}]", f"color {color!r} outside the kernel's space")
        urn.add(color, mult)
    return urn


def build_observable(spec: dict, kernel: ReplacementKernel, field: str) -> TestFunction:
    kind = spec.get("kind")
    if kind == "indicator":
        try:
            return PiecewisePolynomial.indicator(float(spec["lo"]), float(spec["hi"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(field, str(exc))
    if kind == "tag_indicator":
        if not isinstance(kernel.space, FiniteColors):
            raise ConfigError(field, "tag_indicator needs a finite kernel")
        return TagFunction.indicator(int(spec["tag"]), kernel.space.d)
    if kind == "polynomial":
        return PiecewisePolynomial.polynomial([float(c) for c in spec["coeffs"]])
    if kind == "table":
        if not isinstance(kernel.space, FiniteColors):
            raise ConfigError(field, "table observable needs a finite kernel")
        vals = spec["values"]
        if len(vals) != kernel.space.d:
            raise ConfigError(field, "table length must match the color count")
        return TagFunction(vals)
    raise ConfigError(field, f"unknown observable kind {kind!r}")


def build_observables(cfg: dict, kernel: ReplacementKernel) -> Dict[str, TestFunction]:
    out: Dict[str, TestFunction] = {}
    for i, spec in enumerate(cfg.get("observables", [])):
        name = spec.get("name")
        if not name or not isinstance(name, str):
            raise ConfigError(f"observables[{i}].name", "missing observable name")
        if name in out:
            raise ConfigError(f"observables[{i}].name", f"duplicate name {name!r}")
        out[name] = build_observable(spec, kernel, f"observables[{i}]")
    return out


def build_campaign(cfg: dict) -> Campaign:
    kernel = build_kernel(cfg)
    urn = build_initial_urn(cfg, kernel)
    obs = build_observables(cfg, kernel)
    horizons = [int(h) for h in cfg.get("horizons", [])]
    replicas = cfg.get("replicas")
    if not isinstance(replicas, int) or replicas < 2:
        raise ConfigError("replicas", "need an integer >= 2")
    seed = cfg.get("base_seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("base_seed", "must be an integer")
    times = [float(t) for t in cfg.get("time_grid", [])]
    try:
        return Campaign(kernel=kernel, initial_urn=urn, observables=obs,
                        horizons=horizons, replicas=replicas, base_seed=seed,
                        time_grid=times)
    except Exception as exc:
        raise ConfigError("campaign", str(exc))


# ---------------------------------------------------------------------------
# Canonical serialization and hashing
# ---------------------------------------------------------------------------
def _canonical(value):
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, (int, str)):
        return value
    return str(value)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(_canonical(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError("file", f"no such config file: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError("file", f"YAML parse error: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("file", "top level must be a mapping")
    return cfg


# ---------------------------------------------------------------------------
# CSV emission (schema: replica,t,n,total,obs_*...,M_a,M_*...,opt_bracket_*...,pred_bracket_*...)
# ---------------------------------------------------------------------------
def _fmt(x: float) -> str:
    return format(x, ".17g")


def csv_header(obs_names: List[str]) -> str:
    cols = ["replica", "t", "n", "total"]
    cols += [f"obs_{n}" for n in obs_names]
    cols += ["M_a"]
    cols += [f"M_{n}" for n in obs_names]
    cols += [f"opt_bracket_{n}" for n in obs_names]
    cols += [f"pred_bracket_{n}" for n in obs_names]
    return ",".join(cols)


def csv_row(replica: int, traj_cols, row, obs_names: List[str]) -> str:
    get = lambda name: row[traj_cols.index(name)]
    vals = [str(replica), _fmt(get("t")), str(int(get("n"))), str(int(get("total")))]
    vals += [_fmt(get(f"obs_{n}")) for n in obs_names]
    vals += [_fmt(get("M_a"))]
    vals += [_fmt(get(f"M_{n}")) for n in obs_names]
    vals += [_fmt(get(f"opt_bracket_{n}")) for n in obs_names]
    vals += [_fmt(get(f"pred_bracket_{n}")) for n in obs_names]
    return ",".join(vals)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------
def cmd_validate(cfg: dict, args) -> int:
    kernel = build_kernel(cfg)
    build_initial_urn(cfg, kernel)  # field diagnostics for bad urns
    vcfg = cfg.get("validate", {})
    n_samples = int(vcfg.get("n_samples", 20000))
    tol = float(vcfg.get("tol", 5.0))
    if "s_grid" in vcfg:
        if isinstance(kernel.space, FiniteColors):
            grid = [int(s) for s in vcfg["s_grid"]]
        else:
            grid = [float(s) for s in vcfg["s_grid"]]
    elif isinstance(kernel.space, FiniteColors):
        grid = list(range(kernel.space.d))
    else:
        grid = [0.1, 0.5, 0.9]
    report = validate_assumptions(kernel, n_samples, grid, tol,
                                  seed=int(vcfg.get("seed", 0)))
    payload = {"schema": REPORT_SCHEMA, "config": config_hash(cfg),
               "validation": report.to_dict()}
    print(json.dumps(payload, indent=2))
    if not report.all_pass:
        return EXIT_VALIDATION
    if report.has_indeterminate:
        print("warning: some assumptions are indeterminate (recorded, not provable)",
              file=sys.stderr)
    return EXIT_OK


def cmd_simulate(cfg: dict, args) -> int:
    campaign = build_campaign(cfg)
    h = config_hash(cfg)
    out_dir = args.out or cfg.get("out_dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    threads = args.threads or int(cfg.get("threads", 0)) or None
    batch = int(cfg.get("batch_size", 0)) or campaign.replicas
    obs_names = list(campaign.observables)

    try:
        rows_by_replica, traj_cols = run_campaign_rows(campaign, threads=threads)
    except IntegrityError as exc:
        print(f"runtime integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY

    files = []
    for b0 in range(0, campaign.replicas, batch):
        b1 = min(b0 + batch, campaign.replicas)
        path = os.path.join(out_dir, f"trajectories_b{b0 // batch:03d}.csv")
        with open(path, "w") as fh:
            fh.write(f"# {CSV_VERSION} config={h}\n")
            fh.write(csv_header(obs_names) + "\n")
            for r in range(b0, b1):
                for row in rows_by_replica[r]:
                    fh.write(csv_row(r, traj_cols, row, obs_names) + "\n")
        files.append(os.path.basename(path))

    consts = campaign.constants
    from .measures import measure_integrate

    lln = {}
    for name, f in campaign.observables.items():
        mubar = float(measure_integrate(consts.mu_bar, f))
        devs = []
        for r in range(campaign.replicas):
            last = rows_by_replica[r][-1]
            devs.append(last[traj_cols.index(f"obs_{name}")]
                        / last[traj_cols.index("total")] - mubar)
        devs = np.array(devs)
        lln[name] = {"mubar_f": mubar,
                     "mean_abs_dev": float(np.abs(devs).mean()),
                     "max_abs_dev": float(np.abs(devs).max())}
    summary = {
        "schema": REPORT_SCHEMA,
        "config": h,
        "constants": {"lambda1": float(consts.lambda1),
                      "lambda2": float(consts.lambda2),
                      "rho": float(consts.rho),
                      "mu_a": float(consts.mu_a)},
        "regime": campaign.regime,
        "replicas": campaign.replicas,
        "horizons": campaign.horizons,
        "time_grid": campaign.time_grid,
        "lln_deviation_at_last_horizon": lln,
        "files": files,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"wrote {len(files)} trajectory file(s) and summary.json to {out_dir}")
    return EXIT_OK


def _load_rows(out_dir: str, expect_hash: str):
    summary_path = os.path.join(out_dir, "summary.json")
    if not os.path.exists(summary_path):
        raise FileNotFoundError(f"no summary.json in {out_dir}")
    with open(summary_path) as fh:
        summary = json.load(fh)
    if summary.get("config") != expect_hash:
        return None, summary
    rows = {}
    header = None
    for fname in summary["files"]:
        path = os.path.join(out_dir, fname)
        with open(path) as fh:
            first = fh.readline().strip()
            if f"config={expect_hash}" not in first:
                return None, summary
            header = fh.readline().strip().split(",")
            for line in fh:
                parts = line.strip().split(",")
                r = int(parts[0])
                rows.setdefault(r, []).append([float(x) for x in parts[1:]])
    cols = header[1:]
    return (rows, cols), summary


def cmd_analyze(cfg: dict, args) -> int:
    campaign = build_campaign(cfg)
    h = config_hash(cfg)
    out_dir = args.out or cfg.get("out_dir", "out")
    try:
        loaded, summary = _load_rows(out_dir, h)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    if loaded is None:
        print(f"config hash mismatch: outputs in {out_dir} were produced by "
              f"config {summary.get('config')}, expected {h}", file=sys.stderr)
        return EXIT_HASH
    rows, cols = loaded
    outcomes = analyze_campaign_from_rows(campaign, rows, cols,
                                          tolerances=cfg.get("tolerances"),
                                          tests=cfg.get("tests"))
    report = {
        "schema": REPORT_SCHEMA,
        "config": h,
        "regime": campaign.regime,
        "outcomes": [o.to_dict() for o in outcomes],
        "all_pass": all(o.passed for o in outcomes),
    }
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    for o in outcomes:
        print(o.line())
    print(f"report written to {path}")
    return EXIT_OK if report["all_pass"] else EXIT_VALIDATION


def cmd_oracle(cfg: dict, args) -> int:
    kernel = build_kernel(cfg)
    if not isinstance(kernel, TableKernel):
        print("oracle requires a finite kernel with rational probabilities",
              file=sys.stderr)
        return EXIT_ORACLE
    urn = build_initial_urn(cfg, kernel)
    obs = build_observables(cfg, kernel)
    ocfg = cfg.get("oracle", {})
    n = int(ocfg.get("n", 4))
    replicas = int(ocfg.get("replicas", 10000))
    budget = int(ocfg.get("node_budget", 10 ** 6))
    depth_cap = int(ocfg.get("depth_cap", 8))
    name = ocfg.get("observable") or (next(iter(obs)) if obs else None)
    if name is None or name not in obs:
        print("oracle needs an observable to evaluate", file=sys.stderr)
        return EXIT_CONFIG
    f = obs[name]
    try:
        moments = exact_moments(kernel, urn, n, f, node_budget=budget,
                                depth_cap=depth_cap)
        comparisons = oracle_vs_montecarlo(kernel, urn, n, f, replicas,
                                           base_seed=int(cfg.get("base_seed", 0)),
                                           node_budget=budget, depth_cap=depth_cap)
    except OracleError as exc:
        print(f"oracle infeasible: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    print(f"exact moments of U_n({name}) at n={n}:")
    print(f"  E[U_n(f)]    = {moments.mean} = {float(moments.mean):.10g}")
    print(f"  E[Ubar_n(f)] = {moments.mean_normalized} "
          f"= {float(moments.mean_normalized):.10g}")
    print(f"  Var[U_n(f)]  = {moments.variance} = {float(moments.variance):.10g}")
    ok = True
    for comp in comparisons:
        print(comp.describe())
        ok = ok and comp.passed
    return EXIT_OK if ok else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="urnlab",
        description="Simulate urn schemes with innovation and verify their limit laws.")
    parser.add_argument("command", choices=["validate", "simulate", "analyze", "oracle"])
    parser.add_argument("--config", required=True, help="YAML configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override base_seed")
    parser.add_argument("--replicas", type=int, default=None, help="override replicas")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("URNLAB_THREADS", 0)) or None,
                        help="worker threads (default: URNLAB_THREADS or all cores)")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["base_seed"] = args.seed
        if args.replicas is not None:
            cfg["replicas"] = args.replicas
        handler = {"validate": cmd_validate, "simulate": cmd_simulate,
                   "analyze": cmd_analyze, "oracle": cmd_oracle}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MonteCarloError as exc:
        print(f"campaign error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"runtime integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
