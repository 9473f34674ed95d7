"""Command-line front end: validated configs, Monte-Carlo runs, sweeps.

Outputs are a pure function of (config file, overrides): per-drop seeds fan
out from the master seed through fixed counters, and rows are canonicalized
by drop index, so reruns are byte-identical regardless of worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import channel as ch
from . import metrics
from . import protocol
from . import topology as topo
from .errors import FbtrainError, NumericFailureError

SUMMARY_SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "deployment": {
        "kind": "hex_grid",            # hex_grid | cell_edge_pair
        "tiers": 2,
        "isd": 200.0,
        "separation": 200.0,           # BS spacing of the cell-edge pair
        "users_per_cell": 4,
        "drop_policy": "uniform_in_cell",
    },
    "channel": {
        "pathloss_exponent": 3.76,
        "reference_distance": 10.0,
        "cell_edge_snr_db": 20.0,
        "per_bs_power": 1.0,
        "per_ue_power": 1.0,
    },
    "dims": {"M": 8, "N": 2, "d": 2},
    "strategy": "A",                   # one of A,B,C,D,uncoordinated,centralized
    "T": 10,
    "gamma": 0.01,
    "csi_model": "perfect",
    "pilots": {"pool_size": None, "seq_length": None, "pilot_power": None},
    "duplex": {"mode": "all_dl", "p_ul": 0.3},
    "inner_iters": 10,
    "weight_carriage": "backhaul",
    "constraint_kind": "per_bs_total",
    "seed": 1,
    "drops": 10,
    "workers": 1,
}

_SCHEMA = {
    "deployment": {
        "kind": (str, lambda v: v in ("hex_grid", "cell_edge_pair"),
                 "must be hex_grid or cell_edge_pair"),
        "tiers": (int, lambda v: v >= 0, "must be >= 0"),
        "isd": ((int, float), lambda v: v > 0, "must be positive"),
        "separation": ((int, float), lambda v: v > 0, "must be positive"),
        "users_per_cell": (int, lambda v: v >= 1, "must be >= 1"),
        "drop_policy": (str, lambda v: v in ("uniform_in_cell",
                                             "cell_edge_band"),
                        "must be uniform_in_cell or cell_edge_band"),
    },
    "channel": {
        "pathloss_exponent": ((int, float), lambda v: v > 2, "must exceed 2"),
        "reference_distance": ((int, float), lambda v: v > 0,
                               "must be positive"),
        "cell_edge_snr_db": ((int, float), lambda v: True, ""),
        "per_bs_power": ((int, float), lambda v: v > 0, "must be positive"),
        "per_ue_power": ((int, float), lambda v: v > 0, "must be positive"),
    },
    "dims": {
        "M": (int, lambda v: v >= 1, "must be >= 1"),
        "N": (int, lambda v: v >= 1, "must be >= 1"),
        "d": (int, lambda v: v >= 1, "must be >= 1"),
    },
    "strategy": ((str, list), lambda v: True, ""),
    "T": (int, lambda v: v >= 0, "must be >= 0"),
    "gamma": ((int, float), lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "csi_model": (str, lambda v: v in protocol.CSI_MODELS,
                  f"must be one of {protocol.CSI_MODELS}"),
    "pilots": {
        "pool_size": ((int, type(None)), lambda v: v is None or v >= 1,
                      "must be >= 1 or null"),
        "seq_length": ((int, type(None)), lambda v: v is None or v >= 1,
                       "must be >= 1 or null"),
        "pilot_power": ((int, float, type(None)),
                        lambda v: v is None or v > 0,
                        "must be positive or null"),
    },
    "duplex": {
        "mode": (str, lambda v: v in protocol.DUPLEX_MODES,
                 f"must be one of {protocol.DUPLEX_MODES}"),
        "p_ul": ((int, float), lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    },
    "inner_iters": (int, lambda v: v >= 1, "must be >= 1"),
    "weight_carriage": (str, lambda v: v in protocol.WEIGHT_CARRIAGE,
                        f"must be one of {protocol.WEIGHT_CARRIAGE}"),
    "constraint_kind": (str, lambda v: v in ("per_bs_total", "per_antenna"),
                        "must be per_bs_total or per_antenna"),
    "seed": (int, lambda v: True, ""),
    "drops": (int, lambda v: v >= 1, "must be >= 1"),
    "workers": (int, lambda v: v >= 1, "must be >= 1"),
}


class ConfigError(FbtrainError, ValueError):
    """Configuration problems, with one message per offending field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def _check_schema(config: dict, schema: dict, prefix: str = "") -> list[str]:
    problems = []
    for key in config:
        if key not in schema:
            problems.append(f"{prefix}{key}: unknown key")
    for key, rule in schema.items():
        if key not in config:
            problems.append(f"{prefix}{key}: missing")
            continue
        value = config[key]
        if isinstance(rule, dict):
            if not isinstance(value, dict):
                problems.append(f"{prefix}{key}: must be an object")
            else:
                problems.extend(_check_schema(value, rule, f"{prefix}{key}."))
            continue
        types, check, message = rule
        if isinstance(value, bool) or not isinstance(value, types):
            problems.append(f"{prefix}{key}: wrong type {type(value).__name__}")
        elif not check(value):
            problems.append(f"{prefix}{key}: {message}")
    return problems


def _feasibility_problems(config: dict) -> list[str]:
    problems = []
    dims = config["dims"]
    dep = config["deployment"]
    if dims["d"] > min(dims["M"], dims["N"]):
        problems.append("dims.d: streams per user cannot exceed min(M, N)")
    if dep["kind"] == "hex_grid":
        cells = 1 + 3 * dep["tiers"] * (dep["tiers"] + 1)
    else:
        cells = 2
    streams = cells * dep["users_per_cell"] * dims["d"]
    pool = config["pilots"]["pool_size"]
    if config["csi_model"] != "contaminated" and pool is not None \
            and pool < streams:
        problems.append(
            f"pilots.pool_size: orthogonal allocation needs >= {streams} "
            f"sequences for {streams} streams (or csi_model=contaminated)")
    seq = config["pilots"]["seq_length"]
    if pool is not None and seq is not None and seq < pool:
        problems.append("pilots.seq_length: must be >= pool_size")
    if config["duplex"]["mode"] == "dynamic_tdd" \
            and dep["kind"] == "cell_edge_pair":
        problems.append("duplex.mode: the cell-edge pair scenario is all-DL")
    for strategy in _strategy_list(config):
        if strategy not in protocol.STRATEGIES:
            problems.append(f"strategy: unknown strategy {strategy!r}")
            continue
        sc = _scenario_from(config, strategy=strategy)
        problems.extend(f"strategy {strategy}: {p}" for p in sc.validate())
    return problems


def _strategy_list(config: dict) -> list[str]:
    raw = config["strategy"]
    return list(raw) if isinstance(raw, list) else [raw]


def _apply_overrides(config: dict, overrides) -> list[str]:
    problems = []
    for item in overrides or []:
        if "=" not in item:
            problems.append(f"--set {item}: expected key=value")
            continue
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        keys = path.split(".")
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                problems.append(f"--set {path}: no such config group")
                break
            node = node[key]
        else:
            node[keys[-1]] = value
    return problems


def load_config(path, overrides=None) -> dict:
    """Read, merge with defaults, override, and validate a config file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"config file not found: {p}"])
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{p}: invalid JSON ({exc})"]) from exc
    config = json.loads(json.dumps(DEFAULT_CONFIG))   # deep copy
    problems = []
    if not isinstance(user, dict):
        raise ConfigError([f"{p}: top level must be an object"])
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    problems += _apply_overrides(config, overrides)
    problems += _check_schema(config, _SCHEMA)
    if not problems:
        problems += _feasibility_problems(config)
    if problems:
        raise ConfigError(problems)
    return config


def _scenario_from(config: dict, strategy: str,
                   proto_seed: int | None = None) -> protocol.Scenario:
    return protocol.Scenario(
        strategy=strategy,
        T=config["T"],
        gamma=config["gamma"],
        csi_model=config["csi_model"],
        duplex=config["duplex"]["mode"],
        p_ul=config["duplex"]["p_ul"],
        inner_iters=config["inner_iters"],
        weight_carriage=config["weight_carriage"],
        d=config["dims"]["d"],
        per_bs_power=config["channel"]["per_bs_power"],
        per_ue_power=config["channel"]["per_ue_power"],
        constraint_kind=config["constraint_kind"],
        pool_size=config["pilots"]["pool_size"],
        seq_length=config["pilots"]["seq_length"],
        pilot_power=config["pilots"]["pilot_power"],
        seed=config["seed"] if proto_seed is None else proto_seed,
        drops=config["drops"],
    )


def _derive(master: int, tag: int, drop: int) -> int:
    return int(np.random.SeedSequence((master, tag, drop))
               .generate_state(1)[0])


def base_topology(config: dict) -> topo.NetworkTopology:
    dep = config["deployment"]
    if dep["kind"] == "hex_grid":
        return topo.generate_hex_grid(dep["tiers"], dep["isd"])
    return topo.generate_cell_edge_pair(dep["separation"])


def drop_channels(config: dict, drop: int) -> ch.ChannelSet:
    """Deterministic channel realization for one Monte-Carlo drop."""
    dep = config["deployment"]
    chan = config["channel"]
    dims = config["dims"]
    master = config["seed"]
    dropped = topo.drop_users(base_topology(config), dep["users_per_cell"],
                              _derive(master, 0xA, drop), dep["drop_policy"])
    if dep["kind"] == "cell_edge_pair":
        return ch.cell_edge_channelset(dropped, chan["cell_edge_snr_db"],
                                       dims["M"], dims["N"],
                                       seed=_derive(master, 0xC, drop))
    noise = ch.calibrate_noise(dropped, chan["cell_edge_snr_db"],
                               chan["per_bs_power"],
                               chan["pathloss_exponent"],
                               chan["reference_distance"])
    return ch.generate_channels(
        dropped, dims["M"], dims["N"], chan["pathloss_exponent"],
        chan["reference_distance"], seed=_derive(master, 0xC, drop),
        include_cross_links=config["duplex"]["mode"] == "dynamic_tdd",
        noise_power=noise)


def _run_one_drop(config: dict, strategy: str, drop: int) -> dict:
    channels = drop_channels(config, drop)
    scenario = _scenario_from(config, strategy,
                              proto_seed=_derive(config["seed"], 0xB, drop))
    try:
        trace = protocol.run_scenario(scenario, channels)
        baseline = protocol.uncoordinated_state(channels, trace.modes,
                                                scenario)
        from .beamforming import sum_rate
        base_rate, _ = sum_rate(channels, baseline, modes=trace.modes)
        return {"drop": drop, "failed": False,
                "sum_rate": trace.sum_rate.tolist(),
                "eff_throughput": trace.eff_throughput.tolist(),
                "pilot_symbols": trace.pilot_symbols.tolist(),
                "objective": trace.objective.tolist(),
                "baseline_rate": base_rate}
    except NumericFailureError as exc:
        return {"drop": drop, "failed": True, "error": str(exc)}


def _map_drops(config: dict, strategy: str) -> list[dict]:
    drops = config["drops"]
    workers = config["workers"]
    if workers <= 1:
        results = [_run_one_drop(config, strategy, i) for i in range(drops)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one_drop, [config] * drops,
                                    [strategy] * drops, range(drops)))
    return sorted(results, key=lambda r: r["drop"])


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def cmd_run(config_path, out_dir, overrides=None) -> int:
    config = load_config(config_path, overrides)
    strategies = _strategy_list(config)
    if len(strategies) != 1:
        raise ConfigError(["strategy: run expects a single strategy; "
                           "use sweep for several"])
    strategy = strategies[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = _map_drops(config, strategy)

    rows = []
    for res in results:
        if res["failed"]:
            continue
        for t, (r, e, p) in enumerate(zip(res["sum_rate"],
                                          res["eff_throughput"],
                                          res["pilot_symbols"])):
            rows.append([res["drop"], t, r, e, p])
    _write_csv(out / "trace.csv",
               ["drop", "iteration", "sum_rate", "eff_throughput",
                "pilot_symbols"], rows)

    ok = [r for r in results if not r["failed"]]
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "strategy": strategy,
        "drops": config["drops"],
        "failed_drops": [r["drop"] for r in results if r["failed"]],
        "config": config,
    }
    if ok:
        rates = np.array([r["sum_rate"] for r in ok])
        effs = np.array([r["eff_throughput"] for r in ok])
        base = np.array([r["baseline_rate"] for r in ok])
        summary["per_iteration"] = {
            "mean_sum_rate": np.mean(rates, axis=0).tolist(),
            "p5_sum_rate": np.percentile(rates, 5, axis=0).tolist(),
            "p95_sum_rate": np.percentile(rates, 95, axis=0).tolist(),
            "mean_eff_throughput": np.mean(effs, axis=0).tolist(),
        }
        summary["uncoordinated_mean_rate"] = float(np.mean(base))
        summary["converged_gain_over_uncoordinated"] = float(
            np.mean(rates[:, -1] / base - 1.0))
    (out / "summary.json").write_text(json.dumps(summary, indent=2,
                                                 sort_keys=True) + "\n")
    return 0


def cmd_sweep(config_path, out_dir, t_list, overrides=None) -> int:
    config = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    argmax = {}
    for strategy in _strategy_list(config):
        scenario = _scenario_from(config, strategy)
        factory = lambda i: drop_channels(config, i)   # noqa: E731
        table, best_t = metrics.sweep_iterations(scenario, factory, t_list,
                                                 config["drops"])
        argmax[strategy] = best_t
        for row in table:
            rows.append([row["strategy"], row["T"], row["gamma"],
                         row["total_overhead"], row["mean_R"],
                         row["mean_eff_tput"], row["p5"], row["p95"]])
    _write_csv(out / "sweep.csv",
               ["strategy", "T", "gamma", "total_overhead", "mean_R",
                "mean_eff_tput", "p5", "p95"], rows)
    (out / "sweep_summary.json").write_text(
        json.dumps({"argmax_T": argmax}, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_validate(config_path, overrides=None) -> int:
    load_config(config_path, overrides)
    print("config OK")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbtrain",
        description="Multicell MIMO coordinated-beamforming trainer "
                    "(iterative forward-backward pilot signaling)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append",
                       metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")

    p_run = sub.add_parser("run", help="Monte-Carlo run of one strategy")
    common(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--drops", type=int, help="override drop count")
    p_run.add_argument("--seed", type=int, help="override master seed")
    p_run.add_argument("--workers", type=int, help="override worker count")

    p_sweep = sub.add_parser("sweep", help="trade-off sweep over T")
    common(p_sweep)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--t-list", required=True,
                         help="comma-separated iteration counts, e.g. 0,2,4")
    p_sweep.add_argument("--drops", type=int)
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--workers", type=int)

    p_val = sub.add_parser("validate", help="check a config without running")
    common(p_val)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides or [])
    for flag in ("drops", "seed", "workers"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{flag}={value}")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, overrides)
        if args.command == "sweep":
            t_list = [int(t) for t in args.t_list.split(",") if t.strip()]
            return cmd_sweep(args.config, args.out, t_list, overrides)
        return cmd_validate(args.config, overrides)
    except ConfigError as exc:
        for line in exc.problems:
            print(f"error: {line}", file=sys.stderr)
        return 2
    except FbtrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
