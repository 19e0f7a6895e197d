"""Experiment orchestration: config parsing, calibration cache, runs, output.

Subcommands: calibrate, run, sweep, adaptive, diagnose, selftest.  Exit
codes: 0 success, 2 usage or validation error, 3 infeasible experiment,
4 selftest failure.  Every output file embeds the package version, the full
resolved config and the master seed, which together reproduce it bit-exactly.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys

import numpy as np
import yaml

from . import __version__
from .adaptive import (
    GridError,
    InfeasibleScheduleError,
    adaptive_decisions,
    adaptive_rate,
    build_grid,
    build_schedule,
    calibrate_t3_adapt_kappa2,
    collect_adaptive_statistics,
)
from .calibration import ThresholdTable, combined_level, ensure_calibrated, level_ci
from .infodiag import MAX_ALPHABET_BITS, check_dpi, estimate_xi, kernel_names, make_kernel
from .model import Coin, ConfigError, ProblemConfig, validate_config
from .nonparametric import SobolevBall, make_sobolev_alternative
from .protocols import BudgetError, get_protocol
from .randomness import SeedTree
from .risk import DEFAULT_FAMILY, AlternativeFamily, estimate_risk, rate_sweep
from .stats import chi2_cdf, chi2_tail_bound, gauss_max_tail_bound, normal_cdf, normal_gap_lower_bound

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_SELFTEST = 4

RUN_CSV_COLUMNS = (
    "protocol,n,m,d,b,coin,rho2,type1,type2_worst,risk,mc_radius,seed"
)
SWEEP_CSV_COLUMNS = (
    "kind,axis,value,rho_star_sq,rho_theory_sq,slope,slope_lo,slope_hi"
)

_SECTION_KEYS = {
    "problem": {"n", "m", "d", "b", "alpha", "coin"},
    "nonparam": {"s", "R", "s_min", "s_max", "kind", "signal_s", "multiplier"},
    "sweep": {"axis", "values", "target_risk"},
    "diagnose": {"kernels", "mc_samples", "b"},
}
_TOP_KEYS = {
    "master_seed", "problem", "protocol", "family", "rho", "reps",
    "null_reps", "out", "thresholds", "nonparam", "sweep", "diagnose",
}


def _check_keys(mapping: dict, allowed: set, where: str):
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path: str) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    _check_keys(raw, _TOP_KEYS, "config")
    for section, keys in _SECTION_KEYS.items():
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"section {section} must be a mapping")
            _check_keys(raw[section], keys, f"section {section!r}")
    return raw


def problem_from_config(conf: dict) -> ProblemConfig:
    sec = conf.get("problem")
    if not isinstance(sec, dict):
        raise ConfigError("config needs a `problem` section")
    try:
        cfg = ProblemConfig(
            n=sec["n"], m=sec["m"], d=sec["d"], b=sec["b"],
            alpha=sec.get("alpha", 0.1), coin=Coin(sec.get("coin", "private")),
        )
    except KeyError as e:
        raise ConfigError(f"problem section is missing {e.args[0]!r}")
    except ValueError as e:
        raise ConfigError(str(e))
    validate_config(cfg)
    return cfg


def _meta(conf: dict, seed: int) -> dict:
    return {"version": f"dtestlab-{__version__}", "config": conf, "master_seed": seed}


def _write_csv(path: str, header: str, rows: list[str], meta: dict):
    buf = io.StringIO()
    buf.write(f"# version: {meta['version']}\n")
    buf.write(f"# master_seed: {meta['master_seed']}\n")
    buf.write(f"# config: {json.dumps(meta['config'], sort_keys=True)}\n")
    buf.write(header + "\n")
    for row in rows:
        buf.write(row + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def _resolve(conf: dict, args) -> tuple[dict, int, int, str | None]:
    seed = args.seed if args.seed is not None else conf.get("master_seed")
    if seed is None:
        raise ConfigError("a master seed is required (config master_seed or --seed)")
    conf = dict(conf)
    conf["master_seed"] = int(seed)
    reps = args.reps if args.reps is not None else conf.get("reps", 10_000)
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError(f"reps must be a positive integer, got {reps!r}")
    threads = args.threads
    out = args.out or conf.get("out")
    return conf, int(seed), reps, out


def _table_path(conf: dict, args) -> str:
    return conf.get("thresholds") or "thresholds.json"


def _load_table(path: str) -> ThresholdTable:
    if os.path.exists(path):
        return ThresholdTable.load(path)
    return ThresholdTable()


def cmd_calibrate(conf: dict, args) -> int:
    conf, seed, _, out = _resolve(conf, args)
    cfg = problem_from_config(conf)
    name = conf.get("protocol")
    if name is None:
        print("error: calibrate needs a `protocol` entry", file=sys.stderr)
        return EXIT_USAGE
    protocol = get_protocol(name, cfg)
    table_path = out or _table_path(conf, args)
    table = _load_table(table_path)
    root = SeedTree(seed)
    null_reps = int(conf.get("null_reps", 100_000))
    thresholds = ensure_calibrated(
        table, protocol, cfg, root.child("calibration"),
        null_reps=null_reps, threads=args.threads, recalibrate=True,
    )
    table.save(table_path)
    print(json.dumps({
        "meta": _meta(conf, seed),
        "protocol": protocol.name,
        "thresholds": {k: vars(t) for k, t in thresholds.items()},
        "achieved_level": combined_level(thresholds),
        "level_ci99": list(level_ci(thresholds)),
        "table": table_path,
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(conf: dict, args) -> int:
    conf, seed, reps, out = _resolve(conf, args)
    cfg = problem_from_config(conf)
    name = conf.get("protocol", "auto")
    protocol = get_protocol(name, cfg)
    rho = conf.get("rho")
    if rho is None or rho < 0:
        raise ConfigError("run needs a nonnegative `rho` (signal norm)")
    members = conf.get("family", list(DEFAULT_FAMILY.members))
    family = AlternativeFamily(tuple(members))
    table_path = _table_path(conf, args)
    table = _load_table(table_path)
    root = SeedTree(seed)
    if table.get(protocol.name, cfg, cfg.alpha) is None and not args.auto_calibrate:
        print(
            f"error: no thresholds for {protocol.name} at {cfg.fingerprint()}; "
            "run `calibrate` or pass --auto-calibrate",
            file=sys.stderr,
        )
        return EXIT_USAGE
    thresholds = ensure_calibrated(
        table, protocol, cfg, root.child("calibration"),
        null_reps=int(conf.get("null_reps", 100_000)), threads=args.threads,
    )
    table.save(table_path)
    report = estimate_risk(
        protocol, cfg, family, float(rho), reps,
        root.child("risk"), thresholds, threads=args.threads,
    )
    row = ",".join([
        protocol.name, str(cfg.n), str(cfg.m), str(cfg.d), str(cfg.b),
        cfg.coin.value, repr(rho * rho), repr(report.type1),
        repr(max(report.type2_by_alternative.values())),
        repr(report.worst_risk), repr(report.mc_radius), str(seed),
    ])
    if out:
        _write_csv(out, RUN_CSV_COLUMNS, [row], _meta(conf, seed))
    print(json.dumps({
        "meta": _meta(conf, seed),
        "protocol": protocol.name,
        "report": report.to_dict(),
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(conf: dict, args) -> int:
    conf, seed, _, out = _resolve(conf, args)
    cfg = problem_from_config(conf)
    sec = conf.get("sweep")
    if not isinstance(sec, dict):
        raise ConfigError("sweep needs a `sweep` section")
    axis = sec.get("axis")
    values = sec.get("values")
    target = float(sec.get("target_risk", 0.5))
    if axis not in ("d", "m", "n", "b") or not values or len(values) < 3:
        raise ConfigError("sweep section needs axis in {d,m,n,b} and >= 3 values")
    name = conf.get("protocol", "auto")
    protocol = get_protocol(name, cfg)
    members = conf.get("family", ["Flat"])
    family = AlternativeFamily(tuple(members))
    table_path = _table_path(conf, args)
    table = _load_table(table_path)
    root = SeedTree(seed)
    null_reps = int(conf.get("null_reps", 30_000))

    def calibrate(point_cfg):
        return ensure_calibrated(
            table, protocol, point_cfg, root.child("calibration"),
            null_reps=null_reps, threads=args.threads,
        )

    result = rate_sweep(
        protocol, cfg, axis, [int(v) for v in values], target,
        root.child("sweep"), calibrate, family=family, threads=args.threads,
    )
    table.save(table_path)
    rows = [
        f"point,{axis},{v:g},{rho_emp!r},{rho_th!r},,,"
        for v, rho_emp, rho_th in result.points
    ]
    rows.append(
        f"slope,{axis},,,,{result.fitted_slope!r},"
        f"{result.slope_ci[0]!r},{result.slope_ci[1]!r}"
    )
    if out:
        _write_csv(out, SWEEP_CSV_COLUMNS, rows, _meta(conf, seed))
    print(json.dumps({
        "meta": _meta(conf, seed),
        "protocol": protocol.name,
        "sweep": result.to_dict(),
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_adaptive(conf: dict, args) -> int:
    conf, seed, reps, out = _resolve(conf, args)
    cfg = problem_from_config(conf)
    sec = conf.get("nonparam")
    if not isinstance(sec, dict):
        raise ConfigError("adaptive needs a `nonparam` section")
    try:
        s_min = float(sec["s_min"])
        s_max = float(sec["s_max"])
        radius = float(sec["R"])
        signal_s = float(sec.get("signal_s", sec.get("s", (s_min + s_max) / 2)))
    except KeyError as e:
        raise ConfigError(f"nonparam section is missing {e.args[0]!r}")
    kind = sec.get("kind", "BoundaryFlat")
    multiplier = float(sec.get("multiplier", 10.0))
    grid = build_grid(s_min, s_max, cfg.n, cfg.m, cfg.b, cfg.coin)
    schedule = build_schedule(cfg.n, cfg.m, cfg.b, grid)
    root = SeedTree(seed)
    rho_s = math.sqrt(adaptive_rate(signal_s, cfg.n, cfg.m, cfg.b, cfg.coin))
    loglog = math.log2(math.log2(cfg.n))
    rho_alt = multiplier * loglog**0.25 * rho_s
    ball = SobolevBall(signal_s, radius)
    f_alt = make_sobolev_alternative(ball, rho_alt, kind, root.child("signal"))
    kappa2 = None
    if cfg.coin is Coin.PRIVATE:
        kappa2 = calibrate_t3_adapt_kappa2(
            cfg, grid, schedule, root.child("kappa2"), threads=args.threads
        )
    combo = "public" if cfg.coin is Coin.PUBLIC else "private"
    null_stats = collect_adaptive_statistics(
        cfg, grid, schedule, None, root.child("null"), reps, threads=args.threads
    )
    alt_stats = collect_adaptive_statistics(
        cfg, grid, schedule, f_alt, root.child("alt"), reps, threads=args.threads
    )
    type1 = float(adaptive_decisions(null_stats, cfg.n, kappa2)[combo].mean())
    type2 = 1.0 - float(adaptive_decisions(alt_stats, cfg.n, kappa2)[combo].mean())
    per_level = {
        key: {
            str(L): float(np.nanmean(null_stats[key][:, i]))
            if not np.isnan(null_stats[key][:, i]).all() else None
            for i, L in enumerate(grid.levels)
        }
        for key in ("T1a", "T2a", "T31a", "T32a")
    }
    payload = {
        "meta": _meta(conf, seed),
        "coin": combo,
        "grid_levels": list(grid.levels),
        "m_prime": schedule.m_prime,
        "bits_per_level": schedule.bits_per_level,
        "kappa2": kappa2,
        "rho_s": rho_s,
        "rho_alt": rho_alt,
        "type1": type1,
        "type2": type2,
        "risk": type1 + type2,
        "reps": reps,
        "null_level_stat_means": per_level,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_diagnose(conf: dict, args) -> int:
    conf, seed, _, out = _resolve(conf, args)
    cfg = problem_from_config(conf)
    sec = conf.get("diagnose", {})
    names = sec.get("kernels", list(kernel_names()))
    mc_samples = int(sec.get("mc_samples", 1_000_000))
    bits = int(sec.get("b", cfg.b))
    if bits > MAX_ALPHABET_BITS:
        print(
            f"error: a {bits}-bit alphabet (2^{bits} transcripts) cannot be "
            f"enumerated; the diagnostic supports b <= {MAX_ALPHABET_BITS}",
            file=sys.stderr,
        )
        return EXIT_INFEASIBLE
    root = SeedTree(seed)
    reports = []
    for i, name in enumerate(names):
        kernel = make_kernel(name, cfg, bits)
        est = estimate_xi(kernel, cfg, mc_samples, root.child("xi", i))
        reports.append(
            {
                "estimate": {
                    "kernel": est.kernel,
                    "bits": est.bits,
                    "trace": est.trace,
                    "trace_se": est.trace_se,
                    "lambda_max": est.lambda_max,
                    "mc_samples": est.mc_samples,
                    "empty_groups": est.empty_groups,
                },
                "dpi": check_dpi(est, cfg).to_dict(),
            }
        )
    payload = {"meta": _meta(conf, seed), "reports": reports}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK if all(r["dpi"]["ok"] for r in reports) else EXIT_SELFTEST


def _selftest_checks():
    checks = []
    # normal-cdf gap bound on its grid, zero tolerance
    xs = np.arange(-10.0, 10.0 + 1e-9, 1e-3)
    gap = (normal_cdf(xs) - 0.5) ** 2
    checks.append(("normal-gap-grid", bool((gap >= normal_gap_lower_bound(xs)).all())))
    # chi-square reference values
    checks.append((
        "chi2-closed-forms",
        abs(chi2_cdf(2, 2 * math.log(2)) - 0.5) < 1e-10
        and abs(chi2_cdf(1, 1.0) - (2 * normal_cdf(1.0) - 1.0)) < 1e-10
        and chi2_cdf(5, 0.0) == 0.0,
    ))
    rng = np.random.default_rng(20240917)
    ok_tail = True
    for df in (1, 2, 10, 100):
        draws = rng.chisquare(df, 100_000)
        for c in (0.25, 0.5, 2.0, 4.0):
            bound = chi2_tail_bound(df, c)
            freq = float((draws <= c * df).mean() if c < 1 else (draws >= c * df).mean())
            se = math.sqrt(max(freq * (1 - freq), 1e-12) / draws.size)
            ok_tail &= freq <= bound + 3 * se
    checks.append(("chi2-tail-dominance", ok_tail))
    z = rng.standard_normal((100_000, 16)) ** 2
    ok_max = True
    for d in (1, 4, 16):
        mx = z[:, :d].max(axis=1)
        for x in (4.0, 9.0, 16.0):
            freq = float((mx >= x).mean())
            se = math.sqrt(max(freq * (1 - freq), 1e-12) / mx.size)
            ok_max &= freq <= gauss_max_tail_bound(d, x) + 3 * se
    checks.append(("gauss-max-dominance", ok_max))
    return checks


def cmd_selftest(conf: dict, args) -> int:
    failures = 0
    for name, ok in _selftest_checks():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1
    return EXIT_OK if failures == 0 else EXIT_SELFTEST


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "adaptive": cmd_adaptive,
    "diagnose": cmd_diagnose,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtestlab",
        description="distributed signal detection under communication budgets",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--reps", type=int, help="replication count override")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--out", help="output file override")
    parser.add_argument("--auto-calibrate", action="store_true",
                        help="calibrate missing thresholds on the fly")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.reps is not None and args.reps < 1:
        print("error: --reps must be positive", file=sys.stderr)
        return EXIT_USAGE
    command = _COMMANDS[args.command]
    try:
        if args.command == "selftest":
            conf = {}
        else:
            if not args.config:
                print("error: --config is required", file=sys.stderr)
                return EXIT_USAGE
            conf = load_config(args.config)
        return command(conf, args)
    except (ConfigError, ValueError) as e:
        if isinstance(e, (InfeasibleScheduleError, GridError, BudgetError)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INFEASIBLE
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as e:
        # threshold searches that find no crossing surface here
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
