"""Command-line entry point: ``surfrann <subcommand> [--config] [--seed] [--out]``.

Exit codes: 0 success, 1 comparison failure, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import os
import sys
import traceback
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import evolving as ev
from . import experiments as exps
from . import plots
from .assembly import AssemblyError
from .config import ConfigError, dump_config, load_config, with_seed
from .geometry_levelset import CriticalPointError, SamplingError, write_ply, write_xyz
from .geometry_param import DegenerateChartError
from .geometry_pointcloud import CloudParseError


NUMERICAL_ERRORS = (np.linalg.LinAlgError, AssemblyError, ev.FlowConvergenceError, ev.PoleError,
                    SamplingError, CriticalPointError, DegenerateChartError, FloatingPointError)
KEY_COLUMNS = ("M", "N")
EXTRA_KEYS = ("point_set", "stage", "mode")
THREADS_ENV = "SURFRANN_THREADS"

SUBCOMMAND_IDS = {
    "solve-static": ("ex1_torus", "ex2_cheese"),
    "solve-heat": ("ex3_heat_cheese", "ex4_cup", "ex5_bunny"),
    "learn-flow": ("ex6_ellipsoid", "ex7_droplet"),
    "solve-evolving": ("ex6_ellipsoid", "ex7_droplet"),
    "sample": ("sample",),
}


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- writing results

def _snapshot_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_outputs(cfg, result: exps.ExperimentResult, out: Path) -> list:
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name):
        written.append(out / name)
        return out / name

    for r in result.rows:
        for k, v in r.items():
            if isinstance(v, (float, np.floating)) and not np.isfinite(v) and not k.startswith("E_"):
                raise NumericalFailure(f"non-finite value in column {k!r}")
    exps.write_rows(put(f"{cfg.id}.csv"), result.rows)
    put(f"{cfg.id}.ini").write_text(dump_config(cfg))
    ex = result.extra
    if cfg.id == "sample":
        path = put(f"{cfg.surface}_points.{cfg.format}")
        (write_ply if cfg.format == "ply" else write_xyz)(path, ex["points"])
        if ex["projection"] is not None:
            ex["projection"].write_csv(put(f"{cfg.surface}_projection.csv"))
        return written
    staged = any("stage" in r for r in result.rows)
    for m in ("error", "E_x", "E_n", "E_H"):
        rows = result.rows
        if staged:
            rows = [r for r in rows if r["stage"] == ("pde" if m == "error" else "flow")]
        if plots.error_sweep(rows, out / f"{cfg.id}_{m}.svg", m, cfg.id):
            written.append(out / f"{cfg.id}_{m}.svg")
    if cfg.id == "ex4_cup":
        _snapshot_rows(put("ex4_cup_snapshots.csv"), ["t", "chart", "x", "y", "z", "u"],
                       [(t, i, *X[j], u[j]) for t, i, X, u in ex["snapshots"] for j in range(len(u))])
    if cfg.id == "ex5_bunny":
        P = ex["points"]
        _snapshot_rows(put("ex5_bunny_snapshots.csv"), ["t", "x", "y", "z", "u"],
                       [(t, *P[j], u[j]) for t, u in ex["snapshots"] for j in range(len(u))])
        ex["frames"].to_csv(put("ex5_bunny_frames.csv"), P)
    if cfg.id in ("ex6_ellipsoid", "ex7_droplet"):
        models = ex["models"] if "models" in ex else {cfg.N0[-1]: ex["model"]}
        for n0, model in models.items():
            ev.save_flow(model, put(f"{cfg.id}_flow_N0_{n0}.npz"))
    if "conservation" in ex:
        ex["conservation"].to_csv(put(f"{cfg.id}_conservation.csv"))
        plots.conservation(ex["conservation"], put(f"{cfg.id}_conservation.svg"))
    if "snapshots" in ex and cfg.id == "ex7_droplet":
        sol = ex.get("solution")
        for t, fr in ex["snapshots"]:
            u = sol(t, fr.X) if sol is not None else None
            ev.export_snapshot(put(f"{cfg.id}_snapshot_t{t:g}.csv"), t, fr, u)
    return written


# ---------------------------------------------------------------- compare

def _key(row, extra):
    return tuple(str(int(float(row[k]))) for k in KEY_COLUMNS) + tuple(row[k] for k in extra)


def compare(result_path, reference_path, orders: float = 4.0):
    """One-sided check ``result <= reference * 10**orders`` per (key, metric) cell.

    Seeds sharing a key are median-aggregated. Returns ``(ok, lines)``; raises
    ``ConfigError`` when no row keys match.
    """
    res = exps.read_rows(result_path)
    ref = exps.read_rows(reference_path)
    if not res or not ref:
        raise ConfigError("empty result or reference file")
    for k in KEY_COLUMNS:
        if k not in res[0] or k not in ref[0]:
            raise ConfigError(f"key column {k!r} missing")
    extra = [k for k in EXTRA_KEYS if k in res[0] and k in ref[0]]
    metrics = [c for c in ref[0] if c in res[0] and c not in KEY_COLUMNS and c not in extra
               and not c.startswith(exps.TIMING_PREFIX) and c not in ("seed", "experiment", "rank", "residual")]
    grouped = defaultdict(lambda: defaultdict(list))
    for r in res:
        for m in metrics:
            if r.get(m, "") not in ("", "nan"):
                grouped[_key(r, extra)][m].append(float(r[m]))
    lines, ok, matched = [], True, 0
    for r in ref:
        key = _key(r, extra)
        if key not in grouped:
            continue
        matched += 1
        for m in metrics:
            if r.get(m, "") in ("", "nan") or not grouped[key][m]:
                continue
            got, want = float(np.median(grouped[key][m])), float(r[m])
            passed = np.isfinite(got) and got <= want * 10.0 ** orders
            ok &= bool(passed)
            label = ", ".join(f"{c}={v}" for c, v in zip(KEY_COLUMNS + tuple(extra), key))
            lines.append(f"{'PASS' if passed else 'FAIL'} ({label}) {m}: result {got:.3e} reference {want:.3e} "
                         f"ratio {got / want:.2e}")
    if matched == 0:
        raise ConfigError("no rows with matching keys between result and reference")
    return ok, lines


# ---------------------------------------------------------------- main

@contextlib.contextmanager
def _threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(n)):
        yield


def _build_parser():
    p = argparse.ArgumentParser(prog="surfrann", description="Random-feature least-squares PDE solver on surfaces")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, config_required):
        sp.add_argument("--config", required=config_required, help="INI file with one [experiment-id] section")
        sp.add_argument("--seed", type=int, help="override the seed(s) in the config")
        sp.add_argument("--out", default="results", help="output directory (default: results)")

    for name in SUBCOMMAND_IDS:
        common(sub.add_parser(name, help=f"run a {'/'.join(SUBCOMMAND_IDS[name])} config"), name != "sample")
    b = sub.add_parser("bench", help="run a built-in experiment (defaults or --config)")
    b.add_argument("experiment", choices=sorted(exps.EXPERIMENTS))
    common(b, False)
    c = sub.add_parser("compare", help="check a result CSV against a reference CSV")
    c.add_argument("result")
    c.add_argument("reference")
    c.add_argument("--orders", type=float, default=4.0, help="allowed orders of magnitude above reference")
    return p


def _resolve_config(args):
    if args.cmd == "bench":
        cfg = load_config(args.config) if args.config else exps.EXPERIMENTS[args.experiment][0]()
        if cfg.id != args.experiment:
            raise ConfigError(f"config section [{cfg.id}] does not match experiment {args.experiment!r}")
    else:
        cfg = load_config(args.config) if args.config else exps.SampleConfig()
        if cfg.id not in SUBCOMMAND_IDS[args.cmd]:
            raise ConfigError(f"{args.cmd} expects one of {SUBCOMMAND_IDS[args.cmd]}, got [{cfg.id}]")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = with_seed(cfg, args.seed)
    if args.cmd == "learn-flow":
        cfg = dataclasses.replace(cfg, solve_pde=False)
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    if args.cmd == "compare":
        try:
            ok, lines = compare(args.result, args.reference, args.orders)
        except (ConfigError, OSError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print("\n".join(lines))
        print("compare: " + ("PASS" if ok else "FAIL"))
        return 0 if ok else 1
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    runner = exps.run_sample if cfg.id == "sample" else exps.EXPERIMENTS[cfg.id][1]
    try:
        with _threads(), np.errstate(invalid="ignore"):
            result = runner(cfg)
            written = write_outputs(cfg, result, out)
    except (NUMERICAL_ERRORS + (NumericalFailure,)) as exc:
        out.mkdir(parents=True, exist_ok=True)
        report = out / f"{cfg.id}_failure.txt"
        report.write_text(f"{type(exc).__name__}: {exc}\n\n{dump_config(cfg)}\n{traceback.format_exc()}")
        print(f"numerical failure: {exc}; report written to {report}", file=sys.stderr)
        return 3
    except (ConfigError, CloudParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
