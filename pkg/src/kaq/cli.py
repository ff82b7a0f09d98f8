"""Command-line entry point: ``kaq {generate,train,evaluate,oracle-check}``.

Set ``KAQ_NUM_THREADS`` to cap the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as kio
from .config import RunConfig, load_run_config
from .evaluation import (count_complexity, evaluate_ber, ml_detector, mmse_detector, time_forward,
                         zf_detector, ML_MAX_CANDIDATES)
from .nets import detect
from .sim import ComplexSystem, build_dataset
from .training import MODES, TrainConfig, train

log = logging.getLogger("kaq")

HISTORY_COLUMNS = ("epoch", "loss", "mse", "mmd", "accuracy")
BER_COLUMNS = ("detector", "snr_db", "ber", "ser", "bits")
COMPLEXITY_COLUMNS = ("detector", "mult_adds", "activation_bytes", "param_bytes", "host_seconds")


class CliError(Exception):
    pass


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _constellation(text: str) -> list:
    levels = _floats(text)
    # "1,3" is shorthand for the symmetric set {-3,-1,1,3}
    if all(v > 0 for v in levels):
        levels = sorted({-v for v in levels} | set(levels))
    return levels


def _csv_bytes(columns, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue().encode("utf-8")


class _Outputs:
    """Tracks written files and removes them all if the command fails."""

    def __init__(self):
        self.written = []

    def write(self, path, data: bytes):
        kio.atomic_write(path, data)
        self.written.append(Path(path))

    def rollback(self):
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


# ------------------------------------------------------------------ commands


def cmd_generate(args, out: _Outputs):
    cfg = load_run_config(args.config) if args.config else RunConfig()
    s = cfg.system
    nt = args.nt if args.nt is not None else s.nt
    nr = args.nr if args.nr is not None else s.nr
    levels = _constellation(args.constellation) if args.constellation else s.constellation
    snr_list = _floats(args.snr_list) if args.snr_list else s.snr_db
    count = args.count if args.count is not None else cfg.data.count
    seed = args.seed if args.seed is not None else cfg.data.seed
    if count < 1:
        raise CliError("count must be >= 1")
    system = ComplexSystem(nt, nr, tuple(levels), args.snr_convention or s.snr_convention)
    ds = build_dataset(system, count, snr_list, seed)
    path = args.out or cfg.paths.data
    if not path:
        raise CliError("no output path (--out)")
    out.write(path, kio.dataset_to_bytes(ds))
    print(f"wrote {len(ds)} instances M={ds.M} N={ds.N} snr_db={list(ds.snr_list)} seed={seed} -> {path}")


def cmd_train(args, out: _Outputs):
    data_path = args.data
    ds = kio.load_dataset(data_path)
    history = []
    if args.resume:
        state, config, header = kio.load_checkpoint(args.resume)
        history = list(header.get("history", []))
        if args.epochs is not None:
            config = TrainConfig(**{**config.to_dict(), "epochs": args.epochs})
    else:
        cfg = load_run_config(args.config) if args.config else None
        if cfg is None:
            cfg = RunConfig()
            cfg.system.nt, cfg.system.nr = ds.system.nt, ds.system.nr
            cfg.system.constellation = list(ds.system.constellation)
        elif (cfg.system.nt, cfg.system.nr) != (ds.system.nt, ds.system.nr):
            raise CliError(f"config system {cfg.system.nt}x{cfg.system.nr} does not match dataset "
                           f"{ds.system.nt}x{ds.system.nr}")
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
        if args.seed is not None:
            cfg.train.seed = args.seed
        config = cfg.train_config(args.mode)
        state = None
    dims = (ds.M, ds.N)
    state, new_rows = train(ds, config, state)
    history += new_rows
    ckpt = args.out
    hist_path = args.history or str(Path(ckpt).with_suffix(".history.csv"))
    out.write(ckpt, kio.checkpoint_to_bytes(state, config, dims, {"history": history}))
    out.write(hist_path, _csv_bytes(HISTORY_COLUMNS, history))
    last = history[-1] if history else {}
    print(f"trained {config.mode} {config.variant} to epoch {state.epoch}: "
          f"loss={last.get('loss', float('nan')):.6g} accuracy={last.get('accuracy', float('nan')):.4f} -> {ckpt}")


def _ml_feasible(ds) -> bool:
    return len(ds.system.constellation) ** ds.N <= ML_MAX_CANDIDATES


def cmd_evaluate(args, out: _Outputs):
    ds = kio.load_dataset(args.data)
    wanted = [d.strip().lower() for d in args.detectors.split(",") if d.strip()] if args.detectors else None
    if wanted is not None and "ml" in wanted and not _ml_feasible(ds):
        raise CliError(f"ML detection refused: search space {len(ds.system.constellation)}^{ds.N} "
                       f"exceeds {ML_MAX_CANDIDATES} candidates")
    if wanted is None:
        wanted = ["zf", "mmse"] + (["ml"] if _ml_feasible(ds) else [])
    builtin = {"zf": zf_detector, "mmse": mmse_detector, "ml": ml_detector}
    unknown = set(wanted) - set(builtin)
    if unknown:
        raise CliError(f"unknown detectors {sorted(unknown)}; choose from {sorted(builtin)}")

    detectors = []
    complexity = []
    labels = set()
    for path in args.ckpt or []:
        state, config, header = kio.load_checkpoint(path)
        dims = header.get("dims")
        if dims is not None and tuple(dims) != (ds.M, ds.N):
            raise CliError(f"checkpoint {path} expects dims {tuple(dims)}, dataset has {(ds.M, ds.N)}")
        label = config.mode if config.variant == "pgd" else f"{config.mode}-{config.variant}"
        while label in labels:
            label += "'"
        labels.add(label)
        quant = state.quant if config.mode != "fp" else None

        def run(d, params=state.params, quant=quant):
            return detect(params, d.H, d.y, quant, d.snr_linear)

        detectors.append((label, run))
        rep = count_complexity(state.params, None if quant is None else quant.bits, (ds.M, ds.N), label)
        if args.time:
            mid = float(np.median(ds.snr_linear))
            rep.host_seconds = time_forward(state.params, ds.H[:1024], ds.y[:1024], quant, mid)
        complexity.append(rep)
    detectors += [(name, builtin[name]) for name in wanted]

    rows = []
    for label, det in detectors:
        rows += evaluate_ber(det, ds, label).csv_rows()
    rows.sort(key=lambda r: (r["snr_db"], [lbl for lbl, _ in detectors].index(r["detector"])))
    out.write(args.out, _csv_bytes(BER_COLUMNS, rows))
    cpath = args.complexity_out or str(Path(args.out).with_suffix(".complexity.csv"))
    out.write(cpath, _csv_bytes(COMPLEXITY_COLUMNS, [c.csv_row() for c in complexity]))
    for r in rows:
        print(f"{r['detector']:>10s} snr={r['snr_db']:5.1f} dB  ber={r['ber']:.3e}  ser={r['ser']:.3e}")


def cmd_oracle_check(args, out: _Outputs):
    """Train a full-precision PGD-Net on a small system and compare it with ML, ZF and MMSE."""
    system = ComplexSystem(args.nt, args.nr, tuple(_constellation(args.constellation)))
    n = 2 * args.nt
    if len(system.constellation) ** n > ML_MAX_CANDIDATES:
        raise CliError("oracle-check needs a system small enough for exhaustive ML")
    train_ds = build_dataset(system, args.train_count, [args.snr], args.seed)
    test_ds = build_dataset(system, args.count, [args.snr], args.seed + 1_000_003)
    config = TrainConfig(epochs=args.epochs, mode="fp", seed=args.seed, batch_size=args.batch_size)
    state, _ = train(train_ds, config)
    detectors = {
        "ml": ml_detector,
        "pgd-net": lambda d: detect(state.params, d.H, d.y),
        "zf": zf_detector,
        "mmse": mmse_detector,
    }
    reports = {name: evaluate_ber(det, test_ds, name) for name, det in detectors.items()}
    rows = [row for rep in reports.values() for row in rep.csv_rows()]
    if args.out:
        out.write(args.out, _csv_bytes(BER_COLUMNS, rows))
    ok = True
    ml = reports["ml"].rows[0]
    for name, rep in reports.items():
        row = rep.rows[0]
        se = np.sqrt(max(row["ber"] * (1 - row["ber"]), 1e-300) / row["bits_total"])
        holds = ml["ber"] <= row["ber"] + 3 * se
        ok &= holds
        print(f"{name:>8s} ber={row['ber']:.4e} (bits={row['bits_total']})  ML<=this+3se: {'yes' if holds else 'NO'}")
    if not ok:
        raise CliError("ML dominance check failed")


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kaq", description="Kernel-based adaptive quantization for unrolled MIMO detectors")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a MIMO dataset")
    g.add_argument("--config")
    g.add_argument("--nt", type=int)
    g.add_argument("--nr", type=int)
    g.add_argument("--constellation", help="comma list of per-axis levels, e.g. -3,-1,1,3 (or 1,3)")
    g.add_argument("--snr-list", help="comma list of SNRs in dB")
    g.add_argument("--snr-convention", choices=("received", "symbol"))
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an unrolled detector")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--history", help="per-epoch CSV (default: <out>.history.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="continue training from this checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="BER sweep and complexity report")
    e.add_argument("--ckpt", action="append", help="trained checkpoint (repeatable)")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="BER CSV")
    e.add_argument("--complexity-out", help="complexity CSV (default: <out>.complexity.csv)")
    e.add_argument("--detectors", help="comma list of reference detectors: zf,mmse,ml")
    e.add_argument("--time", action="store_true", help="also record host wall-clock time per instance")
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("oracle-check", help="ML-vs-detector comparison on a small system")
    o.add_argument("--nt", type=int, default=2)
    o.add_argument("--nr", type=int, default=2)
    o.add_argument("--constellation", default="-1,1")
    o.add_argument("--snr", type=float, default=8.0)
    o.add_argument("--count", type=int, default=10_000)
    o.add_argument("--train-count", type=int, default=5_000)
    o.add_argument("--epochs", type=int, default=20)
    o.add_argument("--batch-size", type=int, default=128)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get("KAQ_NUM_THREADS")
    out = _Outputs()
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                args.func(args, out)
        else:
            args.func(args, out)
    except (CliError, ValueError, OSError, kio.FormatError) as exc:
        out.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
