"""halfsync command line: data generation, training, evaluation, benchmarks.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric fault.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (CostModel, TimingRecord, capacity_table, fit_cost_model, gradient_volume_bytes,
                    iteration_time_estimate, predict_epoch_time, simulate_scaling, write_scaling_csv,
                    write_scaling_svgs)
from .collective import CommunicationError, read_rendezvous
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import save_shots
from .numerics import NumericFault, Precision

log = logging.getLogger("halfsync")

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 1, 2
BUNDLED = ("synthetic",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _setup_logging():
    level = os.environ.get("HALFSYNC_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"HALFSYNC_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def _config_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    if name in BUNDLED:
        return Path(str(resources.files("halfsync") / "configs" / f"{name}.toml"))
    raise UsageError(f"config file {name!r} not found (bundled configs: {', '.join(BUNDLED)})")


def _load(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    return load_config(_config_path(args.config), args.set or [])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(run: RunConfig, out: Path, args, command: str) -> None:
    meta = {"command": command, "version": __version__, "seed": run.seed, "data_seed": run.data.seed}
    dump_config(run, out / "manifest.toml", meta)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .data import generate

    run = _load(args)
    out = _out_dir(args)
    ds = generate(run.data.generator, run.data.seed)
    for split in ("train", "val", "test"):
        shots = ds.split(split)
        if shots:
            save_shots(out / f"{split}.shots", shots)
        print(f"{split}: {len(shots)} shots, {sum(s.disruptive for s in shots)} disruptive")
    _manifest(run, out, args, "gen-data")
    return EXIT_OK


def cmd_train(args) -> int:
    from .svg import line_plot
    from .trainer import run_rank, run_training, save_checkpoint, write_metrics_csv, write_timing_csv

    run = _load(args)
    if args.rank is not None or run.cluster.transport == "socket":
        rdv = args.rendezvous or run.cluster.rendezvous
        if args.rank is None or not rdv:
            raise UsageError("socket training needs both --rank and --rendezvous")
        endpoints = read_rendezvous(rdv)
        result = run_rank(run, args.rank, endpoints)
        if args.rank != 0:
            return EXIT_OK
    else:
        result = run_training(run)
    out = _out_dir(args)
    write_metrics_csv(out / "metrics.csv", result.history)
    write_timing_csv(out / "timing.csv", result.history)
    save_checkpoint(out / "best.ckpt", result.params)
    save_checkpoint(out / "final.ckpt", result.final_params)
    epochs = [r.epoch for r in result.history]
    (out / "training.svg").write_text(line_plot(
        {"loss": (epochs, [r.loss for r in result.history]),
         "val AUC": (epochs, [r.val_auc for r in result.history])},
        title=f"{run.policy.math.value} training", xlabel="epoch", ylabel=""))
    _manifest(run, out, args, "train")
    last = result.history[-1]
    print(f"epochs {len(result.history)}  final loss {last.loss:.4f}  final val AUC {last.val_auc:.4f}  "
          f"best epoch {result.best_epoch}")
    return EXIT_OK


def _scored(args):
    from .evaluation import predict_traces, score_shots
    from .trainer import load_checkpoint, prepare_data

    run = _load(args)
    params = load_checkpoint(args.checkpoint)
    if params.config != run.model:
        raise UsageError("checkpoint model does not match [model] in the config")
    _, _, ds = prepare_data(run)
    shots = ds.split(args.split)
    if not shots:
        raise UsageError(f"split {args.split!r} is empty")
    traces = predict_traces(params, shots, run.policy)
    return run, score_shots(traces, shots)


def cmd_evaluate(args) -> int:
    from .evaluation import roc_auc

    run, (scores, labels) = _scored(args)
    _, auc = roc_auc(scores, labels)
    out = _out_dir(args)
    with open(out / "evaluation.csv", "w") as fh:
        fh.write("split,shots,disruptive,auc\n")
        fh.write(f"{args.split},{labels.size},{int(labels.sum())},{auc!r}\n")
    _manifest(run, out, args, "evaluate")
    print(f"{args.split} AUC {auc:.4f} over {labels.size} shots")
    return EXIT_OK


def cmd_roc(args) -> int:
    from .evaluation import roc_auc, write_roc_csv
    from .svg import line_plot

    run, (scores, labels) = _scored(args)
    curve, auc = roc_auc(scores, labels)
    out = _out_dir(args)
    write_roc_csv(out / "roc.csv", curve)
    (out / "roc.svg").write_text(line_plot({f"AUC {auc:.3f}": (list(curve.fpr), list(curve.tpr))},
                                           title=f"ROC ({args.split})", xlabel="false positive rate",
                                           ylabel="true positive rate"))
    _manifest(run, out, args, "roc")
    print(f"{args.split} AUC {auc:.4f}; {len(curve.fpr)} curve points written")
    return EXIT_OK


def _measure_step_ms(run: RunConfig, repeats: int = 3) -> float:
    import time

    from .model import bprop, fprop, init_params

    rng = np.random.default_rng(run.seed)
    x = rng.standard_normal((run.batch_size, run.model.seq_len, run.model.feature_dim)).astype(np.float32)
    t = np.where(rng.random((run.batch_size, run.model.seq_len)) < 0.5, 1.0, -1.0)
    params = init_params(run.model, run.seed)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        y, cache = fprop(params, x, run.policy, train_mode=True)
        bprop(params, cache, t, run.loss_scale, run.policy)
        best = min(best, (time.perf_counter() - t0) * 1e3)
    return best


def cmd_bench_scaling(args) -> int:
    ns = [int(v) for v in args.ns.split(",")]
    if any(n < 1 for n in ns) or len(set(ns)) < 3:
        raise UsageError("--ns needs at least 3 distinct positive worker counts")
    if args.t_batch_ms is not None:
        t_batch = args.t_batch_ms
    elif args.config:
        t_batch = _measure_step_ms(_load(args))
    else:
        t_batch = 50.0
    out = _out_dir(args)
    points = simulate_scaling(ns, batches=args.batches, t_batch_ms=t_batch, latency_ms=args.latency_ms,
                              payload_size=args.payload, precision=Precision.of(args.precision))
    model = fit_cost_model([TimingRecord(p.n, p.t_batch_ms, p.t_sync_ms, args.precision) for p in points])
    write_scaling_csv(out / "scaling.csv", points)
    write_scaling_svgs(out, points, model)
    print(f"A = {model.a_ms:.3f} ms  B = {model.b_ms:.3f} ms per log2 step  R^2 = {model.r2:.4f}")
    print(f"{'N':>5} {'hops':>4} {'T_sync ms':>10} {'ratio':>8} {'T_epoch ms':>11} {'model ms':>10}")
    for p in points:
        pred = predict_epoch_time(model, p.n, args.batches)
        print(f"{p.n:>5} {p.hops:>4} {p.t_sync_ms:>10.3f} {p.ratio:>8.4f} {p.t_epoch_ms:>11.1f} {pred:>10.1f}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    vol = gradient_volume_bytes(args.npar, args.batch, args.bytes)
    secs = iteration_time_estimate(args.npar, args.batch, args.bytes, args.bw)
    print(f"net gradient {vol / 1e9:.4f} GB/iter")
    print(f"iteration time {secs:.4f} s/iter ({secs * 1e3:.0f} ms)")
    return EXIT_OK


def cmd_capacity(args) -> int:
    rows = capacity_table(args.mem)
    print(f"{'precision':>9} {'batch':>6} {'layers':>7} {'params':>12}")
    for r in rows:
        print(f"{r.precision.value:>9} {r.batch:>6} {r.layers:>7} {r.params:>12}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="halfsync", description="Mixed-precision synchronous data-parallel LSTM training.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required,
                        help="TOML run config, or the name of a bundled one (synthetic)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--out", default="out", help="output directory (default: out)")

    sp = sub.add_parser("gen-data", help="generate synthetic shots into --out")
    with_config(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train and write metrics, checkpoints and a manifest")
    with_config(sp)
    sp.add_argument("--rank", type=int, help="this process's rank in a socket cluster")
    sp.add_argument("--rendezvous", help="file with one host:port per rank")
    sp.set_defaults(fn=cmd_train)

    for name, fn, text in (("evaluate", cmd_evaluate, "AUC of a checkpoint on a split"),
                           ("roc", cmd_roc, "ROC curve (CSV and SVG) of a checkpoint on a split")):
        sp = sub.add_parser(name, help=text)
        with_config(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--split", choices=("val", "test"), default="val")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("bench-scaling", help="simulated strong-scaling sweep and cost-model fit")
    with_config(sp, required=False)
    sp.add_argument("--ns", default="1,2,4,8,16,32,64,128", help="comma-separated worker counts")
    sp.add_argument("--latency-ms", type=float, default=2.0, help="virtual latency per message")
    sp.add_argument("--t-batch-ms", type=float,
                    help="virtual compute per step (default: timed model step from --config, else 50)")
    sp.add_argument("--batches", type=int, default=256, help="mini-batches per epoch at N=1")
    sp.add_argument("--payload", type=int, default=1024, help="values allreduced per step")
    sp.add_argument("--precision", default="fp16", choices=[q.value for q in Precision])
    sp.set_defaults(fn=cmd_bench_scaling)

    sp = sub.add_parser("estimate", help="communication-bound iteration time")
    sp.add_argument("--npar", type=float, required=True, help="trainable parameters")
    sp.add_argument("--batch", type=int, required=True)
    sp.add_argument("--bytes", type=int, required=True, help="bytes per value")
    sp.add_argument("--bw", type=float, required=True, help="bandwidth in bytes/s")
    sp.set_defaults(fn=cmd_estimate)

    sp = sub.add_parser("capacity", help="model capacity that fits in device memory")
    sp.add_argument("--mem", type=float, default=16e9, help="device memory in bytes")
    sp.set_defaults(fn=cmd_capacity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _setup_logging()
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (NumericFault, CommunicationError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAULT
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
