"""Synchronous data-parallel SGD with parameter averaging.

Each step: every rank runs fprop/bprop on its own mini-batch with the loss
scaled by alpha; the scaled gradients are summed with a tree allreduce at the
sync precision; rank 0 divides by the contributor count and by alpha, applies
the momentum update to its master weights, and broadcasts the new weights.
After the broadcast all ranks hold bit-identical parameters.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .collective import Communicator, SocketTransport, allreduce_sum, broadcast, run_cluster
from .config import RunConfig
from .data import Chunks, Dataset, Shot, channel_stats, generate, load_shots, make_chunks, normalize, shard_epoch
from .evaluation import UndefinedAUC, evaluate_auc
from .model import Gradients, ModelConfig, Parameters, bprop, descale, fprop, hinge_loss, init_params
from .numerics import CastStats, NumericFault, Precision, cast, wider
from .optim import SgdMomentumState, apply_update, rate_for_epoch

__all__ = [
    "EpochRecord",
    "StepStats",
    "RankState",
    "TrainResult",
    "prepare_data",
    "train_step",
    "run_training",
    "run_rank",
    "write_metrics_csv",
    "write_timing_csv",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    loss: float  # unscaled hinge loss, mean over all ranks' steps
    val_auc: float
    lr: float
    wall_ms: float
    overflow_count: int
    underflow_count: int
    wire_zero_count: int
    t_batch_ms: float = 0.0
    t_sync_ms: float = 0.0


@dataclass
class StepStats:
    loss: float
    casts: CastStats = field(default_factory=CastStats)
    wire_zeros: int = 0
    t_batch_ms: float = 0.0
    t_sync_ms: float = 0.0


@dataclass
class RankState:
    """What a rank carries between steps.

    ``working`` (sync precision) is identical on all ranks. ``master`` and
    ``opt`` (update precision) only exist on rank 0.
    """

    working: np.ndarray
    master: np.ndarray | None = None
    opt: SgdMomentumState | None = None


@dataclass
class TrainResult:
    history: list[EpochRecord]
    params: Parameters  # best validation AUC
    final_params: Parameters
    best_epoch: int
    error: Exception | None = None


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def train_step(comm: Communicator, state: RankState, run: RunConfig, x, t, lr: float,
               step_seed: int = 0) -> StepStats:
    """One synchronous step; updates ``state`` in place on every rank."""
    cfg, pol, alpha = run.model, run.policy, run.loss_scale
    stats = StepStats(0.0)
    t0 = time.perf_counter()
    params = Parameters(cfg, state.working)
    y, cache = fprop(params, x, pol, train_mode=True, seed=step_seed)
    stats.loss = hinge_loss(y, t, alpha, cfg.l2, params) / alpha
    grads = bprop(params, cache, t, alpha, pol)
    wire = cast(grads.values, pol.sync, stats.casts)
    stats.wire_zeros = int(np.count_nonzero(wire == 0))
    t1 = time.perf_counter()

    total = allreduce_sum(comm, wire, pol.sync, pol.accumulator)
    new_working = None
    if comm.rank == 0:
        prec = wider(Precision.FP32, pol.update)
        avg = total.astype(prec.dtype) / prec.dtype.type(comm.size)
        g = descale(Gradients(cfg, avg, scale=alpha), prec)
        if not np.all(np.isfinite(g.values)):
            bad = int(np.count_nonzero(~np.isfinite(g.values)))
            raise NumericFault(f"{bad} non-finite gradient coordinates after descaling; loss scale "
                               f"{alpha} overflows {pol.sync.value} sync, try a smaller one")
        state.master, state.opt = apply_update(state.master, g.values, state.opt, lr, pol.update)
        new_working = cast(state.master, pol.sync)
    state.working = broadcast(comm, new_working, pol.sync, root=0)
    stats.t_batch_ms = (t1 - t0) * 1e3
    stats.t_sync_ms = (time.perf_counter() - t1) * 1e3
    return stats


def _rank_main(comm: Communicator, run: RunConfig, chunks: Chunks, val_shots: list[Shot]):
    pol = run.policy
    n = comm.size
    if comm.rank == 0:
        init = init_params(run.model, run.seed).values
        master = cast(init, pol.update)
        state = RankState(None, master, SgdMomentumState.zeros(master.size, run.momentum, pol.update))
        first = cast(master, pol.sync)
    else:
        state, first = RankState(None), None
    state.working = broadcast(comm, first, pol.sync, root=0)

    history: list[EpochRecord] = []
    best = (-np.inf, -1, None)
    stale = 0
    for epoch in range(run.epochs):
        t_epoch = time.perf_counter()
        lr = rate_for_epoch(run.schedule, epoch, n)
        streams = shard_epoch(len(chunks), run.batch_size, n, _seed(run.seed, epoch, 0xEC))
        loss = 0.0
        casts = CastStats()
        zeros = 0
        t_batch = t_sync = 0.0
        for step, idx in enumerate(streams[comm.rank]):
            x, t = chunks.batch(idx)
            st = train_step(comm, state, run, x, t, lr, _seed(run.seed, epoch, step, comm.rank))
            loss += st.loss
            casts.add(st.casts)
            zeros += st.wire_zeros
            t_batch += st.t_batch_ms
            t_sync += st.t_sync_ms
        steps = len(streams[comm.rank])
        tally = allreduce_sum(comm, np.array([loss, casts.overflow, casts.underflow, zeros]),
                              Precision.FP64, Precision.FP64)

        stop = np.zeros(1)
        if comm.rank == 0:
            params = Parameters(run.model, state.working)
            try:
                _, auc = evaluate_auc(params, val_shots, pol)
            except UndefinedAUC:
                log.warning("validation split lacks one class; AUC undefined")
                auc = float("nan")
            rec = EpochRecord(epoch, tally[0] / (steps * n), auc, lr, (time.perf_counter() - t_epoch) * 1e3,
                              int(tally[1]), int(tally[2]), int(tally[3]), t_batch / steps, t_sync / steps)
            history.append(rec)
            log.info("epoch %d loss %.4f val_auc %.4f lr %.3g", epoch, rec.loss, auc, lr)
            if auc > best[0]:
                best = (auc, epoch, state.master.copy())
                stale = 0
            else:
                stale += 1
            if run.patience and stale >= run.patience:
                stop[0] = 1.0
        if broadcast(comm, stop, Precision.FP64)[0]:
            break

    if comm.rank != 0:
        return None
    best_values = best[2] if best[2] is not None else state.master
    return TrainResult(history, Parameters(run.model, best_values.copy()),
                       Parameters(run.model, state.master.copy()), best[1])


def prepare_data(run: RunConfig, dataset: Dataset | None = None) -> tuple[Chunks, list[Shot], Dataset]:
    """Normalize with train statistics and cut training chunks.

    Returns (training chunks, normalized validation shots, normalized dataset).
    """
    if dataset is None:
        if run.data.dir:
            d = Path(run.data.dir)
            dataset = Dataset(load_shots(d / "train.shots"), load_shots(d / "val.shots"),
                              load_shots(d / "test.shots") if (d / "test.shots").exists() else [])
        else:
            dataset = generate(run.data.generator, run.data.seed)
    if not dataset.train or not dataset.val:
        raise ValueError("training and validation splits must be non-empty")
    stats = channel_stats(dataset.train)
    norm = Dataset(normalize(dataset.train, stats), normalize(dataset.val, stats),
                   normalize(dataset.test, stats) if dataset.test else [])
    chunks = make_chunks(norm.train, run.model.seq_len, run.horizon)
    return chunks, norm.val, norm


def run_training(run: RunConfig, dataset: Dataset | None = None) -> TrainResult:
    """Train on an in-process cluster of ``run.cluster.n`` thread ranks."""
    chunks, val, _ = prepare_data(run, dataset)
    results = run_cluster(run.cluster.n, _rank_main, latency_ms=run.cluster.latency_ms,
                          timeout_ms=run.cluster.timeout_ms,
                          args_per_rank=[(run, chunks, val)] * run.cluster.n)
    return results[0]


def run_rank(run: RunConfig, rank: int, endpoints, dataset: Dataset | None = None) -> TrainResult | None:
    """Run one rank of a socket cluster; returns the result on rank 0 only."""
    if len(endpoints) != run.cluster.n:
        raise ValueError(f"rendezvous lists {len(endpoints)} endpoints for {run.cluster.n} ranks")
    chunks, val, _ = prepare_data(run, dataset)
    transport = SocketTransport(rank, endpoints, timeout_s=run.cluster.timeout_ms / 1000.0)
    comm = Communicator(transport, timeout_ms=run.cluster.timeout_ms)
    try:
        return _rank_main(comm, run, chunks, val)
    finally:
        comm.close()


# ---------------------------------------------------------------------------
# outputs

_METRIC_COLS = ("epoch", "loss", "val_auc", "lr", "overflow_count", "underflow_count", "wire_zero_count")


def write_metrics_csv(path, history: list[EpochRecord]) -> None:
    """Deterministic per-epoch metrics (no wall-clock columns)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_METRIC_COLS)
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.val_auc), repr(r.lr), r.overflow_count,
                        r.underflow_count, r.wire_zero_count])


def write_timing_csv(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_ms", "t_batch_ms", "t_sync_ms"])
        for r in history:
            w.writerow([r.epoch, f"{r.wall_ms:.3f}", f"{r.t_batch_ms:.3f}", f"{r.t_sync_ms:.3f}"])


_CK_MAGIC = b"HSCK"
_CK_HEAD = struct.Struct("<4sHI")


def save_checkpoint(path, params: Parameters) -> None:
    """Layout header (JSON) followed by the weights as little-endian fp32."""
    header = json.dumps({
        "config": asdict(params.config),
        "layout": [[name, list(shape)] for name, (_, shape) in params.layout],
    }, sort_keys=True).encode()
    values = params.values.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_CK_HEAD.pack(_CK_MAGIC, 1, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def load_checkpoint(path) -> Parameters:
    buf = Path(path).read_bytes()
    magic, version, hlen = _CK_HEAD.unpack_from(buf)
    if magic != _CK_MAGIC or version != 1:
        raise ValueError(f"{path}: not a checkpoint")
    pos = _CK_HEAD.size
    header = json.loads(buf[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    params = Parameters(ModelConfig(**header["config"]), values)
    stored = [[n, list(s)] for n, (_, s) in params.layout]
    if stored != header["layout"]:
        raise ValueError(f"{path}: layout header does not match the model config")
    return params
