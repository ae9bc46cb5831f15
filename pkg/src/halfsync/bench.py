"""Strong-scaling cost model, iteration-time estimate and memory capacity table.

The epoch-time model is T_epoch(N) = (batches / N) * (A + B * log2 N): A is
the per-step compute time, which stays constant as workers are added, and
B * ceil(log2 N) is the tree synchronization time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .collective import allreduce_sum, ceil_log2, run_cluster
from .model import ModelConfig, count_params
from .numerics import Precision
from .svg import line_plot

__all__ = [
    "TimingRecord",
    "CostModel",
    "CapacityRow",
    "fit_cost_model",
    "predict_epoch_time",
    "iteration_time_estimate",
    "gradient_volume_bytes",
    "capacity_table",
    "ScalingPoint",
    "simulate_scaling",
    "write_scaling_csv",
    "write_scaling_svgs",
    "REFERENCE_CAPACITY",
]


@dataclass(frozen=True)
class TimingRecord:
    n: int
    t_batch_ms: float
    t_sync_ms: float
    precision: str = "fp32"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("N must be >= 1")
        if self.t_batch_ms < 0 or self.t_sync_ms < 0:
            raise ValueError("times must be non-negative")


@dataclass(frozen=True)
class CostModel:
    a_ms: float
    b_ms: float
    r2: float = 1.0


def fit_cost_model(records: list[TimingRecord]) -> CostModel:
    """A = mean T_batch; B = least-squares slope of T_sync on ceil(log2 N) through 0."""
    ns = {r.n for r in records}
    if len(ns) < 3:
        raise ValueError(f"need records for at least 3 distinct N, got {sorted(ns)}")
    tb = np.array([r.t_batch_ms for r in records], dtype=np.float64)
    ts = np.array([r.t_sync_ms for r in records], dtype=np.float64)
    x = np.array([ceil_log2(r.n) for r in records], dtype=np.float64)
    a = float(tb.mean())
    sxx = float(x @ x)
    b = max(float(x @ ts) / sxx, 0.0) if sxx > 0 else 0.0
    ss_res = float(np.sum((ts - b * x) ** 2))
    ss_tot = float(np.sum((ts - ts.mean()) ** 2))
    if ss_tot == 0:
        r2 = 1.0 if ss_res == 0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return CostModel(a, b, r2)


def predict_epoch_time(model: CostModel, n: int, batches: int) -> float:
    """(batches / N) * (A + B * log2 N), in ms; ``batches`` counts steps at N = 1."""
    if n < 1:
        raise ValueError("N must be >= 1")
    return batches / n * (model.a_ms + model.b_ms * math.log2(n))


def gradient_volume_bytes(n_par: float, batch: int, nbytes: int) -> float:
    """Net gradient per iteration as n_par * batch * bytes per value.

    Counting the batch size here is unusual for a gradient volume; it is kept
    because it reproduces the published ~9.4 GB figure.
    """
    if n_par <= 0 or batch <= 0 or nbytes <= 0:
        raise ValueError("inputs must be positive")
    return float(n_par) * batch * nbytes


def iteration_time_estimate(n_par: float, batch: int, nbytes: int, bandwidth: float) -> float:
    """Seconds per iteration when gradient traffic is the bottleneck."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return gradient_volume_bytes(n_par, batch, nbytes) / bandwidth


# ---------------------------------------------------------------------------
# capacity


# (precision, batch, layers) of the published capacity table
REFERENCE_CAPACITY = [
    (Precision.FP64, 256, 15),
    (Precision.FP32, 256, 29),
    (Precision.FP16, 256, 58),
    (Precision.FP64, 64, 58),
    (Precision.FP32, 64, 118),
    (Precision.FP16, 64, 234),
]

_CALIB_MEMORY = 16e9
_CALIB_UNITS = 29 * 4 * 256  # layers * bytes * batch of the FP32 / 256 row


@dataclass(frozen=True)
class CapacityRow:
    precision: Precision
    batch: int
    layers: int
    params: int


def capacity_table(memory_bytes: float = 16e9, base: ModelConfig | None = None,
                   cases=None) -> list[CapacityRow]:
    """Deepest stack of LSTM layers that fits in device memory.

    Memory is modeled as activation dominated: each layer costs
    bytes * batch * (constant), so layers = C / (bytes * batch) with C fixed
    by the FP32 / batch-256 / 29-layer configuration at 16 GB and scaled
    linearly with memory. Layer counts are rounded to the nearest integer.
    """
    base = base or ModelConfig(feature_dim=9, hidden=200, n_lstm_layers=1, fc_hidden=200, seq_len=128)
    cases = cases or [(p, b) for p, b, _ in REFERENCE_CAPACITY]
    c = _CALIB_UNITS * memory_bytes / _CALIB_MEMORY
    rows = []
    for prec, batch in cases:
        prec = Precision.of(prec)
        layers = int(math.floor(c / (prec.nbytes * batch) + 0.5))
        params = count_params(_with_layers(base, layers)) if layers >= 1 else 0
        rows.append(CapacityRow(prec, batch, layers, params))
    return rows


def _with_layers(cfg: ModelConfig, layers: int) -> ModelConfig:
    return ModelConfig(cfg.feature_dim, cfg.hidden, layers, cfg.fc_hidden, cfg.seq_len)


# ---------------------------------------------------------------------------
# simulated scaling runs


@dataclass(frozen=True)
class ScalingPoint:
    n: int
    t_batch_ms: float
    t_sync_ms: float
    t_epoch_ms: float
    hops: int
    steps: int

    @property
    def ratio(self) -> float:
        return self.t_sync_ms / self.t_batch_ms if self.t_batch_ms else math.inf


def _scaling_rank(comm, steps, t_batch_ms, payload, precision):
    # every step starts from a common virtual time 0, as after a barrier;
    # the step ends when the slowest rank holds the reduced result
    durations = []
    for _ in range(steps):
        comm.clock = 0.0
        comm.advance(t_batch_ms)
        allreduce_sum(comm, payload, precision, Precision.FP32)
        durations.append(comm.clock)
    return durations, comm.timings[-1].reduce_hops


def simulate_scaling(ns, *, batches: int = 128, t_batch_ms: float = 50.0, latency_ms: float = 2.0,
                     payload_size: int = 1024, precision: Precision = Precision.FP16,
                     bandwidth_bytes_per_ms: float = math.inf) -> list[ScalingPoint]:
    """Strong-scaling sweep on the in-process cluster with a virtual clock.

    ``batches`` mini-batch steps per epoch at N = 1 are split over N ranks.
    Compute is charged as ``t_batch_ms`` of virtual time per step; each step
    then allreduces ``payload_size`` values. A step lasts until the last
    rank has the result, so T_sync covers both tree phases.
    """
    payload = np.linspace(-1, 1, payload_size)
    points = []
    for n in ns:
        steps = max(1, batches // n)
        res = run_cluster(n, _scaling_rank, latency_ms=latency_ms,
                          bandwidth_bytes_per_ms=bandwidth_bytes_per_ms,
                          args_per_rank=[(steps, t_batch_ms, payload, precision)] * n)
        step_ms = np.max([r[0] for r in res], axis=0)
        sync = float(np.mean(step_ms)) - t_batch_ms
        points.append(ScalingPoint(n, t_batch_ms, sync, float(np.sum(step_ms)), res[0][1], steps))
    return points


def write_scaling_csv(path, points: list[ScalingPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "t_batch_ms", "t_sync_ms", "ratio", "t_epoch_ms"])
        for p in points:
            w.writerow([p.n, f"{p.t_batch_ms:.6g}", f"{p.t_sync_ms:.6g}", f"{p.ratio:.6g}",
                        f"{p.t_epoch_ms:.6g}"])


def write_scaling_svgs(out_dir, points: list[ScalingPoint], model: CostModel | None = None) -> list:
    out_dir = Path(out_dir)
    ns = [p.n for p in points]
    epoch = {"measured": (ns, [p.t_epoch_ms for p in points])}
    if model is not None and points:
        batches = points[0].steps * points[0].n
        epoch["model"] = (ns, [predict_epoch_time(model, n, batches) for n in ns])
    paths = [out_dir / "t_epoch.svg", out_dir / "sync_ratio.svg"]
    paths[0].write_text(line_plot(epoch, title="Epoch time", xlabel="workers N", ylabel="ms", logx=True))
    paths[1].write_text(line_plot({"T_sync / T_batch": (ns, [p.ratio for p in points])},
                                  title="Synchronization vs computation", xlabel="workers N",
                                  ylabel="ratio", logx=True))
    return paths
