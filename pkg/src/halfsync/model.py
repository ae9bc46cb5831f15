"""Stacked LSTM + per-timestep fully connected disruptivity head.

The network is LSTM x n -> FC(ReLU) -> linear(1), applied to every timestep
of a (batch, time, feature) input. All products run through
:func:`halfsync.numerics.matmul` so the precision policy governs rounding and
accumulation. Gate order inside each 4h block is input, forget, candidate,
output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .numerics import NumericFault, Precision, PrecisionPolicy, carrier, cast, matmul, quantize, round_half, wider

__all__ = [
    "ModelConfig",
    "Layout",
    "Parameters",
    "Gradients",
    "ForwardCache",
    "count_params",
    "init_params",
    "fprop",
    "hinge_loss",
    "bprop",
    "descale",
]


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    hidden: int = 200
    n_lstm_layers: int = 2
    fc_hidden: int = 200
    seq_len: int = 128
    output_dim: int = 1
    l2: float = 0.0
    dropout_keep: float = 1.0

    def __post_init__(self):
        for name in ("feature_dim", "hidden", "n_lstm_layers", "fc_hidden", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.output_dim != 1:
            raise ValueError("output_dim must be 1 for the disruptivity head")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must be in (0, 1]")


def count_params(config: ModelConfig) -> int:
    d, h, fc = config.feature_dim, config.hidden, config.fc_hidden
    n = 4 * (d * h + h * h + h)
    n += (config.n_lstm_layers - 1) * 4 * (h * h + h * h + h)
    n += h * fc + fc
    n += fc * 1 + 1
    return n


class Layout:
    """Maps named weight blocks to slices of the flat parameter vector."""

    def __init__(self, config: ModelConfig):
        h = config.hidden
        blocks = []
        for layer in range(config.n_lstm_layers):
            fan_in = config.feature_dim if layer == 0 else h
            blocks += [
                (f"lstm{layer}.W", (fan_in, 4 * h)),
                (f"lstm{layer}.U", (h, 4 * h)),
                (f"lstm{layer}.b", (4 * h,)),
            ]
        blocks += [
            ("fc.W", (h, config.fc_hidden)),
            ("fc.b", (config.fc_hidden,)),
            ("out.W", (config.fc_hidden, 1)),
            ("out.b", (1,)),
        ]
        self.entries: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in blocks:
            self.entries[name] = (offset, shape)
            offset += int(np.prod(shape))
        self.size = offset

    def __iter__(self):
        return iter(self.entries.items())

    def __eq__(self, other):
        return isinstance(other, Layout) and self.entries == other.entries

    def slice(self, name: str) -> slice:
        offset, shape = self.entries[name]
        return slice(offset, offset + int(np.prod(shape)))

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        return flat[self.slice(name)].reshape(self.entries[name][1])

    def is_weight(self, name: str) -> bool:
        return not name.endswith(".b")


@dataclass
class Parameters:
    config: ModelConfig
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} values, got {self.values.shape}")

    @cached_property
    def layout(self) -> Layout:
        return Layout(self.config)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layout.view(self.values, name)

    def astype(self, precision: Precision) -> "Parameters":
        return Parameters(self.config, cast(self.values, precision))

    def copy(self) -> "Parameters":
        return Parameters(self.config, self.values.copy())


@dataclass
class Gradients:
    """Flat gradient congruent with a :class:`Parameters` layout.

    ``scale`` is the loss-scale factor still multiplied into ``values``.
    """

    config: ModelConfig
    values: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("gradient scale must be positive")

    @cached_property
    def layout(self) -> Layout:
        return Layout(self.config)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layout.view(self.values, name)


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget biases 1, other biases 0."""
    rng = np.random.default_rng(seed)
    layout = Layout(config)
    values = np.zeros(layout.size, dtype=np.float64)
    h = config.hidden
    for name, (offset, shape) in layout:
        n = int(np.prod(shape))
        if layout.is_weight(name):
            bound = 1.0 / np.sqrt(shape[0])
            values[offset:offset + n] = rng.uniform(-bound, bound, size=n)
        elif name.startswith("lstm"):
            values[offset + h:offset + 2 * h] = 1.0
    return Parameters(config, values)


# ---------------------------------------------------------------------------
# forward


@dataclass
class _LayerCache:
    x: np.ndarray  # (B, T, in) layer input
    h_in: np.ndarray  # (B, T, h) masked previous hidden state fed to U
    gates: np.ndarray  # (B, T, 4h) post-activation i, f, g, o
    c: np.ndarray  # (B, T, h)
    c_prev: np.ndarray  # (B, T, h)
    tanh_c: np.ndarray  # (B, T, h)
    mask: np.ndarray | None  # (B, h) recurrent dropout mask


@dataclass
class ForwardCache:
    config: ModelConfig
    policy: PrecisionPolicy
    layers: list = field(default_factory=list)
    top: np.ndarray | None = None  # (B*T, h) last LSTM output
    fc_pre: np.ndarray | None = None  # (B*T, fc)
    fc_act: np.ndarray | None = None  # (B*T, fc)
    y: np.ndarray | None = None  # (B, T, 1)


def _rounder(precision: Precision):
    """Rounding applied after each elementwise op on carrier arrays.

    float32/float64 arithmetic already rounds to fp32/fp64; fp16 values live
    in float32 and need an explicit round after every operation.
    """
    if precision == Precision.FP16:
        return round_half
    return lambda v: v


def _act(fn, x, q):
    with np.errstate(over="ignore"):
        return q(fn(x.astype(np.float64)).astype(np.float32 if x.dtype == np.float32 else np.float64))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _check_nan(arr: np.ndarray, where: str) -> None:
    """arr is (B, T, ...); report the first timestep holding a NaN."""
    bad = np.isnan(arr)
    if bad.any():
        t = int(np.nonzero(bad.reshape(arr.shape[0], arr.shape[1], -1).any(axis=(0, 2)))[0][0])
        raise NumericFault(f"NaN in {where} at timestep {t}")


def fprop(params: Parameters, batch, policy: PrecisionPolicy, train_mode: bool = False,
          seed: int = 0) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass over a (B, T, D) batch; returns (B, T, 1) outputs and the cache."""
    cfg = params.config
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[2] != cfg.feature_dim:
        raise ValueError(f"batch shape {batch.shape} does not match feature_dim {cfg.feature_dim}")
    dt = carrier(policy.math)
    q = _rounder(policy.math)
    B, T, _ = batch.shape
    h = cfg.hidden
    p = Parameters(cfg, quantize(params.values, policy.math))
    rng = np.random.default_rng(seed)
    cache = ForwardCache(cfg, policy)

    x = quantize(batch, policy.math)
    for layer in range(cfg.n_lstm_layers):
        W, U, b = p[f"lstm{layer}.W"], p[f"lstm{layer}.U"], p[f"lstm{layer}.b"]
        mask = None
        if train_mode and cfg.dropout_keep < 1.0:
            keep = rng.random((B, h)) < cfg.dropout_keep
            mask = quantize(keep / cfg.dropout_keep, policy.math)
        zx = q(matmul(x.reshape(B * T, -1), W, policy).reshape(B, T, 4 * h) + b)
        gates = np.empty((B, T, 4 * h), dtype=dt)
        c_all = np.empty((B, T, h), dtype=dt)
        c_prev_all = np.empty((B, T, h), dtype=dt)
        h_in_all = np.empty((B, T, h), dtype=dt)
        tanh_all = np.empty((B, T, h), dtype=dt)
        out = np.empty((B, T, h), dtype=dt)
        h_t = np.zeros((B, h), dtype=dt)
        c_t = np.zeros((B, h), dtype=dt)
        for t in range(T):
            h_in = q(h_t * mask) if mask is not None else h_t
            z = q(zx[:, t] + matmul(h_in, U, policy))
            i = _act(_sigmoid, z[:, :h], q)
            f = _act(_sigmoid, z[:, h:2 * h], q)
            g = _act(np.tanh, z[:, 2 * h:3 * h], q)
            o = _act(_sigmoid, z[:, 3 * h:], q)
            c_prev_all[:, t] = c_t
            c_t = q(q(f * c_t) + q(i * g))
            tc = _act(np.tanh, c_t, q)
            h_t = q(o * tc)
            gates[:, t] = np.concatenate([i, f, g, o], axis=1)
            c_all[:, t] = c_t
            h_in_all[:, t] = h_in
            tanh_all[:, t] = tc
            out[:, t] = h_t
        _check_nan(out, f"LSTM layer {layer}")
        cache.layers.append(_LayerCache(x, h_in_all, gates, c_all, c_prev_all, tanh_all, mask))
        x = out

    top = x.reshape(B * T, h)
    fc_pre = q(matmul(top, p["fc.W"], policy) + p["fc.b"])
    fc_act = np.maximum(fc_pre, 0).astype(dt)
    y = q(matmul(fc_act, p["out.W"], policy) + p["out.b"]).reshape(B, T, 1)
    _check_nan(fc_act.reshape(B, T, -1), "FC layer")
    _check_nan(y, "output head")
    cache.top, cache.fc_pre, cache.fc_act, cache.y = top, fc_pre, fc_act, y
    return y, cache


def hinge_loss(y, t, alpha: float, l2: float, params: Parameters | None = None) -> float:
    """alpha * (mean over B*T of max(0, 1 - t*y) + l2 * sum of squared weights)."""
    if not alpha > 0:
        raise ValueError("loss scale must be positive")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if y.shape != t.shape:
        raise ValueError(f"target shape {t.shape} does not match output shape {y.shape}")
    loss = np.mean(np.maximum(0.0, 1.0 - t * y))
    if l2 and params is not None:
        loss += l2 * sum(float(np.sum(params[name].astype(np.float64) ** 2))
                         for name, _ in params.layout if params.layout.is_weight(name))
    return float(alpha * loss)


def bprop(params: Parameters, cache: ForwardCache, targets, alpha: float,
          policy: PrecisionPolicy | None = None) -> Gradients:
    """Backpropagation through time of the alpha-scaled hinge loss."""
    cfg = params.config
    if cache.config != cfg:
        raise ValueError("forward cache was produced for a different model config")
    if not alpha > 0:
        raise ValueError("loss scale must be positive")
    policy = policy or cache.policy
    dt = carrier(policy.math)
    q = _rounder(policy.math)
    y = cache.y
    B, T, _ = y.shape
    h = cfg.hidden
    targets = np.asarray(targets).reshape(B, T, 1)
    p = Parameters(cfg, quantize(params.values, policy.math))
    layout = params.layout
    grad = {}

    def mm(a, b):
        return matmul(a, b, policy)

    def colsum(a):
        return mm(np.ones((1, a.shape[0]), dtype=dt), a).reshape(-1)

    active = (1.0 - targets.astype(np.float64) * y.astype(np.float64)) > 0
    dy = quantize(np.where(active, -targets.astype(np.float64), 0.0) * (alpha / (B * T)),
                  policy.math).reshape(B * T, 1)

    grad["out.W"] = mm(cache.fc_act.T, dy)
    grad["out.b"] = colsum(dy)
    d_act = mm(dy, p["out.W"].T)
    d_pre = np.where(cache.fc_pre > 0, d_act, 0).astype(dt)
    grad["fc.W"] = mm(cache.top.T, d_pre)
    grad["fc.b"] = colsum(d_pre)
    d_out = mm(d_pre, p["fc.W"].T).reshape(B, T, h)

    for layer in reversed(range(cfg.n_lstm_layers)):
        lc = cache.layers[layer]
        W, U = p[f"lstm{layer}.W"], p[f"lstm{layer}.U"]
        dz_all = np.empty((B, T, 4 * h), dtype=dt)
        dh_next = np.zeros((B, h), dtype=dt)
        dc_next = np.zeros((B, h), dtype=dt)
        for t in reversed(range(T)):
            g4 = lc.gates[:, t]
            i, f, g, o = g4[:, :h], g4[:, h:2 * h], g4[:, 2 * h:3 * h], g4[:, 3 * h:]
            tc = lc.tanh_c[:, t]
            dh = q(d_out[:, t] + dh_next)
            do = q(dh * tc)
            dc = q(dc_next + q(q(dh * o) * q(1 - q(tc * tc))))
            di = q(dc * g)
            dg = q(dc * i)
            df = q(dc * lc.c_prev[:, t])
            dc_next = q(dc * f)
            dz = np.concatenate([
                q(q(di * i) * q(1 - i)),
                q(q(df * f) * q(1 - f)),
                q(dg * q(1 - q(g * g))),
                q(q(do * o) * q(1 - o)),
            ], axis=1)
            dz_all[:, t] = dz
            dh_next = mm(dz, U.T)
            if lc.mask is not None:
                dh_next = q(dh_next * lc.mask)
        dz2 = dz_all.reshape(B * T, 4 * h)
        grad[f"lstm{layer}.W"] = mm(lc.x.reshape(B * T, -1).T, dz2)
        grad[f"lstm{layer}.U"] = mm(lc.h_in.reshape(B * T, h).T, dz2)
        grad[f"lstm{layer}.b"] = colsum(dz2)
        if layer > 0:
            d_out = mm(dz2, W.T).reshape(B, T, h)

    flat = np.zeros(layout.size, dtype=dt)
    for name, _ in layout:
        g = grad[name].reshape(-1)
        if cfg.l2 and layout.is_weight(name):
            g = q(g + q(dt.type(2 * alpha * cfg.l2) * p[name].reshape(-1)))
        flat[layout.slice(name)] = g
    return Gradients(cfg, flat, scale=float(alpha))


def descale(g: Gradients, precision: Precision | None = None) -> Gradients:
    """Divide out the loss scale at fp32 or wider."""
    precision = wider(Precision.FP32, precision or Precision.FP32, Precision.of(g.values.dtype))
    values = g.values.astype(precision.dtype) / precision.dtype.type(g.scale)
    return Gradients(g.config, values, scale=1.0)
