"""Loss scaling keeps small gradients alive on an fp16 wire."""

import numpy as np

from halfsync.model import ModelConfig, bprop, descale, fprop, init_params
from halfsync.numerics import CastStats, Precision, PrecisionPolicy, cast

if __name__ == "__main__":
    cfg = ModelConfig(feature_dim=4, hidden=16, n_lstm_layers=1, fc_hidden=16, seq_len=32, l2=0.0)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 32, 4)).astype(np.float32)
    t = -np.ones((8, 32))
    policy = PrecisionPolicy.named("fp32")
    y, cache = fprop(params, x, policy)

    ref = descale(bprop(params, cache, t, 1.0, policy)).values
    tiny = ref * 1e-4  # pretend the gradients are this small late in training
    print(f"{tiny.size} gradient values, median |g| = {np.median(np.abs(tiny[tiny != 0])):.2e}")
    for alpha in (1.0, 1e2, 1e4):
        stats = CastStats()
        wire = cast(tiny * alpha, Precision.FP16, stats)
        back = wire.astype(np.float64) / alpha
        lost = np.count_nonzero((wire == 0) & (tiny != 0))
        err = np.max(np.abs(back - tiny)) / np.max(np.abs(tiny))
        print(f"alpha {alpha:>8g}: flushed to zero {lost:5d}, max rel error {err:.2e}, overflow {stats.overflow}")
