"""Strong-scaling sweep on a virtual clock, the fitted cost model, and two
back-of-envelope sizing tools."""

from halfsync.bench import (TimingRecord, capacity_table, fit_cost_model, iteration_time_estimate,
                            predict_epoch_time, simulate_scaling)

if __name__ == "__main__":
    points = simulate_scaling([1, 2, 4, 8, 16, 32, 64], batches=256, t_batch_ms=50.0, latency_ms=2.0)
    model = fit_cost_model([TimingRecord(p.n, p.t_batch_ms, p.t_sync_ms) for p in points])
    print(f"A = {model.a_ms:.1f} ms  B = {model.b_ms:.2f} ms per doubling  R^2 = {model.r2:.4f}")
    for p in points:
        print(f"N={p.n:3d}  T_sync/T_batch {p.ratio:.3f}  epoch {p.t_epoch_ms:8.1f} ms  "
              f"model {predict_epoch_time(model, p.n, 256):8.1f} ms")

    secs = iteration_time_estimate(18.2e6, 256, 2, 6.25e9)
    print(f"\n18.2M params, batch 256, fp16 at 50 Gb/s: {secs:.3f} s per iteration")
    for row in capacity_table():
        print(f"{row.precision.value}  batch {row.batch:3d}: {row.layers:3d} layers, {row.params / 1e6:.1f}M params")
