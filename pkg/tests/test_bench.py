import csv
import math

import pytest

from halfsync.bench import (REFERENCE_CAPACITY, CostModel, TimingRecord, capacity_table, fit_cost_model,
                            gradient_volume_bytes, iteration_time_estimate, predict_epoch_time,
                            simulate_scaling, write_scaling_csv, write_scaling_svgs)
from halfsync.numerics import Precision


class TestFit:
    def test_noiseless(self):
        recs = [TimingRecord(n, 40.0, 5 * math.log2(n)) for n in (2, 4, 8, 16)]
        m = fit_cost_model(recs)
        assert m.a_ms == 40.0 and m.b_ms == pytest.approx(5.0, rel=1e-15) and m.r2 == pytest.approx(1.0)

    def test_zero_sync(self):
        m = fit_cost_model([TimingRecord(n, 10.0, 0.0) for n in (1, 2, 4)])
        assert m.b_ms == 0.0 and m.r2 == 1.0

    def test_needs_three_sizes(self):
        with pytest.raises(ValueError):
            fit_cost_model([TimingRecord(2, 1, 1), TimingRecord(4, 1, 2)])
        with pytest.raises(ValueError):
            TimingRecord(0, 1, 1)


class TestPredict:
    def test_example(self):
        assert predict_epoch_time(CostModel(100, 10), 8, 80) == 1300.0

    def test_single_worker_and_perfect_scaling(self):
        m = CostModel(7.0, 3.0)
        assert predict_epoch_time(m, 1, 50) == 350.0
        flat = CostModel(7.0, 0.0)
        assert predict_epoch_time(flat, 10, 50) == 35.0


class TestEstimate:
    def test_published_example(self):
        assert iteration_time_estimate(18.2e6, 256, 2, 6.25e9) == pytest.approx(1.4909, abs=1e-4)
        assert gradient_volume_bytes(18.2e6, 256, 2) == pytest.approx(9.3184e9)

    def test_unit_and_proportionality(self):
        assert iteration_time_estimate(1, 1, 1, 1) == 1.0
        base = iteration_time_estimate(1e6, 32, 2, 1e9)
        assert iteration_time_estimate(2e6, 32, 2, 1e9) == pytest.approx(2 * base)
        assert iteration_time_estimate(1e6, 32, 4, 1e9) == pytest.approx(2 * base)
        assert iteration_time_estimate(1e6, 32, 2, 2e9) == pytest.approx(base / 2)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            iteration_time_estimate(1, 1, 1, 0)


class TestCapacity:
    def test_rows(self):
        rows = {(r.precision, r.batch): r.layers for r in capacity_table()}
        assert rows[(Precision.FP16, 256)] == 58 and rows[(Precision.FP64, 64)] == 58
        assert rows[(Precision.FP16, 64)] == 232
        for prec, batch, published in REFERENCE_CAPACITY:
            assert abs(rows[(prec, batch)] - published) / published <= 0.02

    def test_memory_scaling(self):
        half = capacity_table(8e9, cases=[(Precision.FP16, 256)])[0]
        assert half.layers == 29 and half.params > 0


class TestSimulation:
    def test_log_scaling_of_sync(self):
        pts = simulate_scaling([1, 2, 4, 8, 16], batches=32, latency_ms=2.0, payload_size=16)
        assert [p.hops for p in pts] == [0, 1, 2, 3, 4]
        for p in pts:
            assert p.t_sync_ms == pytest.approx(4.0 * math.ceil(math.log2(p.n)) if p.n > 1 else 0.0)
        m = fit_cost_model([TimingRecord(p.n, p.t_batch_ms, p.t_sync_ms) for p in pts])
        assert m.b_ms == pytest.approx(4.0) and m.r2 == pytest.approx(1.0)

    def test_outputs(self, tmp_path):
        pts = simulate_scaling([1, 2, 4], batches=8, payload_size=4)
        write_scaling_csv(tmp_path / "s.csv", pts)
        with open(tmp_path / "s.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["N"]) for r in rows] == [1, 2, 4]
        for path in write_scaling_svgs(tmp_path, pts, CostModel(50.0, 4.0)):
            assert path.read_text().startswith("<svg")
