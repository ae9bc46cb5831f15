import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfsync.data import Shot
from halfsync.evaluation import UndefinedAUC, predict_traces, roc_auc, score_shots, shot_score, write_roc_csv
from halfsync.model import ModelConfig, init_params
from halfsync.numerics import PrecisionPolicy


def _mann_whitney(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestShotScore:
    def test_constant_trace(self):
        for shot in (Shot(0, np.zeros((100, 1)), True, 99), Shot(1, np.zeros((100, 1)), False)):
            assert shot_score(np.full(100, 0.3), shot) == 0.3

    def test_late_spike_excluded(self):
        shot = Shot(0, np.zeros((100, 1)), True, 99)
        tr = np.zeros(100)
        tr[89] = 5.0
        assert shot_score(tr, shot) == 0.0

    def test_early_spike_counts(self):
        shot = Shot(0, np.zeros((100, 1)), True, 99)
        tr = np.zeros(100)
        tr[49] = 5.0
        assert shot_score(tr, shot) == 5.0

    def test_window_boundary(self):
        shot = Shot(0, np.zeros((100, 1)), True, 99)
        tr = np.zeros(100)
        tr[69] = 1.0  # exactly 30 ms before
        assert shot_score(tr, shot) == 1.0

    def test_quiet_shot_uses_everything(self):
        tr = np.zeros(50)
        tr[-1] = 2.0
        assert shot_score(tr, Shot(0, np.zeros((50, 1)), False)) == 2.0

    def test_early_disruption_excluded(self, caplog):
        shot = Shot(3, np.zeros((40, 1)), True, 20)
        assert shot_score(np.zeros(40), shot) is None and "excluded" in caplog.text
        scores, labels = score_shots([np.zeros(40)], [shot])
        assert scores.size == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            shot_score(np.zeros(5), Shot(0, np.zeros((6, 1)), False))


class TestRoc:
    def test_separated(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[1] == 1.0

    def test_all_equal(self):
        curve, auc = roc_auc([0.5] * 4, [1, 0, 1, 0])
        assert auc == 0.5 and len(curve.fpr) == 2

    def test_hand_case(self):
        curve, auc = roc_auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0])
        assert auc == 0.75
        assert list(curve.fpr) == [0, 0, 0.5, 0.5, 1] and list(curve.tpr) == [0, 0.5, 0.5, 1, 1]

    def test_single_class(self):
        with pytest.raises(UndefinedAUC):
            roc_auc([0.1, 0.2], [1, 1])

    def test_mann_whitney_oracle(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 30))
            scores = rng.integers(0, 8, n) / 4.0  # coarse values force ties
            labels = rng.random(n) < 0.4
            labels[0], labels[1] = True, False
            worst = max(worst, abs(roc_auc(scores, labels)[1] - _mann_whitney(scores, labels)))
        assert worst < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(-40, 40), st.booleans()), min_size=2, max_size=30))
    def test_invariances(self, pairs):
        scores = np.array([p[0] / 8.0 for p in pairs])
        labels = np.array([p[1] for p in pairs])
        if labels.all() or not labels.any():
            return
        curve, auc = roc_auc(scores, labels)
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
        assert (curve.fpr[0], curve.tpr[0], curve.fpr[-1], curve.tpr[-1]) == (0, 0, 1, 1)
        assert roc_auc(np.exp(scores) * 3, labels)[1] == pytest.approx(auc, abs=1e-12)
        assert roc_auc(scores, ~labels)[1] == pytest.approx(1 - auc, abs=1e-12)

    def test_csv(self, tmp_path):
        curve, _ = roc_auc([0.9, 0.1], [1, 0])
        write_roc_csv(tmp_path / "r.csv", curve)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "threshold,fpr,tpr" and len(lines) == 1 + len(curve.fpr)


def test_traces_cover_every_timestep():
    cfg = ModelConfig(feature_dim=2, hidden=3, n_lstm_layers=1, fc_hidden=3, seq_len=8)
    p = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    shots = [Shot(i, rng.standard_normal((n, 2)).astype(np.float32), False) for i, n in enumerate((8, 13, 20))]
    traces = predict_traces(p, shots, PrecisionPolicy.named("fp64"))
    assert [t.size for t in traces] == [8, 13, 20]
    assert all(np.all(np.isfinite(t)) for t in traces)
