import struct

import numpy as np
import pytest

from halfsync.data import (NO_DISRUPTION, GeneratorParams, Shot, channel_stats, generate, load_shots,
                           make_chunks, make_targets, normalize, save_shots, shard_epoch)

SMALL = GeneratorParams(n_shots=40, n_channels=3, length_range=(160, 240), lead_range=(40, 80),
                        n_test_shots=10)


class TestGenerator:
    def test_deterministic(self):
        a, b = generate(SMALL, 3), generate(SMALL, 3)
        assert a.train == b.train and a.val == b.val and a.test == b.test
        assert generate(SMALL, 4).train != a.train

    def test_split_sizes_and_labels(self):
        ds = generate(SMALL, 0)
        assert len(ds.train) + len(ds.val) == 40 and len(ds.test) == 10
        assert sum(s.disruptive for s in ds.train) == 3 and sum(s.disruptive for s in ds.val) == 1
        ids = [s.id for s in ds.train + ds.val + ds.test]
        assert len(set(ids)) == len(ids)
        for s in ds.train:
            assert 160 <= s.length <= 240 and s.channels.shape[1] == 3
            if s.disruptive:
                assert s.t_disrupt == s.length - 1

    def test_precursor_is_visible(self):
        ds = generate(GeneratorParams(n_shots=200, precursor_amplitude=8.0), 1)
        st = channel_stats(ds.train)
        tail = {True: [], False: []}
        for s in normalize(ds.train, st):
            tail[s.disruptive].append(np.abs(s.channels[-20:]).max())
        assert np.median(tail[True]) > 2 * np.median(tail[False])

    def test_validation(self):
        with pytest.raises(ValueError):
            GeneratorParams(disruptive_fraction=0.0)
        with pytest.raises(ValueError):
            GeneratorParams(length_range=(100, 200), lead_range=(50, 150))


class TestShotFiles:
    def test_roundtrip(self, tmp_path):
        shots = generate(SMALL, 2).train
        save_shots(tmp_path / "a.shots", shots)
        assert load_shots(tmp_path / "a.shots") == shots

    def test_byte_layout(self, tmp_path):
        shots = [Shot(5, np.array([[1.0, 2.0]]), False), Shot(6, np.array([[0.5, -1.0], [3.0, 4.0]]), True, 1)]
        path = tmp_path / "b.shots"
        save_shots(path, shots)
        raw = path.read_bytes()
        assert raw[:10] == b"SHOT" + struct.pack("<HI", 1, 2)
        assert raw[10:27] == struct.pack("<QBII", 5, 0, NO_DISRUPTION, 1)
        assert raw[27:35] == struct.pack("<2f", 1.0, 2.0)
        assert raw[35:52] == struct.pack("<QBII", 6, 1, 1, 2)

    def test_rejects_foreign_files(self, tmp_path):
        bad = tmp_path / "bad.shots"
        bad.write_bytes(b"NOPE" + b"\x00" * 6)
        with pytest.raises(ValueError):
            load_shots(bad)
        bad.write_bytes(b"SHOT" + struct.pack("<HI", 9, 1))
        with pytest.raises(ValueError, match="version"):
            load_shots(bad)

    def test_shot_invariants(self):
        with pytest.raises(ValueError):
            Shot(1, np.zeros((5, 2)), True, 5)
        with pytest.raises(ValueError):
            Shot(1, np.zeros((5, 2)), False, 3)


class TestPreprocessing:
    def test_standardized_train(self):
        ds = generate(SMALL, 0)
        norm = normalize(ds.train, channel_stats(ds.train))
        x = np.concatenate([s.channels for s in norm]).astype(np.float64)
        assert np.allclose(x.mean(0), 0, atol=1e-5) and np.allclose(x.std(0), 1, atol=1e-5)

    def test_zero_variance_channel(self, caplog):
        shots = [Shot(0, np.column_stack([np.arange(4.0), np.full(4, 2.0)]), False)]
        st = channel_stats(shots)
        assert st.std[1] == 1.0 and "zero-variance" in caplog.text

    def test_targets(self):
        s = Shot(0, np.zeros((10, 1)), True, 8)
        assert list(make_targets(s, 3)) == [-1] * 5 + [1] * 4 + [-1]
        q = Shot(1, np.zeros((4, 1)), False)
        assert np.all(make_targets(q, 3) == -1)

    def test_chunks_end_aligned(self):
        s = Shot(0, np.arange(10.0).reshape(10, 1), True, 9)
        c = make_chunks([s], 4, 2)
        assert list(c.offsets) == [6, 2]
        assert c.x[0, :, 0].tolist() == [6, 7, 8, 9]
        assert c.y[0].tolist() == [-1, 1, 1, 1]
        with pytest.raises(ValueError):
            make_chunks([s], 11, 2)


class TestSharding:
    def test_disjoint_equal_streams(self):
        streams = shard_epoch(103, 5, 4, seed=1)
        assert all(len(s) == 5 for s in streams)
        flat = np.concatenate([b for s in streams for b in s])
        assert flat.size == 100 and np.unique(flat).size == 100

    def test_deterministic(self):
        a = shard_epoch(50, 4, 3, seed=7)
        b = shard_epoch(50, 4, 3, seed=7)
        assert all(np.array_equal(x, y) for sa, sb in zip(a, b) for x, y in zip(sa, sb))

    def test_too_few_chunks(self):
        with pytest.raises(ValueError):
            shard_epoch(5, 4, 2, seed=0)
