import math
import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfsync.collective import (CommunicationError, Communicator, PartialCollectionError, SocketTransport,
                                 allreduce_sum, broadcast, ceil_log2, partial_allreduce, read_rendezvous,
                                 run_cluster)
from halfsync.numerics import Precision
from halfsync.wire import HEADER, WireError, WireMessage, pack_frame, read_frame


class TestWire:
    def test_header_layout(self):
        msg = WireMessage(7, Precision.FP16, np.array([1.0, -2.0], np.float16))
        raw = msg.to_bytes()
        assert raw[:HEADER.size] == struct.pack("<IBQ", 7, 0, 2)
        assert raw[HEADER.size:] == bytes([0x00, 0x3C, 0x00, 0xC0])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(list(Precision)),
           st.lists(st.integers(0, 2**16 - 1), max_size=40))
    def test_roundtrip_bit_patterns(self, tag, prec, patterns):
        # raw patterns include NaN payloads and signed zeros
        raw = np.array(patterns, dtype=np.uint16)
        if prec == Precision.FP16:
            data = raw.view(np.float16)
        else:
            data = raw.astype(np.float64).astype(prec.dtype) * 0.37
        msg = WireMessage(tag, prec, data)
        back = WireMessage.from_bytes(msg.to_bytes())
        assert back.same_bits(msg)

    def test_rejects_bad_input(self):
        with pytest.raises(WireError):
            WireMessage.from_bytes(b"\x00" * 3)
        good = WireMessage(1, Precision.FP32, np.ones(2, np.float32)).to_bytes()
        with pytest.raises(WireError):
            WireMessage.from_bytes(good[:-1])
        with pytest.raises(WireError):
            WireMessage.from_bytes(good[:4] + b"\x09" + good[5:])
        with pytest.raises(WireError):
            WireMessage(2**32, Precision.FP32, np.ones(1))

    def test_frames_over_a_socket(self):
        a, b = socket.socketpair()
        body = WireMessage(3, Precision.FP64, np.arange(5.0)).to_bytes()
        a.sendall(pack_frame(body) + pack_frame(b""))
        assert read_frame(b) == body
        assert read_frame(b) == b""
        a.close()
        with pytest.raises(EOFError):
            read_frame(b)
        b.close()


def _bcast(comm, buf):
    out = broadcast(comm, buf if comm.rank == 0 else None, Precision.FP32)
    return out, comm.timings[-1]


def _sum(comm, buf, prec=Precision.FP32, acc=Precision.FP32):
    return allreduce_sum(comm, buf, prec, acc), comm.timings[-1]


class TestBroadcast:
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 7, 8, 13])
    def test_identical_on_all_ranks(self, n):
        buf = np.array([1.5, -2.0], np.float32)
        res = run_cluster(n, _bcast, args_per_rank=[(buf,)] * n)
        assert all(r[0].tobytes() == buf.tobytes() for r in res)

    def test_rounds_for_eight(self):
        res = run_cluster(8, _bcast, latency_ms=1.0, args_per_rank=[(np.ones(3, np.float32),)] * 8)
        assert max(r[1].virtual_ms for r in res) == 3.0
        assert res[0][1].hops == 3

    def test_single_rank_noop(self):
        (out, timing), = run_cluster(1, _bcast, args_per_rank=[(np.ones(2, np.float32),)])
        assert timing.hops == 0 and np.array_equal(out, np.ones(2))


class TestAllreduce:
    def test_forced_sum(self):
        res = run_cluster(3, _sum, args_per_rank=[(np.array([1.0, 2.0, 3.0]),)] * 3)
        for out, _ in res:
            assert np.array_equal(out, [3.0, 6.0, 9.0])

    def test_identity_for_one(self):
        (out, _), = run_cluster(1, _sum, args_per_rank=[(np.array([0.1, 0.2]),)])
        assert out.tobytes() == np.array([0.1, 0.2], np.float32).tobytes()

    def test_strict_fp16_overflows(self):
        args = [(np.array([65504.0]), Precision.FP16, Precision.FP16)] * 2
        res = run_cluster(2, _sum, args_per_rank=args)
        assert all(np.isinf(out[0]) for out, _ in res)
        wide = run_cluster(2, _sum, args_per_rank=[(np.array([65504.0, -65504.0]), Precision.FP16,
                                                   Precision.FP32)] * 2)
        assert np.isinf(wide[0][0][0])  # the sum itself exceeds the fp16 range

    @pytest.mark.parametrize("n", [2, 3, 5, 8, 11, 16])
    def test_hops_and_bytes(self, n):
        payload = np.ones(100, np.float32)
        res = run_cluster(n, _sum, args_per_rank=[(payload,)] * n)
        k = ceil_log2(n)
        assert res[0][1].reduce_hops == k
        assert all(t.bytes_moved <= 2 * payload.nbytes * k for _, t in res)

    def test_length_mismatch(self):
        args = [(np.ones(3),), (np.ones(4),)]
        with pytest.raises(CommunicationError, match="length mismatch"):
            run_cluster(2, _sum, timeout_ms=2000, args_per_rank=args)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 9), st.integers(0, 2**31))
    def test_bitwise_identical_across_ranks(self, n, seed):
        rng = np.random.default_rng(seed)
        args = [(rng.standard_normal(17) * 1e3,) for _ in range(n)]
        res = run_cluster(n, _sum, args_per_rank=args)
        assert len({out.tobytes() for out, _ in res}) == 1


def _partial(comm, buf, delays, fraction, timeout_ms=5000):
    return partial_allreduce(comm, buf, Precision.FP32, fraction=fraction, delay_ms=delays[comm.rank],
                             timeout_ms=timeout_ms)


class TestPartial:
    def test_one_straggler(self):
        delays = [0.0] * 10
        delays[4] = math.inf
        args = [(np.array([float(r)], np.float32), delays, 0.9) for r in range(10)]
        res = run_cluster(10, _partial, args_per_rank=args)
        assert {c for _, c in res} == {9}
        assert all(s[0] == sum(range(10)) - 4 for s, _ in res)

    def test_full_fraction_matches_count_n(self):
        args = [(np.ones(2, np.float32), [0.0] * 4, 1.0)] * 4
        res = run_cluster(4, _partial, args_per_rank=args)
        assert all(c == 4 and np.array_equal(s, [4.0, 4.0]) for s, c in res)

    def test_small_cluster_needs_everyone(self):
        delays = [0.0, math.inf]
        args = [(np.ones(1, np.float32), delays, 0.95, 300)] * 2
        with pytest.raises(PartialCollectionError):
            run_cluster(2, _partial, timeout_ms=2000, args_per_rank=args)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            run_cluster(1, _partial, args_per_rank=[(np.ones(1), [0.0], 0.0)])


def _free_ports(k):
    socks = [socket.socket() for _ in range(k)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


class TestSockets:
    def test_allreduce_and_partial_over_tcp(self, tmp_path):
        n = 4
        rdv = tmp_path / "hosts.txt"
        rdv.write_text("# rank order\n" + "".join(f"127.0.0.1:{p}\n" for p in _free_ports(n)))
        endpoints = read_rendezvous(rdv)
        results = [None] * n
        errors = []

        def rank_main(r):
            try:
                comm = Communicator(SocketTransport(r, endpoints, timeout_s=20), timeout_ms=20000)
                total = allreduce_sum(comm, np.full(1000, r + 0.25, np.float32), Precision.FP32)
                half = allreduce_sum(comm, np.full(3, r, np.float16), Precision.FP16)
                part = partial_allreduce(comm, np.ones(2, np.float32), Precision.FP32, fraction=1.0)
                results[r] = (total, half, part)
                comm.close()
            except Exception as e:  # noqa: BLE001 - surfaced below
                errors.append(e)

        threads = [threading.Thread(target=rank_main, args=(r,)) for r in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(60)
        assert not errors, errors
        ref = run_cluster(n, _sum, args_per_rank=[(np.full(1000, r + 0.25, np.float32),) for r in range(n)])
        for total, half, (psum, count) in results:
            assert total.tobytes() == ref[0][0].tobytes()
            assert half.dtype == np.float16 and np.all(half == 6)
            assert count == n and np.all(psum == n)

    def test_rendezvous_format(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("hostA:1000\n\n  hostB:1001  # second\n")
        assert read_rendezvous(p) == [("hostA", 1000), ("hostB", 1001)]
