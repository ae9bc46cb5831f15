"""Binomial-tree broadcast and allreduce over pluggable transports.

Ranks are threads (in-process transport) or processes (socket transport).
Every rank calls the same collectives in the same order; each call draws a
fresh tag so late or early messages never mix across calls.

The in-process transport also keeps a virtual clock per rank: a message sent
at virtual time ``t`` arrives at ``t + latency + bytes / bandwidth``, and a
receive advances the receiver's clock to the arrival time. This gives
reproducible timings for scaling studies.
"""

from __future__ import annotations

import logging
import math
import os
import queue
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .numerics import Precision, cast, wider
from .wire import WireMessage, pack_frame, read_frame

__all__ = [
    "CommunicationError",
    "PartialCollectionError",
    "SyncTiming",
    "Communicator",
    "InProcessHub",
    "SocketTransport",
    "broadcast",
    "allreduce_sum",
    "partial_allreduce",
    "run_cluster",
    "tree_edges",
    "ceil_log2",
    "default_timeout_ms",
    "read_rendezvous",
]

log = logging.getLogger(__name__)

_POLL_S = 0.05


class CommunicationError(RuntimeError):
    def __init__(self, msg: str, rank: int | None = None):
        super().__init__(f"rank {rank}: {msg}" if rank is not None else msg)
        self.rank = rank


class PartialCollectionError(CommunicationError):
    """Too few contributions arrived before the hard timeout."""


def default_timeout_ms() -> float:
    return float(os.environ.get("HALFSYNC_TIMEOUT_MS", "60000"))


def ceil_log2(n: int) -> int:
    return (n - 1).bit_length() if n > 1 else 0


def tree_edges(n: int) -> set[tuple[int, int]]:
    """Binomial-tree edges rooted at 0, plus direct edges to rank 0."""
    edges = set()
    for r in range(1, n):
        edges.add((r - (r & -r), r))
        edges.add((0, r))
    return edges


@dataclass
class SyncTiming:
    op: str
    n: int
    bytes_moved: int  # payload bytes sent + received by this rank
    hops: int  # rounds in which this rank sent or received
    wall_ms: float
    virtual_ms: float
    reduce_hops: int = 0
    reduce_virtual_ms: float = 0.0


# ---------------------------------------------------------------------------
# transports


class InProcessHub:
    """Shared mailboxes for ranks living in one process."""

    def __init__(self, n: int):
        self.n = n
        self.inboxes = [queue.Queue() for _ in range(n)]
        self.aborted = threading.Event()

    def transport(self, rank: int) -> "InProcessTransport":
        return InProcessTransport(self, rank)

    def abort(self) -> None:
        self.aborted.set()


class InProcessTransport:
    virtual = True

    def __init__(self, hub: InProcessHub, rank: int):
        self.hub = hub
        self.rank = rank
        self.size = hub.n

    def send(self, dst: int, body: bytes, arrival: float) -> None:
        self.hub.inboxes[dst].put((self.rank, arrival, body))

    def recv(self, timeout_s: float):
        deadline = time.monotonic() + timeout_s
        while True:
            if self.hub.aborted.is_set():
                raise CommunicationError("cluster aborted by a failing rank", self.rank)
            try:
                return self.hub.inboxes[self.rank].get(timeout=_POLL_S)
            except queue.Empty:
                if time.monotonic() > deadline:
                    return None

    def close(self) -> None:
        pass


class SocketTransport:
    """TCP transport: one connection per tree edge, frames are length-prefixed.

    ``endpoints`` lists ``(host, port)`` for every rank in rank order. Higher
    ranks connect to lower ranks; the first 4 bytes on a new connection carry
    the connecting rank.
    """

    virtual = False

    def __init__(self, rank: int, endpoints: list[tuple[str, int]], timeout_s: float = 60.0):
        self.rank = rank
        self.size = len(endpoints)
        self.inbox: queue.Queue = queue.Queue()
        self.conns: dict[int, socket.socket] = {}
        self._closed = False
        edges = tree_edges(self.size)
        lower = sorted(a for a, b in edges if b == rank)
        higher = sorted(b for a, b in edges if a == rank)

        host, port = endpoints[rank]
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(timeout_s)
        deadline = time.monotonic() + timeout_s
        for peer in lower:
            self.conns[peer] = self._connect(peer, endpoints[peer], deadline)
        for _ in higher:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                raise CommunicationError("timed out waiting for peers to connect", rank) from None
            conn.settimeout(None)
            (peer,) = struct.unpack("<I", self._recv_n(conn, 4))
            self.conns[peer] = conn
        self._listener.close()
        for peer, conn in self.conns.items():
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._reader, args=(peer, conn), daemon=True).start()

    @staticmethod
    def _recv_n(conn, n):
        buf = b""
        while len(buf) < n:
            chunk = conn.recv(n - len(buf))
            if not chunk:
                raise CommunicationError("peer closed during handshake")
            buf += chunk
        return buf

    def _connect(self, peer, endpoint, deadline):
        while True:
            try:
                conn = socket.create_connection(endpoint, timeout=1.0)
                conn.settimeout(None)
                conn.sendall(struct.pack("<I", self.rank))
                return conn
            except OSError:
                if time.monotonic() > deadline:
                    raise CommunicationError(f"cannot reach rank {peer} at {endpoint}", self.rank) from None
                time.sleep(0.05)

    def _reader(self, peer, conn):
        try:
            while True:
                self.inbox.put((peer, 0.0, read_frame(conn)))
        except (EOFError, OSError) as e:
            if not self._closed:
                self.inbox.put((peer, 0.0, e))

    def send(self, dst: int, body: bytes, arrival: float) -> None:
        try:
            conn = self.conns[dst]
        except KeyError:
            raise CommunicationError(f"no connection to rank {dst}", self.rank) from None
        try:
            conn.sendall(pack_frame(body))
        except OSError as e:
            raise CommunicationError(f"send to rank {dst} failed: {e}", self.rank) from e

    def recv(self, timeout_s: float):
        try:
            item = self.inbox.get(timeout=timeout_s)
        except queue.Empty:
            return None
        return item

    def close(self) -> None:
        self._closed = True
        for conn in self.conns.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()


def read_rendezvous(path) -> list[tuple[str, int]]:
    """Parse a rendezvous file: one ``host:port`` per line, in rank order."""
    endpoints = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                host, port = line.rsplit(":", 1)
                endpoints.append((host, int(port)))
    return endpoints


# ---------------------------------------------------------------------------
# communicator


class Communicator:
    def __init__(self, transport, latency_ms: float = 0.0, bandwidth_bytes_per_ms: float = math.inf,
                 timeout_ms: float | None = None):
        self.transport = transport
        self.rank = transport.rank
        self.size = transport.size
        self.latency_ms = latency_ms
        self.bandwidth = bandwidth_bytes_per_ms
        self.timeout_ms = default_timeout_ms() if timeout_ms is None else timeout_ms
        self.clock = 0.0
        self.timings: list[SyncTiming] = []
        self._seq = 0
        self._stash: list[tuple[int, float, WireMessage]] = []
        self._closed_tags: set[int] = set()
        self._lost: dict[int, Exception] = {}
        self._bytes = 0

    def next_tag(self) -> int:
        self._seq += 1
        return self._seq & 0xFFFFFFFF

    def advance(self, ms: float) -> None:
        """Charge local (compute) time to the virtual clock."""
        self.clock += ms

    def send(self, dst: int, msg: WireMessage) -> None:
        cost = self.latency_ms + msg.payload_nbytes / self.bandwidth
        self.transport.send(dst, msg.to_bytes(), self.clock + cost)
        self._bytes += msg.payload_nbytes

    def _take(self, match, timeout_ms, src_wanted=None):
        for k, (src, arrival, msg) in enumerate(self._stash):
            if match(src, msg):
                del self._stash[k]
                return src, arrival, msg
        deadline = time.monotonic() + timeout_ms / 1000.0
        while True:
            if src_wanted in self._lost:
                raise CommunicationError(f"connection to rank {src_wanted} lost: {self._lost[src_wanted]}",
                                         self.rank)
            remaining = deadline - time.monotonic()
            item = self.transport.recv(max(remaining, 0.0)) if remaining > 0 else None
            if item is None:
                return None
            src, arrival, body = item
            if isinstance(body, Exception):
                # a closed peer only matters to whoever waits on it
                self._lost[src] = body
                continue
            msg = WireMessage.from_bytes(body)
            if msg.tag in self._closed_tags:
                continue
            if match(src, msg):
                return src, arrival, msg
            self._stash.append((src, arrival, msg))

    def _accept(self, arrival, msg):
        self.clock = max(self.clock, arrival)
        self._bytes += msg.payload_nbytes
        return msg

    def recv(self, src: int, tag: int) -> WireMessage:
        got = self._take(lambda s, m: s == src and m.tag == tag, self.timeout_ms, src_wanted=src)
        if got is None:
            raise CommunicationError(f"timed out after {self.timeout_ms:.0f} ms waiting for rank {src}",
                                     self.rank)
        return self._accept(got[1], got[2])

    def recv_any(self, tag: int, timeout_ms: float):
        got = self._take(lambda s, m: m.tag == tag, timeout_ms)
        if got is None:
            return None
        return got[0], self._accept(got[1], got[2])

    def close_tag(self, tag: int) -> None:
        self._closed_tags.add(tag)
        self._stash = [item for item in self._stash if item[2].tag != tag]

    def close(self) -> None:
        self.transport.close()

    # timing helpers
    def _start(self):
        self._bytes = 0
        return time.perf_counter(), self.clock

    def _finish(self, op, started, hops, **extra):
        wall0, virt0 = started
        t = SyncTiming(op, self.size, self._bytes, hops, (time.perf_counter() - wall0) * 1e3,
                       self.clock - virt0, **extra)
        self.timings.append(t)
        return t


# ---------------------------------------------------------------------------
# collectives


def _as_precision(buf, dtype):
    return Precision.of(dtype if dtype is not None else np.asarray(buf).dtype)


@np.errstate(over="ignore", invalid="ignore")  # inf/NaN propagate as on hardware
def _add(acc, other, precision: Precision):
    # float64 holds fp16 + fp16 exactly; wider sums use native IEEE adds
    if precision == Precision.FP16:
        return cast(acc.astype(np.float64) + other.astype(np.float64), precision)
    return acc.astype(precision.dtype, copy=False) + other.astype(precision.dtype, copy=False)


def _bcast(comm: Communicator, data, dtype: Precision, root: int):
    n, rel = comm.size, (comm.rank - root) % comm.size
    tag = comm.next_tag()
    hops = 0
    d = 1 << max(ceil_log2(n) - 1, 0)
    while n > 1 and d >= 1:
        if rel % (2 * d) == 0:
            if rel + d < n:
                comm.send((rel + d + root) % n, WireMessage(tag, dtype, data))
                hops += 1
        elif rel % (2 * d) == d:
            data = comm.recv((rel - d + root) % n, tag).data
            hops += 1
        d //= 2
    return data, hops


def broadcast(comm: Communicator, buf, dtype=None, root: int = 0) -> np.ndarray:
    """Binomial-tree broadcast; every rank returns a bit-identical copy of root's buffer."""
    dtype = _as_precision(buf, dtype)
    started = comm._start()
    data = cast(np.asarray(buf).reshape(-1), dtype) if comm.rank == root else None
    data, hops = _bcast(comm, data, dtype, root)
    comm._finish("broadcast", started, hops)
    return data


def allreduce_sum(comm: Communicator, buf, dtype=None,
                  accumulator: Precision = Precision.FP32) -> np.ndarray:
    """Elementwise sum over ranks, identical on every rank.

    Reduction follows a binomial tree onto rank 0 with fixed rank-ordered
    pairing (rank r adds r + 1, then r + 2, r + 4, ...). Partial sums are kept
    at the accumulator width (at least the wire width) within a node and
    rounded to ``dtype`` before each transmission.
    """
    dtype = _as_precision(buf, dtype)
    acc_p = wider(Precision.of(accumulator), dtype)
    started = comm._start()
    n, rank = comm.size, comm.rank
    tag = comm.next_tag()
    acc = cast(np.asarray(buf).reshape(-1), dtype).astype(acc_p.dtype)
    size = acc.size
    hops = 0
    d = 1
    while d < n:
        if rank % (2 * d) == 0:
            if rank + d < n:
                child = comm.recv(rank + d, tag).data
                if child.size != size:
                    raise CommunicationError(f"length mismatch: rank {rank + d} sent {child.size}, "
                                             f"expected {size}", rank)
                acc = _add(acc, child, acc_p)
                hops += 1
        else:
            comm.send(rank - d, WireMessage(tag, dtype, cast(acc, dtype)))
            hops += 1
            break
        d *= 2
    reduce_ms = comm.clock - started[1]
    result = cast(acc, dtype) if rank == 0 else None
    result, bhops = _bcast(comm, result, dtype, 0)
    comm._finish("allreduce", started, hops + bhops, reduce_hops=hops, reduce_virtual_ms=reduce_ms)
    return result


def _needed(fraction: float, n: int) -> int:
    # round first so 0.9 * 10 counts as 9, not 9.000000000000002
    return max(1, math.ceil(round(fraction * n, 9)))


def partial_allreduce(comm: Communicator, buf, dtype=None, fraction: float = 1.0,
                      delay_ms: float = 0.0, accumulator: Precision = Precision.FP32,
                      timeout_ms: float | None = None) -> tuple[np.ndarray, int]:
    """Fault-tolerant sum: rank 0 proceeds once ``ceil(fraction * N)`` contributions arrive.

    Each rank sends its buffer straight to rank 0 after ``delay_ms`` of real
    time (``inf`` never sends, simulating a dead or stalled node). Rank 0 sums
    the accepted contributions in rank order and broadcasts the sum and the
    contributor count; late arrivals are dropped. Returns ``(sum, count)``.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    dtype = _as_precision(buf, dtype)
    acc_p = wider(Precision.of(accumulator), dtype)
    started = comm._start()
    n, rank = comm.size, comm.rank
    need = _needed(fraction, n)
    tag = comm.next_tag()
    own = cast(np.asarray(buf).reshape(-1), dtype)
    timeout_ms = comm.timeout_ms if timeout_ms is None else timeout_ms
    hops = 0
    if rank == 0:
        got = {0: own}
        deadline = time.monotonic() + timeout_ms / 1000.0
        while len(got) < need:
            remaining = (deadline - time.monotonic()) * 1000.0
            item = comm.recv_any(tag, remaining) if remaining > 0 else None
            if item is None:
                raise PartialCollectionError(
                    f"only {len(got)} of {need} required contributions within {timeout_ms:.0f} ms", rank)
            src, msg = item
            if msg.data.size != own.size:
                raise CommunicationError(f"length mismatch from rank {src}", rank)
            got[src] = msg.data
            hops += 1
        comm.close_tag(tag)
        acc = None
        for r in sorted(got):
            v = got[r].astype(acc_p.dtype)
            acc = v if acc is None else _add(acc, v, acc_p)
        total, count = cast(acc, dtype), np.array([len(got)], dtype=np.float64)
    else:
        if math.isfinite(delay_ms):
            if delay_ms > 0:
                time.sleep(delay_ms / 1000.0)
            comm.send(0, WireMessage(tag, dtype, own))
            hops += 1
        total, count = None, None
    total, h1 = _bcast(comm, total, dtype, 0)
    count, h2 = _bcast(comm, count, Precision.FP64, 0)
    comm._finish("partial_allreduce", started, hops + h1 + h2)
    return total, int(count[0])


# ---------------------------------------------------------------------------
# in-process cluster


def run_cluster(n: int, fn, *, latency_ms: float = 0.0, bandwidth_bytes_per_ms: float = math.inf,
                timeout_ms: float | None = None, args_per_rank=None):
    """Run ``fn(comm, *args)`` on ``n`` thread ranks; returns the per-rank results.

    If any rank raises, the others are released and the lowest-rank original
    error is re-raised.
    """
    hub = InProcessHub(n)
    comms = [Communicator(hub.transport(r), latency_ms, bandwidth_bytes_per_ms, timeout_ms)
             for r in range(n)]

    def body(r):
        try:
            extra = args_per_rank[r] if args_per_rank is not None else ()
            return fn(comms[r], *extra)
        except BaseException:
            hub.abort()
            raise

    with ThreadPoolExecutor(max_workers=n, thread_name_prefix="rank") as pool:
        futures = [pool.submit(body, r) for r in range(n)]
        errors = []
        results = []
        for r, fut in enumerate(futures):
            try:
                results.append(fut.result())
            except BaseException as e:  # noqa: BLE001 - re-raised below
                errors.append((r, e))
                results.append(None)
    if errors:
        primary = [e for _, e in errors if "cluster aborted" not in str(e)]
        raise (primary or [errors[0][1]])[0]
    return results
