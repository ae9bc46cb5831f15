"""Tree allreduce and the straggler-tolerant partial variant on thread ranks."""

import math

import numpy as np

from halfsync.collective import allreduce_sum, partial_allreduce, run_cluster
from halfsync.numerics import Precision


def full(comm):
    out = allreduce_sum(comm, np.full(4, comm.rank, np.float16), Precision.FP16, Precision.FP32)
    return out, comm.timings[-1]


def partial(comm, slow):
    delay = math.inf if comm.rank == slow else 0.0
    return partial_allreduce(comm, np.ones(2, np.float32), Precision.FP32, fraction=0.9, delay_ms=delay,
                             timeout_ms=2000)


if __name__ == "__main__":
    for n in (2, 5, 8, 16):
        res = run_cluster(n, full, latency_ms=1.0)
        out, timing = res[0]
        same = len({r[0].tobytes() for r in res}) == 1
        print(f"N={n:2d}: sum {out[0]:5.0f}  reduce hops {timing.reduce_hops}  "
              f"virtual {max(r[1].virtual_ms for r in res):.0f} ms  identical on all ranks: {same}")

    res = run_cluster(12, partial, args_per_rank=[(7,)] * 12)
    total, count = res[0]
    print(f"partial allreduce with rank 7 stuck: {count}/12 contributions, sum {total[0]:.0f}")
