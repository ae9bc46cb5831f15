"""Half-precision arithmetic on a float32 carrier.

Shows the binary16 codec, round-to-nearest-even ties, and why the
accumulator width matters when a long dot product runs in fp16.
"""

import numpy as np

from halfsync.numerics import PrecisionPolicy, decode_half, encode_half, matmul, round_half

if __name__ == "__main__":
    for x in (1.0, 0.1, 65504.0, 65520.0, 2.0**-24, 1e-8):
        h = encode_half(x)
        print(f"{x!r:>24} -> 0x{h:04X} -> {decode_half(h)!r}")

    # 1 + 2^-11 sits halfway between 1 and the next half; the even neighbour wins
    print("tie 1 + 2^-11 ->", round_half(np.array([1.0 + 2**-11]))[0])

    rng = np.random.default_rng(0)
    a = np.abs(rng.standard_normal((1, 4096))).astype(np.float32)
    b = np.ones((4096, 1), np.float32)
    exact = float((a.astype(np.float64) @ b.astype(np.float64))[0, 0])
    for name in ("fp16-strict", "fp16", "fp32"):
        got = float(matmul(a, b, PrecisionPolicy.named(name))[0, 0])
        print(f"{name:>12}: sum of 4096 positives = {got:10.2f}  (exact {exact:.2f})")
