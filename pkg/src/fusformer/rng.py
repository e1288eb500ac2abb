"""Seeded random number generation with a serializable 256-bit state.

All randomness in the package flows through numpy's PCG64 generator. Its
full state is two 128-bit integers (state and increment), which pack into
exactly four unsigned 64-bit words for checkpointing.

PCG64 additionally buffers half of a 64-bit draw when asked for 32-bit
output. That buffer has no place in the four-word layout, so every caller
in this package draws only through 64-bit paths (float64 uniforms and
int64 integers); `state_words` asserts the buffer is empty.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def new_rng(seed: int) -> np.random.Generator:
    """Fresh deterministic generator for the given seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def state_words(gen: np.random.Generator) -> tuple[int, int, int, int]:
    """Pack generator state into (state_hi, state_lo, inc_hi, inc_lo)."""
    st = gen.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError(f"expected PCG64 state, got {st['bit_generator']}")
    if st["has_uint32"]:
        raise RuntimeError(
            "generator holds a buffered 32-bit draw; only 64-bit draw paths "
            "are serializable"
        )
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    return ((s >> 64) & _MASK64, s & _MASK64, (inc >> 64) & _MASK64, inc & _MASK64)


def from_state_words(words) -> np.random.Generator:
    """Rebuild a generator from the four words produced by `state_words`."""
    hi_s, lo_s, hi_i, lo_i = (int(w) & _MASK64 for w in words)
    gen = np.random.Generator(np.random.PCG64(0))
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (hi_s << 64) | lo_s, "inc": (hi_i << 64) | lo_i},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return gen
