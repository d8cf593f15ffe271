"""xoshiro256** generator seeded through SplitMix64.

Used for weight initialization so that a given seed yields bit-identical
parameters on every platform, independent of numpy's bit generators.
"""

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state):
    """One SplitMix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** 1.0. State words come from four SplitMix64 outputs of ``seed``."""

    def __init__(self, seed):
        sm = int(seed) & _MASK
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self.s = words

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        x = (s1 * 5) & _MASK
        result = ((((x << 7) | (x >> 57)) & _MASK) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self.s = [s0, s1, s2, s3]
        return result

    def random(self, n):
        """``n`` doubles uniform on [0, 1), 53-bit resolution."""
        s0, s1, s2, s3 = self.s
        out = [0.0] * n
        scale = 2.0**-53
        mask = _MASK
        for i in range(n):
            x = (s1 * 5) & mask
            r = ((((x << 7) | (x >> 57)) & mask) * 9) & mask
            t = (s1 << 17) & mask
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & mask
            out[i] = (r >> 11) * scale
        self.s = [s0, s1, s2, s3]
        return np.array(out, dtype=np.float64)


def derive_seed(seed, index):
    """Independent child seed for stream ``index`` of a parent ``seed``."""
    _, a = splitmix64((int(seed) & _MASK) ^ ((int(index) * 0xD1B54A32D192ED03) & _MASK))
    return a
