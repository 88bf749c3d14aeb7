"""Portable seeded random numbers.

The generator is xoshiro256** (Blackman & Vigna) with its 256-bit state
filled from four consecutive SplitMix64 outputs of the seed. Doubles use
the top 53 bits of each output. Normal deviates come from the Marsaglia
polar method; the second value of each accepted pair is cached and
returned by the next call. Any implementation following these rules
reproduces the same streams bit for bit.
"""

import math

_MASK = (1 << 64) - 1


def splitmix64(state):
    """Advance a SplitMix64 state, returning ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    def __init__(self, seed):
        sm = int(seed) & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s
        self._spare = None

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK
        result = ((((x << 7) | (x >> 57)) & _MASK) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self._s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low, high):
        return low + (high - low) * self.random()

    def below(self, n):
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self, sigma=1.0):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return sigma * z
        while True:
            u = 2.0 * self.random() - 1.0
            v = 2.0 * self.random() - 1.0
            s = u * u + v * v
            if 0.0 < s < 1.0:
                break
        f = math.sqrt(-2.0 * math.log(s) / s)
        self._spare = v * f
        return sigma * u * f

    def normals(self, n, sigma=1.0):
        """``n`` draws of :meth:`normal`, identical in sequence, as a list."""
        out = []
        spare = self._spare
        s0, s1, s2, s3 = self._s
        scale = 1.0 / (1 << 53)
        while len(out) < n:
            if spare is not None:
                out.append(sigma * spare)
                spare = None
                continue
            while True:
                uv = []
                for _ in range(2):
                    x = (s1 * 5) & _MASK
                    r = ((((x << 7) | (x >> 57)) & _MASK) * 9) & _MASK
                    t = (s1 << 17) & _MASK
                    s2 ^= s0
                    s3 ^= s1
                    s1 ^= s2
                    s0 ^= s3
                    s2 ^= t
                    s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
                    uv.append(2.0 * ((r >> 11) * scale) - 1.0)
                u, v = uv
                q = u * u + v * v
                if 0.0 < q < 1.0:
                    break
            f = math.sqrt(-2.0 * math.log(q) / q)
            spare = v * f
            out.append(sigma * u * f)
        self._s = [s0, s1, s2, s3]
        self._spare = spare
        return out

    def shuffle(self, items):
        """Fisher-Yates in place, walking from the last element down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items
