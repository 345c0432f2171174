"""Deterministic, platform-independent random number generation.

The whole simulator draws randomness from a single generator family so that
(seed, config) -> results is a pure function on every platform.  We pin the
algorithm here instead of relying on an external library stream:

SplitMix64 (counter-based):
    state_{i+1} = (state_i + 0x9E3779B97F4A7C15) mod 2^64
    output_i    = mix(state_{i+1})
    mix(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
            z ^= z >> 27; z *= 0x94D049BB133111EB;
            z ^= z >> 31
All arithmetic is modulo 2^64.  Because the state advances by a fixed
increment, a block of n outputs can be produced in one vectorized pass and
is bit-identical to n scalar draws.

Uniform doubles use the top 53 bits: u = (output >> 11) * 2^-53 in [0, 1).
Gaussians use Box-Muller on (0, 1] uniforms; gamma variates use the
Marsaglia-Tsang rejection method.  Both consume the stream in a fixed,
documented order, so every derived quantity is reproducible bit-for-bit.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_DERIVE_SALT = 0xA3EC647659359ACD

_INV_2_53 = 2.0 ** -53

# Stream tags for derive_seed: every independent consumer of randomness in a
# run gets its own derived seed so streams never alias.
STREAM_DATA = 1
STREAM_PARTITION = 2
STREAM_MODEL = 3
STREAM_UPDATE_INIT = 4
STREAM_SAMPLING = 5
STREAM_CLIENT = 6
STREAM_MERGE = 7


def _mix(z: int) -> int:
    """SplitMix64 finalizer on a masked Python int."""
    z = (z ^ (z >> 30)) * _MIX1 & _MASK64
    z = (z ^ (z >> 27)) * _MIX2 & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *words: int) -> int:
    """Derive a child seed from a root seed and a list of integer words.

    Absorbs each word into the hash state with the same mixing function the
    generator uses.  Used to key per-round / per-client / per-purpose
    streams off one experiment seed.
    """
    h = _mix((seed ^ _DERIVE_SALT) & _MASK64)
    for w in words:
        h = _mix((h + _GOLDEN) ^ (w & _MASK64))
    return h


class Rng:
    """Counter-based SplitMix64 stream.

    Identical seeds produce identical output sequences regardless of
    platform, numpy version, or whether values were drawn one at a time or
    in vectorized blocks.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    # -- raw stream ----------------------------------------------------

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix(self._state)

    def u64_block(self, n: int) -> np.ndarray:
        """n raw outputs as uint64, bit-identical to n next_u64() calls."""
        if n < 0:
            raise ValueError("block size must be >= 0")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + steps * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GOLDEN) & _MASK64
        return z

    # -- distributions -------------------------------------------------

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform_block(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal_block(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller; consumes 2*ceil(n/2) draws."""
        pairs = (n + 1) // 2
        # u1 in (0, 1] so log never sees zero
        u1 = ((self.u64_block(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = self.uniform_block(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def normal(self) -> float:
        return float(self.normal_block(1)[0])

    def below(self, n: int) -> int:
        """Integer in [0, n) via the multiply-high reduction (exact in
        Python's big-int arithmetic; bias is < n / 2^64)."""
        if n <= 0:
            raise ValueError("bound must be positive")
        return (self.next_u64() * n) >> 64

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n): stable argsort of fresh 64-bit keys."""
        return np.argsort(self.u64_block(n), kind="stable")

    def shuffled(self, values) -> np.ndarray:
        arr = np.asarray(values)
        return arr[self.permutation(len(arr))]

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        return self.permutation(n)[:k]

    def gamma(self, shape: float) -> float:
        """One gamma(shape, scale=1) variate, Marsaglia-Tsang.

        For shape < 1 uses the boost gamma(shape) = gamma(shape+1) * U^(1/shape).
        """
        if shape <= 0:
            raise ValueError("gamma shape must be positive")
        if shape < 1.0:
            u = self.uniform()
            # uniform() can return 0; the boost needs u > 0
            while u == 0.0:
                u = self.uniform()
            return self.gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = self.uniform()
            if u < 1.0 - 0.0331 * x ** 4:
                return d * v
            if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def dirichlet(self, alpha: float, n: int) -> np.ndarray:
        """One draw from the symmetric Dirichlet(alpha * 1_n)."""
        while True:
            g = np.array([self.gamma(alpha) for _ in range(n)])
            total = g.sum()
            if total > 0.0:
                return g / total
