"""Deterministic parallel orbit streams for Monte Carlo ensembles.

Each stream owns an independent generator seeded by hashing
(master_seed, stream_index) through numpy's SeedSequence; the per-stream draw
order is fixed (initial point first, then per-step entropy in time order), so
results do not depend on chunking, thread count, or how many streams run
side by side.

Orbit iteration backends
------------------------
float       one fused vectorized update per step in float64.  Safe for every
            catalog map whose multiplier is not a power of two: rounding acts
            as a machine-scale perturbation and orbits stay statistically
            faithful.
digits      exact distributional simulation for frozen maps x -> a x mod 1
            with a = 2^r.  Plain float64 iteration of these maps is useless
            for long horizons (the mantissa shifts out one bit per step and
            every orbit collapses onto 0 after ~53 steps), so the stream keeps
            a 53-bit integer mantissa and feeds fresh uniform bits in from the
            bottom: the joint law of the emitted points equals that of a true
            orbit started from a Lebesgue-random point, sampled to 53 bits.
"""

from __future__ import annotations

import numpy as np

from .maps import IntervalMap, SequentialSystem

MANTISSA_BITS = 53
_MASK = (1 << MANTISSA_BITS) - 1
_SCALE = float(2.0 ** -MANTISSA_BITS)


def stream_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Per-stream seed derived by hashing (master_seed, stream_index)."""
    return np.random.SeedSequence((int(master_seed), int(index)))


def stream_generators(master_seed: int, M: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(stream_seed(master_seed, i))) for i in range(M)]


def _digit_shift_rate(system: SequentialSystem) -> int:
    """Bits consumed per step if the digit backend applies, else 0."""
    if system.kind != "linear_noise" or not system.frozen:
        return 0
    if system.schedule.param(1) != 0.0:
        return 0
    a = int(system.fixed["slope"])
    return a.bit_length() - 1 if a & (a - 1) == 0 else 0


def sample_from_density(h_values: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling from a piecewise-constant density on the uniform grid."""
    N = h_values.size
    cell_mass = h_values / h_values.sum()
    cdf = np.concatenate([[0.0], np.cumsum(cell_mass)])
    cdf[-1] = 1.0
    idx = np.minimum(np.searchsorted(cdf, u, side="right") - 1, N - 1)
    frac_in = (u - cdf[idx]) / np.maximum(cdf[idx + 1] - cdf[idx], 1e-300)
    return (idx + np.clip(frac_in, 0.0, 1.0)) / N


class OrbitStreams:
    """M synchronized orbit streams of a sequential system.

    ``init`` selects the law of the initial points: "lebesgue" draws them
    i.i.d. uniform, ("mu", density_values) draws from a piecewise-constant
    invariant density by inverse CDF.
    """

    def __init__(self, system: SequentialSystem, M: int, seed: int,
                 init="lebesgue", chunk_steps: int = 4096):
        self.system = system
        self.M = int(M)
        self.seed = int(seed)
        self.chunk_steps = int(chunk_steps)
        self.k = 0
        self._rngs = stream_generators(seed, M)
        u0 = np.array([rng.random() for rng in self._rngs])
        self._shift = _digit_shift_rate(system)
        if self._shift:
            self._mantissa = np.minimum(
                (u0 * float(1 << MANTISSA_BITS)).astype(np.uint64), _MASK
            )
            self._words = None
            self._word_pos = 0
            self._bit_pos = 0
        else:
            self._map_memo: dict[float, IntervalMap] = {}
        if init == "lebesgue":
            x0 = u0
        elif isinstance(init, tuple) and init[0] == "mu":
            x0 = sample_from_density(np.asarray(init[1], dtype=float), u0)
            if self._shift:
                self._mantissa = np.minimum(
                    (x0 * float(1 << MANTISSA_BITS)).astype(np.uint64), _MASK
                )
        else:
            raise ValueError("init must be 'lebesgue' or ('mu', density_values)")
        self.x = x0 if not self._shift else self._mantissa.astype(np.float64) * _SCALE

    # -- digit backend ------------------------------------------------------

    def _refill_words(self):
        bits_per_chunk = self.chunk_steps * self._shift
        nwords = (bits_per_chunk + 63) // 64
        words = np.empty((self.M, nwords), dtype=np.uint64)
        for i, rng in enumerate(self._rngs):
            words[i] = rng.integers(0, 2 ** 64, size=nwords, dtype=np.uint64, endpoint=False)
        self._words = words
        self._word_pos = 0
        self._bit_pos = 0

    def _next_digits(self) -> np.ndarray:
        r = self._shift
        if self._words is None or self._word_pos >= self._words.shape[1]:
            self._refill_words()
        out = np.zeros(self.M, dtype=np.uint64)
        for _ in range(r):
            bit = (self._words[:, self._word_pos] >> np.uint64(self._bit_pos)) & np.uint64(1)
            out = (out << np.uint64(1)) | bit
            self._bit_pos += 1
            if self._bit_pos == 64:
                self._bit_pos = 0
                self._word_pos += 1
                if self._word_pos >= self._words.shape[1]:
                    self._refill_words()
        return out

    # -- float backend ------------------------------------------------------

    def _map_for_step(self, k: int) -> IntervalMap:
        p = self.system.schedule.param(k)
        m = self._map_memo.get(p)
        if m is None:
            m = self.system.map_at(k)
            if len(self._map_memo) < 64:
                self._map_memo[p] = m
        return m

    def _float_step(self, k: int):
        sys = self.system
        x = self.x
        if sys.kind == "beta":
            b = sys.schedule.param(k)
            y = b * x
            y -= np.floor(y)
        elif sys.kind == "linear_noise":
            a = sys.fixed["slope"]
            eps = sys.schedule.param(k)
            y = a * x + eps
            y -= np.floor(y)
        else:
            y = self._map_for_step(k).eval_array(x)
        self.x = y

    def advance(self) -> np.ndarray:
        """Advance every stream one step; returns the new positions (read-only view)."""
        self.k += 1
        if self.k > self.system.horizon:
            raise ValueError("orbit advanced past the system horizon")
        if self._shift:
            d = self._next_digits()
            self._mantissa = ((self._mantissa << np.uint64(self._shift)) | d) & np.uint64(_MASK)
            self.x = self._mantissa.astype(np.float64) * _SCALE
        else:
            self._float_step(self.k)
        return self.x


class NormalStreams:
    """M streams of i.i.d. standard normal increments (the injected oracle)."""

    def __init__(self, M: int, seed: int, chunk_steps: int = 4096):
        self.M = int(M)
        self.seed = int(seed)
        self.chunk_steps = int(chunk_steps)
        self.k = 0
        self._rngs = stream_generators(seed, M)
        self._buf = None
        self._pos = 0

    def _refill(self):
        buf = np.empty((self.M, self.chunk_steps))
        for i, rng in enumerate(self._rngs):
            buf[i] = rng.standard_normal(self.chunk_steps)
        self._buf = buf
        self._pos = 0

    def advance(self) -> np.ndarray:
        if self._buf is None or self._pos >= self.chunk_steps:
            self._refill()
        out = self._buf[:, self._pos]
        self._pos += 1
        self.k += 1
        return out
