"""SplitMix64 random streams.

Every random choice in the toolkit (train/test split, CV folds, bootstrap
draws, per-node feature sampling, SHAP background sampling, synthetic data)
goes through this generator so results are reproducible bit-for-bit and
portable to other languages.

Definitions
-----------
next_u64:   state += 0x9E3779B97F4A7C15, then the standard SplitMix64 finaliser.
uniform:    (next_u64 >> 11) * 2**-53, in [0, 1).
integer(n): floor(uniform * n), in [0, n).
permutation(n): Fisher-Yates, i = n-1 .. 1, swap(i, integer(i + 1)).
"""

import numpy as np
from numba import njit

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def mix64(z):
    """SplitMix64 finaliser on a Python int."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed, *keys):
    """Derive an independent 64-bit stream seed from a master seed and a key path.

    ``derive_seed(s, 3)`` is the seed for task 3 under master seed ``s``.
    """
    h = mix64(int(seed) + GOLDEN_GAMMA)
    for k in keys:
        h = mix64(h ^ mix64(int(k) + GOLDEN_GAMMA))
    return h


@njit(cache=True, nogil=True)
def _next(state):
    state = np.uint64(state + np.uint64(0x9E3779B97F4A7C15))
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _uniform(state):
    state, z = _next(state)
    return state, np.float64(z >> np.uint64(11)) * 1.1102230246251565e-16


@njit(cache=True, nogil=True)
def _integer(state, n):
    state, u = _uniform(state)
    j = np.int64(u * n)
    if j >= n:  # guards rounding of u * n up to n
        j = n - 1
    return state, j


@njit(cache=True, nogil=True)
def _fill_uniform(state, size):
    out = np.empty(size, dtype=np.float64)
    for i in range(size):
        state, u = _uniform(state)
        out[i] = u
    return state, out


@njit(cache=True, nogil=True)
def _fill_integers(state, n, size):
    out = np.empty(size, dtype=np.int64)
    for i in range(size):
        state, j = _integer(state, n)
        out[i] = j
    return state, out


@njit(cache=True, nogil=True)
def _shuffle(state, arr):
    for i in range(arr.shape[0] - 1, 0, -1):
        state, j = _integer(state, i + 1)
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp
    return state


@njit(cache=True, nogil=True)
def _partial_sample(state, pool, k):
    # first k slots of pool become a uniform k-subset (partial Fisher-Yates)
    n = pool.shape[0]
    for i in range(k):
        state, j = _integer(state, n - i)
        j += i
        tmp = pool[i]
        pool[i] = pool[j]
        pool[j] = tmp
    return state


class SplitMix64:
    """Seeded SplitMix64 stream with a small numpy-flavoured API."""

    def __init__(self, seed):
        self._state = np.uint64(int(seed) & _MASK)

    @property
    def state(self):
        return self._state

    @state.setter
    def state(self, value):
        # numba hands uint64 back as a Python int
        self._state = np.uint64(int(value) & _MASK)

    def next_u64(self):
        self.state, z = _next(self._state)
        return int(z)

    def random(self, size=None):
        if size is None:
            self.state, u = _uniform(self._state)
            return float(u)
        self.state, out = _fill_uniform(self._state, int(size))
        return out

    def integers(self, n, size=None):
        if n <= 0:
            raise ValueError("upper bound must be positive")
        if size is None:
            self.state, j = _integer(self._state, np.int64(n))
            return int(j)
        self.state, out = _fill_integers(self._state, np.int64(n), int(size))
        return out

    def normal(self, size):
        """Standard normals by Box-Muller on pairs of uniforms."""
        size = int(size)
        m = (size + 1) // 2
        u = self.random(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:size]

    def permutation(self, n):
        arr = np.arange(int(n), dtype=np.int64)
        self.state = _shuffle(self._state, arr)
        return arr

    def choice(self, n, k):
        """k distinct indices from range(n), in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        pool = np.arange(int(n), dtype=np.int64)
        self.state = _partial_sample(self._state, pool, int(k))
        return pool[:k].copy()
