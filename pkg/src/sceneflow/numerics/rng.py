"""Counter-based random streams with cross-run, cross-platform determinism.

Each draw is a pure function of (seed, counter): the i-th raw word is
splitmix64(mix64(seed) + i * GAMMA), so a stream can be checkpointed and
resumed by storing two integers. Gaussian variates come from Box-Muller
over the raw words, consuming exactly two words per variate.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_INV_2_53 = float(2.0**-53)


def _mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """SplitMix64 finalizer (Steele et al., bijective on 64-bit words)."""
    z = np.uint64(z) if np.isscalar(z) or isinstance(z, int) else z
    with np.errstate(over="ignore"):  # modulo-2^64 wraparound is the algorithm
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Reproducible random stream identified by a 64-bit seed and a counter."""

    __slots__ = ("seed", "counter", "_base")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        self._base = _mix64(np.uint64(self.seed))

    @property
    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def derive(self, index: int) -> "RngStream":
        """Independent child stream for worker/scene `index`."""
        with np.errstate(over="ignore"):
            child = int(_mix64(self._base + np.uint64(index & 0xFFFFFFFFFFFFFFFF) * _GAMMA))
        return RngStream(child)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._base + idx * _GAMMA)

    def uniform(self, shape=()) -> np.ndarray:
        """i.i.d. draws in [0, 1) as float64."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else u[0]

    def gaussian(self, shape, dtype=np.float32) -> np.ndarray:
        """i.i.d. standard normal draws via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        if len(shape) == 0:
            raise ValueError("gaussian requires a nonempty shape")
        n = int(np.prod(shape))
        w = self._raw(2 * n)
        u1 = ((w[:n] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53  # (0, 1]
        u2 = (w[n:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape).astype(dtype)

    def randint(self, lo: int, hi: int) -> int:
        """One integer in [lo, hi)."""
        if hi <= lo:
            raise ValueError("randint: empty range")
        return lo + int(self._raw(1)[0] % np.uint64(hi - lo))

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """n integers in [lo, hi)."""
        if hi <= lo:
            raise ValueError("integers: empty range")
        return (lo + (self._raw(n) % np.uint64(hi - lo)).astype(np.int64))

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of range(n) (argsort of n uniform draws)."""
        return np.argsort(self.uniform((n,)), kind="stable")

    def choice(self, n: int, m: int) -> np.ndarray:
        """m distinct indices out of range(n), without replacement."""
        if m > n:
            raise ValueError("choice: m > n")
        return self.permutation(n)[:m]
