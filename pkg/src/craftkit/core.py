"""Dense array containers, deterministic RNG, and pooling.

Matrices are plain 2-D float64 ndarrays and image/feature stacks are 4-D
float64 ndarrays (batch, height, width, channels). The helpers here
validate and coerce at module boundaries so the numerical code can assume
well-formed input.
"""

from dataclasses import dataclass

import numpy as np

_U64 = np.uint64


def as_tensor4(t, name="tensor"):
    """Coerce to a 4-D float64 array (batch, height, width, channels)."""
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError(f"{name} must be 4-D, got shape {a.shape}")
    return a


def global_average_pool(t):
    """Average a (batch, height, width, channels) stack over its spatial axes.

    Returns a (batch, channels) matrix whose entry (b, c) is the mean of
    t[b, :, :, c].
    """
    a = as_tensor4(t)
    if a.shape[1] * a.shape[2] < 1:
        raise ValueError("spatial extent must be at least 1x1")
    return a.mean(axis=(1, 2))


@dataclass(frozen=True)
class Rng:
    """Counter-based random source keyed by (seed, stream).

    Identical (seed, stream) pairs produce identical draw sequences on every
    platform, and distinct streams are independent without shared state, so
    parallel consumers can each own a stream. ``generator()`` returns a fresh
    generator positioned at the start of the stream; callers own the draw
    order from there.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for field_name in ("seed", "stream"):
            v = getattr(self, field_name)
            if not 0 <= int(v) < 2**64:
                raise ValueError(f"{field_name} must be a 64-bit unsigned integer")

    def generator(self):
        key = np.array([self.seed, self.stream], dtype=_U64)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, stream):
        """Same seed, different stream."""
        return Rng(self.seed, stream)
