"""Dense vector helpers and keyed, counter-based pseudorandomness.

Vectors are plain 1-d float64 numpy arrays. The helpers here add the checks
the rest of the package relies on (equal lengths, finite entries).

Randomness is counter-based: every draw is a pure function of
``(master_seed, node, iteration, channel, counter)``, so results never depend
on the order in which streams are consumed. The mixing function is the
SplitMix64 finalizer applied to a Weyl sequence offset by a per-key base.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Channel numbers used to key streams.
CH_GRADIENT = 0
CH_SHIFT = 1
CH_ANCHOR = 2
CH_PARTITION = 3

# Pseudo node id for server-side draws.
SERVER = -1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0**-53


class DimensionError(ValueError):
    pass


def as_vector(x, d: int | None = None) -> np.ndarray:
    """Return ``x`` as a finite 1-d float64 array, optionally of length ``d``."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise DimensionError(f"expected length {d}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def dot(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    _check_same(a, b)
    return float(np.dot(a, b))


def axpy(alpha: float, x, y) -> np.ndarray:
    """``alpha * x + y``."""
    x, y = as_vector(x), as_vector(y)
    _check_same(x, y)
    with np.errstate(over="ignore", invalid="ignore"):
        out = alpha * x + y
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("axpy overflowed")
    return out


def norm_p(x, p: float = 2.0) -> float:
    x = as_vector(x)
    if p != np.inf and p < 1:
        raise ValueError(f"norm order must be >= 1 or inf, got {p}")
    if x.size == 0:
        return 0.0
    return float(np.linalg.norm(x, ord=p))


# -- counter-based generator -------------------------------------------------


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _u64(v) -> np.ndarray:
    # negative ids (the server) wrap modulo 2**64
    arr = np.asarray(v)
    if arr.dtype == np.uint64:
        return arr
    return arr.astype(np.int64).astype(np.uint64)


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


_SALTS = (0x632BE59BD9B4E019, 0x8CB92BA72F3D8DD7, 0xD1B54A32D192ED03)


def _is_int_scalar(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def stream_keys(master_seed: int, node, iteration, channel) -> np.ndarray:
    """Per-stream 64-bit base words; arguments broadcast against each other."""
    if _is_int_scalar(node) and _is_int_scalar(iteration) and _is_int_scalar(channel):
        # same words as the array path, without numpy overhead per call
        k = _mix_int((int(master_seed) + 0x9E3779B97F4A7C15) & _MASK64)
        for v, salt in zip((node, iteration, channel), _SALTS):
            k = _mix_int(k ^ ((int(v) + salt) & _MASK64))
        return np.uint64(k)
    node_arr = np.asarray(node)
    if node_arr.ndim == 1 and _is_int_scalar(iteration) and _is_int_scalar(channel):
        # the common "all nodes, one round" case: reuse the seed/node stage
        k = _node_stage(int(master_seed), node_arr.astype(np.int64).tobytes())
        with np.errstate(over="ignore"):
            k = _mix(k ^ np.uint64((int(iteration) + _SALTS[1]) & _MASK64))
            return _mix(k ^ np.uint64((int(channel) + _SALTS[2]) & _MASK64))
    with np.errstate(over="ignore"):
        k = _mix(_seed_stage(master_seed) ^ (_u64(node) + np.uint64(_SALTS[0])))
        k = _mix(k ^ (_u64(iteration) + np.uint64(_SALTS[1])))
        k = _mix(k ^ (_u64(channel) + np.uint64(_SALTS[2])))
    return k


def _seed_stage(master_seed: int) -> np.uint64:
    return np.uint64(_mix_int((int(master_seed) + 0x9E3779B97F4A7C15) & _MASK64))


@lru_cache(maxsize=64)
def _node_stage(master_seed: int, node_bytes: bytes) -> np.ndarray:
    nodes = np.frombuffer(node_bytes, dtype=np.int64)
    with np.errstate(over="ignore"):
        k = _mix(_seed_stage(master_seed) ^ (nodes.astype(np.uint64) + np.uint64(_SALTS[0])))
    k.flags.writeable = False
    return k


@lru_cache(maxsize=64)
def _counter_words(offset: int, size: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        w = np.arange(offset + 1, offset + size + 1, dtype=np.uint64) * _GOLDEN
    w.flags.writeable = False
    return w


def uniform_block(master_seed: int, node, iteration, channel, size: int, offset: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) of shape ``broadcast(node, iteration, channel).shape + (size,)``.

    Row ``r`` is identical to ``RngStream(master_seed, node[r], iteration[r],
    channel[r]).uniform(size, offset)``.
    """
    keys = np.asarray(stream_keys(master_seed, node, iteration, channel))[..., None]
    with np.errstate(over="ignore"):
        words = _mix(keys + _counter_words(int(offset), int(size)))
    return (words >> np.uint64(11)).astype(np.float64) * _TWO_M53


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    node: int = 0
    iteration: int = 0
    channel: int = 0

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.node, self.iteration, self.channel)

    def uniform(self, size: int | None = None, offset: int = 0):
        """Draws counter positions ``offset .. offset+size-1``; a scalar when ``size`` is None."""
        n = 1 if size is None else int(size)
        u = uniform_block(self.master_seed, self.node, self.iteration, self.channel, n, offset)
        return float(u[0]) if size is None else u

    def subset(self, d: int, k: int) -> np.ndarray:
        return draw_subset(self, d, k)


def draw_uniform(stream: RngStream) -> float:
    return stream.uniform()


def draw_subset(stream: RngStream, d: int, k: int) -> np.ndarray:
    """Uniformly random k-subset of range(d), sorted.

    The k smallest of d i.i.d. uniforms index a uniform random subset.
    """
    if not 0 < k <= d:
        raise ValueError(f"need 0 < k <= d, got k={k}, d={d}")
    if k == d:
        return np.arange(d)
    u = stream.uniform(d)
    return np.sort(np.argpartition(u, k - 1)[:k])


def subset_masks(u: np.ndarray, k: int) -> np.ndarray:
    """Boolean k-hot masks from rows of uniforms (last axis)."""
    d = u.shape[-1]
    mask = np.zeros(u.shape, dtype=bool)
    if k == d:
        mask[...] = True
        return mask
    idx = np.argpartition(u, k - 1, axis=-1)[..., :k]
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask
