"""Unbiased randomized compression operators and their bit-cost model.

Every operator ``C`` satisfies ``E[C(x)] = x`` and
``E||C(x) - x||^2 <= omega * ||x||^2``. Bits are charged per message from a
fixed closed form that depends only on the operator and the dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_vector, subset_masks, uniform_block

KINDS = ("identity", "random_k", "quantization", "natural")

# omega of natural compression; not derivable from the bit cost, taken from
# the natural-compression literature
NATURAL_OMEGA = 1.0 / 8.0


class CompressorError(ValueError):
    pass


@dataclass(frozen=True)
class Compressor:
    kind: str
    d: int
    k: int | None = None  # random_k
    p: float = 2.0  # quantization norm
    s: int | None = None  # quantization levels
    natural_omega: float = NATURAL_OMEGA

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CompressorError(f"unknown compressor kind {self.kind!r}")
        if self.d < 1:
            raise CompressorError(f"dimension must be positive, got {self.d}")
        if self.kind == "random_k" and not (self.k is not None and 0 < self.k <= self.d):
            raise CompressorError(f"random_k needs 0 < k <= d, got k={self.k}, d={self.d}")
        if self.kind == "quantization":
            if self.s is None or self.s < 1:
                raise CompressorError(f"quantization needs s >= 1, got {self.s}")
            if not (self.p == math.inf or self.p >= 1):
                raise CompressorError(f"quantization needs p >= 1, got {self.p}")
        if self.natural_omega < 0:
            raise CompressorError("natural_omega must be non-negative")

    @property
    def name(self) -> str:
        if self.kind == "random_k":
            return f"randk:{self.k}"
        if self.kind == "quantization":
            return f"dithering:{self.s}" if self.p == 2 else f"dithering:{self.s}:p{self.p}"
        return self.kind

    @property
    def lossless(self) -> bool:
        return self.kind == "identity" or (self.kind == "random_k" and self.k == self.d)

    def omega(self) -> float:
        return omega(self)

    def bit_cost(self) -> float:
        return bit_cost(self)


@dataclass(frozen=True)
class CompressedMessage:
    payload: np.ndarray
    bit_cost: float


def identity(d: int) -> Compressor:
    return Compressor("identity", d)


def random_k(d: int, k: int | None = None) -> Compressor:
    return Compressor("random_k", d, k=default_k(d) if k is None else k)


def dithering(d: int, s: int | None = None, p: float = 2.0) -> Compressor:
    return Compressor("quantization", d, p=p, s=default_s(d) if s is None else s)


def natural(d: int, omega: float = NATURAL_OMEGA) -> Compressor:
    return Compressor("natural", d, natural_omega=omega)


def default_k(d: int) -> int:
    return max(1, d // 4)


def default_s(d: int) -> int:
    return max(1, math.isqrt(d))


def omega(c: Compressor) -> float:
    if c.kind == "identity":
        return 0.0
    if c.kind == "random_k":
        return c.d / c.k - 1.0
    if c.kind == "quantization":
        inv_p = 0.0 if c.p == math.inf else 1.0 / c.p
        return 2.0 + (c.d**inv_p + math.sqrt(c.d)) / c.s
    return c.natural_omega


def bit_cost(c: Compressor) -> float:
    """Bits charged for one message; independent of the payload."""
    if c.kind == "random_k":
        return 32.0 * c.k
    if c.kind == "quantization":
        return 2.8 * c.d + 32.0
    if c.kind == "natural":
        return 9.0 * c.d
    return 32.0 * c.d


def compress(c: Compressor, x, stream: RngStream) -> CompressedMessage:
    x = as_vector(x, c.d)
    payload = compress_rows(
        c, x[None, :], stream.master_seed, stream.node, stream.iteration, stream.channel
    )[0]
    return CompressedMessage(payload, bit_cost(c))


def compress_rows(c: Compressor, X: np.ndarray, master_seed: int, node, iteration, channel) -> np.ndarray:
    """Compress each row of ``X`` with its own stream.

    ``node``, ``iteration`` and ``channel`` broadcast to ``X.shape[:-1]``; row r
    uses stream ``(node[r], iteration[r], channel[r])``, so the result for a row
    does not depend on the other rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != c.d:
        raise CompressorError(f"expected rows of length {c.d}, got {X.shape[-1]}")
    if not np.all(np.isfinite(X)):
        raise CompressorError("cannot compress non-finite input")
    if c.kind == "identity" or c.lossless:
        return X

    rows_match = X.ndim == 2 and np.ndim(node) == 1 and len(node) == X.shape[0]
    if not rows_match and not all(np.ndim(a) == 0 for a in (node, iteration, channel)):
        node, iteration, channel = np.broadcast_arrays(
            *(np.broadcast_to(a, X.shape[:-1]) for a in (node, iteration, channel))
        )
    # scalar keys give one row of uniforms shared by every row of X
    u = uniform_block(master_seed, node, iteration, channel, c.d)

    if c.kind == "random_k":
        mask = subset_masks(u, c.k)
        return np.where(mask, (c.d / c.k) * X, 0.0)

    if c.kind == "quantization":
        norms = np.linalg.norm(X, ord=c.p, axis=-1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        ratio = np.abs(X) * c.s / safe
        level = np.floor(ratio)
        xi = level + (u < ratio - level)
        out = np.sign(X) * (safe / c.s) * xi
        return np.where(norms > 0, out, 0.0)

    # natural: round |x_i| to 2^a or 2^(a+1) where 2^a <= |x_i| < 2^(a+1)
    mag = np.abs(X)
    _, e = np.frexp(mag)
    low = np.ldexp(1.0, e - 1)
    up = u < (mag - low) / low
    out = np.sign(X) * np.where(up, 2.0 * low, low)
    return np.where(mag > 0, out, 0.0)


def parse_compressor(text: str, d: int, natural_omega: float = NATURAL_OMEGA) -> Compressor:
    """Parse ``identity``, ``randk[:r]``, ``dithering[:s]`` or ``natural``."""
    name, _, arg = text.strip().partition(":")
    name = name.lower()
    try:
        if name in ("identity", "none"):
            if arg:
                raise CompressorError("identity takes no argument")
            return identity(d)
        if name == "randk":
            return random_k(d, int(arg) if arg else None)
        if name == "dithering":
            return dithering(d, int(arg) if arg else None)
        if name == "natural":
            if arg:
                raise CompressorError("natural takes no argument")
            return natural(d, natural_omega)
    except ValueError as exc:
        if isinstance(exc, CompressorError):
            raise
        raise CompressorError(f"bad compressor argument in {text!r}") from exc
    raise CompressorError(f"unknown compressor {text!r}")

