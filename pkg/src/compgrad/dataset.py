"""LIBSVM parsing, sample partitioning across nodes, and synthetic profiles."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp

from .numerics import CH_PARTITION, SERVER, uniform_block

_LABEL_MAP = {0.0: -1.0, 1.0: 1.0, -1.0: -1.0, 2.0: -1.0}


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class SparseDataset:
    rows: tuple  # of (indices int64 array, values float64 array)
    labels: np.ndarray
    d: int

    @property
    def m(self) -> int:
        return len(self.rows)

    def to_csr(self) -> sp.csr_matrix:
        indptr = np.zeros(self.m + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(idx) for idx, _ in self.rows])
        if self.m:
            indices = np.concatenate([idx for idx, _ in self.rows]).astype(np.int64)
            data = np.concatenate([val for _, val in self.rows]).astype(np.float64)
        else:
            indices, data = np.zeros(0, np.int64), np.zeros(0)
        return sp.csr_matrix((data, indices, indptr), shape=(self.m, self.d))

    def __eq__(self, other):
        if not isinstance(other, SparseDataset):
            return NotImplemented
        return (
            self.d == other.d
            and self.m == other.m
            and np.array_equal(self.labels, other.labels)
            and all(
                np.array_equal(i1, i2) and np.array_equal(v1, v2)
                for (i1, v1), (i2, v2) in zip(self.rows, other.rows)
            )
        )


def _parse_label(tok: str, lineno: int) -> float:
    try:
        raw = float(tok)
    except ValueError:
        raise ParseError(lineno, f"label {tok!r} is not numeric") from None
    if raw not in _LABEL_MAP:
        raise ParseError(lineno, f"label {tok!r} not in {{0, 1, -1, +1, 2}}")
    return _LABEL_MAP[raw]


def parse_libsvm(lines: Iterable[str] | TextIO | str, d: int | None = None) -> SparseDataset:
    """Parse ``<label> <index>:<value> ...`` lines with 1-based indices."""
    if isinstance(lines, str):
        lines = io.StringIO(lines)
    rows, labels, max_idx = [], [], 0
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        labels.append(_parse_label(toks[0], lineno))
        idx = np.empty(len(toks) - 1, dtype=np.int64)
        val = np.empty(len(toks) - 1, dtype=np.float64)
        prev = 0
        for j, tok in enumerate(toks[1:]):
            key, sep, value = tok.partition(":")
            if not sep or not key or not value:
                raise ParseError(lineno, f"malformed feature token {tok!r}")
            if not key.isdigit():
                raise ParseError(lineno, f"feature index {key!r} is not a positive integer")
            k = int(key)
            if k < 1:
                raise ParseError(lineno, f"feature index {k} must be >= 1")
            if k <= prev:
                what = "duplicate" if k == prev else "non-increasing"
                raise ParseError(lineno, f"{what} feature index {k} after {prev}")
            try:
                v = float(value)
            except ValueError:
                raise ParseError(lineno, f"feature value {value!r} is not numeric") from None
            if not math.isfinite(v):
                raise ParseError(lineno, f"feature value {value!r} is not finite")
            idx[j], val[j], prev = k - 1, v, k
        max_idx = max(max_idx, prev)
        rows.append((idx, val))
    if d is None:
        d = max_idx
    elif d < max_idx:
        raise ValueError(f"dimension override {d} is below the largest index {max_idx}")
    return SparseDataset(tuple(rows), np.asarray(labels, dtype=np.float64), d)


def load_libsvm(path, d: int | None = None) -> SparseDataset:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_libsvm(fh, d)


def serialize_libsvm(ds: SparseDataset) -> str:
    out = []
    for (idx, val), label in zip(ds.rows, ds.labels):
        feats = " ".join(f"{i + 1}:{v!r}" for i, v in zip(idx.tolist(), val.tolist()))
        out.append(f"{'+1' if label > 0 else '-1'} {feats}".rstrip())
    return "\n".join(out) + "\n"


# -- partitioning ------------------------------------------------------------


@dataclass(frozen=True)
class Partition:
    node_sample_indices: tuple

    @property
    def n(self) -> int:
        return len(self.node_sample_indices)


def partition(m: int, n: int, scheme: str = "shuffled", seed: int = 0) -> Partition:
    """Split ``range(m)`` into ``n`` near-equal parts.

    Node ``i`` receives positions ``[floor(i*m/n), floor((i+1)*m/n))`` of either the
    identity order (``contiguous``) or a seeded permutation (``shuffled``).
    """
    if isinstance(m, SparseDataset):
        m = m.m
    if n < 1:
        raise ValueError("need at least one node")
    if n > m:
        raise ValueError(f"cannot split {m} samples over {n} nodes")
    if scheme == "contiguous":
        order = np.arange(m)
    elif scheme == "shuffled":
        keys = uniform_block(seed, SERVER, 0, CH_PARTITION, m)
        order = np.argsort(keys, kind="stable")
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    cuts = [(i * m) // n for i in range(n + 1)]
    return Partition(tuple(np.sort(order[cuts[i] : cuts[i + 1]]) for i in range(n)))


# -- synthetic stand-ins -----------------------------------------------------

# Categorical attribute sizes; one-hot encoded they give 112 binary features.
_MUSHROOM_CARDS = [6, 4, 10, 2, 9, 2, 2, 2, 12, 2, 4, 4, 4, 9, 9, 1, 4, 3, 5, 9, 6, 3]
# 14 attributes, 123 binary features, like the adult-derived a-series.
_ADULT_CARDS = [5, 8, 16, 7, 14, 6, 5, 2, 3, 3, 41, 3, 5, 5]


def _one_hot_rows(rng, m: int, cards: list[int]) -> np.ndarray:
    cols, off = [], 0
    for c in cards:
        probs = rng.dirichlet(np.full(c, 0.7))
        cols.append(off + rng.choice(c, size=m, p=probs))
        off += c
    return np.stack(cols, axis=1)


def _from_columns(cols: np.ndarray, labels: np.ndarray, d: int) -> SparseDataset:
    rows = tuple((np.sort(c).astype(np.int64), np.ones(len(c))) for c in cols)
    return SparseDataset(rows, labels.astype(np.float64), d)


def synthetic_mushrooms(seed: int = 2020) -> SparseDataset:
    """8124 x 112 one-hot samples, 22 active features per row, linearly separable labels."""
    rng = np.random.default_rng(seed)
    cards = _MUSHROOM_CARDS
    cols = _one_hot_rows(rng, 8124, cards)
    w = rng.standard_normal(sum(cards)) * 0.3
    # one dominant attribute, as in the real data
    w[22:31] = rng.standard_normal(9) * 3.0
    score = w[cols].sum(axis=1)
    score -= np.median(score)
    labels = np.where(score > 0, 1.0, -1.0)
    return _from_columns(cols, labels, sum(cards))


def synthetic_a5a(seed: int = 2021) -> SparseDataset:
    """6414 x 123 one-hot samples, 14 active features per row, noisy labels (~24% positive)."""
    rng = np.random.default_rng(seed)
    cards = _ADULT_CARDS
    cols = _one_hot_rows(rng, 6414, cards)
    w = rng.standard_normal(sum(cards))
    score = w[cols].sum(axis=1)
    score -= np.quantile(score, 0.76)
    p = 1.0 / (1.0 + np.exp(-2.0 * score))
    labels = np.where(rng.random(len(p)) < p, 1.0, -1.0)
    return _from_columns(cols, labels, sum(cards))


SYNTHETIC = {"synth-mushrooms": synthetic_mushrooms, "synth-a5a": synthetic_a5a}


def resolve_dataset(name: str, search: Iterable[str | os.PathLike] = ()) -> tuple[SparseDataset, str]:
    """Load a dataset by synthetic profile name, path, or bare name in a data directory.

    Bare names are looked up in ``search`` and ``$COMPGRAD_DATA``. Returns the
    dataset and the resolved source string.
    """
    if name in SYNTHETIC:
        return SYNTHETIC[name](), name
    candidates = [Path(name)]
    dirs = list(search)
    if os.environ.get("COMPGRAD_DATA"):
        dirs.append(os.environ["COMPGRAD_DATA"])
    candidates += [Path(dd) / name for dd in dirs]
    for path in candidates:
        if path.is_file():
            return load_libsvm(path), str(path.resolve())
    raise FileNotFoundError(
        f"dataset {name!r} not found (tried {', '.join(map(str, candidates))}); "
        f"synthetic profiles: {', '.join(SYNTHETIC)}"
    )
