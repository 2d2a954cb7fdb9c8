"""Hashed bag-of-n-grams features.

Each word n-gram (``n <= ngram_max``, words joined by a single space) is
hashed with keyed BLAKE2b (8-byte digest, key = ``hash_seed`` as 8 little-endian
bytes) and read as an unsigned little-endian 64-bit integer; the feature index
is that integer modulo ``dim``. BLAKE2b is specified in RFC 7693, so indices are
identical on every platform and Python version.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BadConfig, DimensionMismatch


@dataclass(frozen=True)
class FeaturizerConfig:
    dim: int = 2 ** 18
    ngram_max: int = 2
    normalize: bool = True
    hash_seed: int = 0

    def __post_init__(self):
        if self.dim < 2 or self.dim & (self.dim - 1):
            raise BadConfig(f"dim must be a power of two >= 2, got {self.dim}")
        if self.ngram_max not in (1, 2, 3):
            raise BadConfig(f"ngram_max must be 1, 2 or 3, got {self.ngram_max}")
        if not 0 <= self.hash_seed < 2 ** 64:
            raise BadConfig("hash_seed must fit in an unsigned 64-bit integer")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class FeatureVector:
    """Sparse non-negative vector with strictly increasing indices."""

    __slots__ = ("dim", "indices", "values")

    def __init__(self, dim: int, indices, values):
        self.dim = int(dim)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)

    @classmethod
    def zeros(cls, dim: int) -> "FeatureVector":
        return cls(dim, np.empty(0, np.int64), np.empty(0, np.float64))

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (self.dim == other.dim
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"FeatureVector(dim={self.dim}, nnz={self.nnz})"


@lru_cache(maxsize=1 << 20)
def stable_hash(token: str, seed: int = 0) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little")


def ngrams(text: str, ngram_max: int) -> list[str]:
    words = text.split()
    out = []
    for n in range(1, ngram_max + 1):
        out.extend(" ".join(words[i:i + n]) for i in range(len(words) - n + 1))
    return out


def featurize(text: str, cfg: FeaturizerConfig = FeaturizerConfig()) -> FeatureVector:
    grams = ngrams(text, cfg.ngram_max)
    if not grams:
        return FeatureVector.zeros(cfg.dim)
    counts = Counter(stable_hash(g, cfg.hash_seed) % cfg.dim for g in grams)
    idx = np.fromiter(sorted(counts), dtype=np.int64, count=len(counts))
    val = np.array([counts[i] for i in idx.tolist()], dtype=np.float64)
    if cfg.normalize:
        val /= np.sqrt(np.dot(val, val))
    return FeatureVector(cfg.dim, idx, val)


def _featurize_chunk(args):
    texts, cfg = args
    return [featurize(t, cfg) for t in texts]


def featurize_batch(texts: Sequence[str], cfg: FeaturizerConfig = FeaturizerConfig(),
                    workers: int = 1) -> list[FeatureVector]:
    """Featurize ``texts`` in order; ``workers > 1`` uses a process pool."""
    texts = list(texts)
    if workers <= 1 or len(texts) < 2:
        return [featurize(t, cfg) for t in texts]
    size = -(-len(texts) // (workers * 4))
    chunks = [(texts[i:i + size], cfg) for i in range(0, len(texts), size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [v for part in pool.map(_featurize_chunk, chunks) for v in part]


def to_csr(vectors: Sequence[FeatureVector], dim: int | None = None) -> sp.csr_matrix:
    """Stack feature vectors into an ``n x dim`` CSR matrix."""
    if dim is None:
        if not vectors:
            raise ValueError("dim is required for an empty vector list")
        dim = vectors[0].dim
    for v in vectors:
        if v.dim != dim:
            raise DimensionMismatch(f"vector dim {v.dim} != {dim}")
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([v.nnz for v in vectors])
    if vectors:
        indices = np.concatenate([v.indices for v in vectors])
        data = np.concatenate([v.values for v in vectors])
    else:
        indices, data = np.empty(0, np.int64), np.empty(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


def write_triplets(path, vectors: Sequence[FeatureVector]) -> None:
    """Dump vectors as a ``row,index,value`` CSV (one line per non-zero)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "index", "value"])
        for row, v in enumerate(vectors):
            for i, x in zip(v.indices.tolist(), v.values.tolist()):
                w.writerow([row, i, repr(x)])


def read_triplets(path, dim: int, n_rows: int | None = None) -> list[FeatureVector]:
    rows: dict[int, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for r, i, x in reader:
            rows.setdefault(int(r), []).append((int(i), float(x)))
    n = n_rows if n_rows is not None else (max(rows) + 1 if rows else 0)
    out = []
    for r in range(n):
        ent = sorted(rows.get(r, []))
        out.append(FeatureVector(dim, [i for i, _ in ent], [x for _, x in ent]))
    return out
