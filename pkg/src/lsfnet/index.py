"""Per-class scalar-projection index with K-nearest-neighbour soft voting.

Each class ``c`` owns a Gaussian projection matrix ``A_c`` (``N x D_sel``)
and stores ``A_c x`` for its own training vectors only. A query is projected
with every ``A_c``; the K closest members of each bucket (Euclidean distance
in the projected space, linear scan) are pooled and vote with weights
``1 / (d + 1e-8)``.

Index file layout (little-endian)::

    magic b"LSFI", u16 version, u32 C, u32 N, u32 D_sel, u32 K, u8 metric, u64 seed
    C x (u32 length, utf-8 class name)
    C x (u64 family seed, u32 member count,
         N*D_sel f64 projection matrix, count*N f64 stored projections,
         count x (u32 length, utf-8 video id))
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, check_magic

INDEX_MAGIC = b"LSFI"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sH4IBQ")
_FAMILY = struct.Struct("<QI")
_U32 = struct.Struct("<I")

VOTE_EPS = 1e-8
METRIC_EUCLIDEAN = 0
DEFAULT_N = 30
DEFAULT_K = 64


@dataclass(frozen=True)
class HashFamily:
    """``N`` scalar projections ``h_j(x) = a_j . x`` stacked as rows of ``matrix``."""

    matrix: np.ndarray
    seed: int

    @property
    def n_hashes(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x) -> np.ndarray:
        # elementwise product + last-axis reduction instead of BLAS: each output
        # depends only on its own row, so a stored vector and an identical query
        # project to bit-identical values
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return (self.matrix * x).sum(axis=-1)
        out = np.empty((x.shape[0], self.n_hashes))
        step = max(1, 2_000_000 // self.matrix.size)
        for start in range(0, x.shape[0], step):
            chunk = x[start:start + step]
            out[start:start + step] = (chunk[:, None, :] * self.matrix[None]).sum(axis=-1)
        return out


def make_family(n_hashes: int, dim: int, seed: int) -> HashFamily:
    if n_hashes < 1 or dim < 1:
        raise DataError("a hash family needs N >= 1 and D_sel >= 1")
    rng = np.random.default_rng(seed)
    return HashFamily(rng.standard_normal((n_hashes, dim)), int(seed))


@dataclass(frozen=True)
class Bucket:
    family: HashFamily
    projections: np.ndarray    # (members, N)
    video_ids: np.ndarray      # (members,) str


@dataclass(frozen=True)
class ProjectionIndex:
    buckets: tuple[Bucket, ...]
    class_names: tuple[str, ...]
    dim: int
    seed: int
    k_default: int = DEFAULT_K
    metric: int = METRIC_EUCLIDEAN

    @property
    def n_classes(self) -> int:
        return len(self.buckets)

    @property
    def n_hashes(self) -> int:
        return self.buckets[0].family.n_hashes

    def bucket_sizes(self) -> list[int]:
        return [len(b.video_ids) for b in self.buckets]


@dataclass(frozen=True)
class Candidate:
    video_id: str
    label: int
    distance: float


@dataclass(frozen=True)
class Vote:
    confidences: np.ndarray
    predicted: int


def build_index(
    features,
    labels,
    n_hashes: int = DEFAULT_N,
    seed: int = 0,
    video_ids: Optional[Sequence[str]] = None,
    class_names: Optional[Sequence[str]] = None,
    n_classes: Optional[int] = None,
    k_default: int = DEFAULT_K,
) -> ProjectionIndex:
    """Project each class's training vectors with that class's own family (seed + c)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DataError("features must be (M, D_sel) with one label per row")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    if n_classes is None:
        n_classes = len(class_names) if class_names is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes})")
    if video_ids is None:
        video_ids = [str(i) for i in range(x.shape[0])]
    video_ids = np.asarray(list(video_ids), dtype=str)
    if class_names is None:
        class_names = [f"class_{c}" for c in range(n_classes)]

    buckets = []
    for c in range(n_classes):
        members = np.flatnonzero(y == c)
        if members.size == 0:
            raise DataError(f"class {c} ({class_names[c]}) has no training vectors; merge or drop it")
        family = make_family(n_hashes, x.shape[1], seed + c)
        proj = family(x[members])
        proj.flags.writeable = False
        buckets.append(Bucket(family, proj, video_ids[members]))
    return ProjectionIndex(tuple(buckets), tuple(class_names), x.shape[1], int(seed), int(k_default))


def query_knn(index: ProjectionIndex, y, k: Optional[int] = None) -> list[Candidate]:
    """Up to ``k`` nearest members per class bucket, concatenated in class order.

    Within a bucket results are sorted by ``(distance, video_id)``.
    """
    k = index.k_default if k is None else int(k)
    if k < 1:
        raise DataError("K must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (index.dim,):
        raise DataError(f"query width {y.shape} does not match index width {index.dim}")
    out = []
    for c, bucket in enumerate(index.buckets):
        diff = bucket.projections - bucket.family(y)
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        order = np.lexsort((bucket.video_ids, dist))[:k]
        out.extend(Candidate(str(bucket.video_ids[i]), c, float(dist[i])) for i in order)
    return out


def soft_vote(candidates: Sequence[Candidate], n_classes: int) -> Vote:
    if not candidates:
        raise DataError("soft_vote needs at least one candidate")
    weights = np.zeros(n_classes)
    for cand in candidates:
        weights[cand.label] += 1.0 / (cand.distance + VOTE_EPS)
    confidences = weights / weights.sum()
    # argmax returns the first maximum, i.e. the lower class id on ties
    return Vote(confidences, int(np.argmax(confidences)))


def classify(index: ProjectionIndex, y, k: Optional[int] = None) -> Vote:
    return soft_vote(query_knn(index, y, k), index.n_classes)


# -- persistence -----------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def save_index(index: ProjectionIndex, path) -> None:
    parts = [_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.n_classes, index.n_hashes, index.dim,
                          index.k_default, index.metric, index.seed)]
    parts += [_pack_str(name) for name in index.class_names]
    for b in index.buckets:
        parts.append(_FAMILY.pack(b.family.seed, len(b.video_ids)))
        parts.append(np.ascontiguousarray(b.family.matrix, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b.projections, dtype="<f8").tobytes())
        parts += [_pack_str(str(v)) for v in b.video_ids]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated index file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def string(self) -> str:
        (n,) = self.unpack(_U32)
        return self.take(n).decode("utf-8")

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def load_index(path) -> ProjectionIndex:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such index file")
    r = _Reader(path.read_bytes(), path)
    magic, version, n_classes, n_hashes, dim, k_default, metric, seed = r.unpack(_HEADER)
    check_magic(path, magic, INDEX_MAGIC)
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    if metric != METRIC_EUCLIDEAN:
        raise FormatError(f"{path}: unknown distance metric tag {metric}")
    names = tuple(r.string() for _ in range(n_classes))
    buckets = []
    for _ in range(n_classes):
        fseed, count = r.unpack(_FAMILY)
        matrix = r.floats((n_hashes, dim))
        proj = r.floats((count, n_hashes))
        proj.flags.writeable = False
        ids = np.asarray([r.string() for _ in range(count)], dtype=str)
        buckets.append(Bucket(HashFamily(matrix, fseed), proj, ids))
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: trailing bytes after index payload")
    return ProjectionIndex(tuple(buckets), names, dim, seed, k_default, metric)
