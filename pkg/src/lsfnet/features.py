"""Per-video pooling, Fisher-score ranking and top-q% component selection."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, check_magic

logger = logging.getLogger(__name__)

SELECTOR_MAGIC = b"LSFS"
SELECTOR_VERSION = 1
_HEADER = struct.Struct("<4sHIdI")

FISHER_EPS = 1e-12


@dataclass(frozen=True)
class PooledFeature:
    video_id: str
    values: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[0]


def average_pool(codes, video_id: str = "") -> PooledFeature:
    """Mean over the trajectory axis: ``(N_p, D_code) -> (D_code,)``."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise DataError(f"average_pool needs a non-empty (N_p, D) matrix, got shape {codes.shape}")
    values = codes.mean(axis=0)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{video_id}: pooled feature is not finite")
    return PooledFeature(video_id, values)


@dataclass(frozen=True)
class FisherStats:
    """Per-class moments behind the scores. Standard deviations use 1/n_c."""

    classes: np.ndarray        # (C,) class ids present in the data
    class_sizes: np.ndarray    # (C,)
    class_means: np.ndarray    # (C, D)
    class_stds: np.ndarray     # (C, D)
    global_mean: np.ndarray    # (D,)
    ddof: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def fisher_scores(features, labels, eps: float = FISHER_EPS) -> tuple[FisherStats, np.ndarray]:
    """Between-class over within-class scatter for every feature column.

    ``f_i = sum_c n_c (mu_c_i - mu_i)^2 / (sum_c n_c sigma_c_i^2 + eps)``
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("fisher_scores needs at least two samples")
    if y.shape != (x.shape[0],):
        raise DataError("need exactly one label per sample")
    classes, inverse, sizes = np.unique(y, return_inverse=True, return_counts=True)
    n_cls = len(classes)
    sums = np.zeros((n_cls, x.shape[1]))
    np.add.at(sums, inverse, x)
    means = sums / sizes[:, None]
    centred = x - means[inverse]
    sq = np.zeros_like(sums)
    np.add.at(sq, inverse, centred * centred)
    stds = np.sqrt(sq / sizes[:, None])
    mu = x.mean(axis=0)

    stats = FisherStats(classes, sizes, means, stds, mu)
    if n_cls == 1:
        logger.warning("all %d samples share label %r; every Fisher score is 0", x.shape[0], classes[0])
        return stats, np.zeros(x.shape[1])
    between = (sizes[:, None] * (means - mu) ** 2).sum(axis=0)
    within = (sizes[:, None] * stds ** 2).sum(axis=0)
    perfect = np.flatnonzero((within == 0.0) & (between > 0.0))
    if perfect.size:
        logger.info("components %s separate the classes perfectly", perfect.tolist())
    return stats, between / (within + eps)


def n_selected(q: float, width: int) -> int:
    if not 0 < q <= 100:
        raise DataError(f"q must lie in (0, 100], got {q}")
    # rounding absorbs float noise such as 0.1 * 30 = 3.0000000000000004
    return min(width, max(1, math.ceil(round(q * width / 100, 9))))


@dataclass(frozen=True)
class FeatureSelector:
    """Fisher scores plus the retained component indexes (ascending)."""

    scores: np.ndarray
    selected: np.ndarray
    q: float

    @property
    def width(self) -> int:
        return self.scores.shape[0]

    def ranking(self) -> np.ndarray:
        """All components ordered by descending score, lower index first on ties."""
        return np.argsort(-self.scores, kind="stable")


def fit_selector(scores, q: float = 50.0) -> FeatureSelector:
    """Keep the ``ceil(q% * D)`` best-scoring components."""
    scores = np.asarray(scores, dtype=np.float64)
    k = n_selected(q, scores.shape[0])
    order = np.argsort(-scores, kind="stable")
    return FeatureSelector(scores.copy(), np.sort(order[:k]), float(q))


def apply_selection(selector: FeatureSelector, feature) -> np.ndarray:
    values = feature.values if isinstance(feature, PooledFeature) else np.asarray(feature, dtype=np.float64)
    if values.shape[-1] != selector.width:
        raise DataError(f"feature width {values.shape[-1]} does not match selector width {selector.width}")
    return values[..., selector.selected]


def save_selector(selector: FeatureSelector, path) -> None:
    """Binary layout: magic, u16 version, u32 width, f64 q, u32 count, f64 scores, u32 indexes."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SELECTOR_MAGIC, SELECTOR_VERSION, selector.width, selector.q, len(selector.selected)))
        fh.write(np.ascontiguousarray(selector.scores, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(selector.selected, dtype="<u4").tobytes())


def load_selector(path) -> FeatureSelector:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such selector file")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, width, q, count = _HEADER.unpack_from(raw)
    check_magic(path, magic, SELECTOR_MAGIC)
    if version != SELECTOR_VERSION:
        raise FormatError(f"{path}: unsupported selector version {version}")
    if len(raw) != _HEADER.size + 8 * width + 4 * count:
        raise FormatError(f"{path}: payload size does not match header")
    scores = np.frombuffer(raw, dtype="<f8", count=width, offset=_HEADER.size).astype(np.float64)
    selected = np.frombuffer(raw, dtype="<u4", count=count, offset=_HEADER.size + 8 * width).astype(np.int64)
    if count and (selected.max() >= width or len(np.unique(selected)) != count):
        raise FormatError(f"{path}: selected indexes are out of range or repeated")
    return FeatureSelector(scores, selected, q)


def export_selector_csv(selector: FeatureSelector, path) -> None:
    chosen = set(selector.selected.tolist())
    with open(path, "w") as fh:
        fh.write("component,score,selected\n")
        for i, s in enumerate(selector.scores):
            fh.write(f"{i},{s!r},{int(i in chosen)}\n")


def write_features_csv(path, video_ids, features) -> None:
    """``video_id,v0,...,v{D-1}`` with round-trippable float text."""
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("video_id," + ",".join(f"v{i}" for i in range(features.shape[1])) + "\n")
        for vid, row in zip(video_ids, features):
            fh.write(vid + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_features_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such features file")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("video_id,"):
        raise FormatError(f"{path}: missing 'video_id,v0,...' header")
    width = len(lines[0].split(",")) - 1
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width + 1:
            raise FormatError(f"{path}:{lineno}: expected {width} values")
        ids.append(parts[0])
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value") from None
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), width)
