"""Trajectory-aligned descriptor files, dataset manifests and row sampling.

Binary descriptor layout (little-endian)::

    magic   4s   b"LSFD"
    version u16
    n_rows  u64
    width   u32
    blocks  4 x u32    trajectory, HOG, HOF, MBH widths
    payload n_rows * width float32, row-major

A CSV variant (one row per line, comma separated) is accepted on load.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, check_magic

logger = logging.getLogger(__name__)

DESCRIPTOR_MAGIC = b"LSFD"
DESCRIPTOR_VERSION = 1
_HEADER = struct.Struct("<4sHQI4I")

# trajectory shape, HOG, HOF, MBH (x and y)
DEFAULT_BLOCK_WIDTHS = (30, 96, 108, 192)

BACKGROUND_CLASSES = (
    "tree_waving",
    "camera_shaking",
    "noisy_video",
    "rainy",
    "illumination",
    "normal_video",
)


@dataclass(frozen=True)
class DescriptorMatrix:
    """All descriptor rows of one video, shape ``(n_points, width)``."""

    video_id: str
    rows: np.ndarray
    block_widths: tuple[int, int, int, int] = DEFAULT_BLOCK_WIDTHS

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise DataError(f"{self.video_id}: need a non-empty 2-D matrix, got shape {rows.shape}")
        widths = tuple(int(w) for w in self.block_widths)
        if len(widths) != 4 or min(widths) <= 0:
            raise DataError(f"{self.video_id}: block widths must be four positive ints, got {widths}")
        if sum(widths) != rows.shape[1]:
            raise DataError(
                f"{self.video_id}: block widths {widths} sum to {sum(widths)}, rows have width {rows.shape[1]}"
            )
        bad = _first_nonfinite_row(rows)
        if bad is not None:
            raise DataError(f"{self.video_id}: non-finite value in row {bad}")
        rows = rows.copy() if rows.flags.writeable else rows
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "block_widths", widths)

    @property
    def n_points(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    path: Path
    background_label: Optional[int] = None
    foreground: Optional[bool] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_names: tuple[str, ...]
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    def labels(self, task: str = "background") -> np.ndarray:
        """Integer labels for ``task`` ("background" or "foreground")."""
        out = []
        for e in self.entries:
            value = e.background_label if task == "background" else e.foreground
            if value is None:
                raise DataError(f"video {e.video_id} has no {task} label")
            out.append(int(value))
        return np.asarray(out, dtype=np.int64)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.video_id: e for e in self.entries}


@dataclass(frozen=True)
class LabeledDescriptorBatch:
    rows: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise DataError("a batch needs at least one row")
        if self.labels.shape != (self.rows.shape[0],):
            raise DataError("one label per row required")

    def __len__(self):
        return self.rows.shape[0]


def _first_nonfinite_row(rows: np.ndarray) -> Optional[int]:
    ok = np.isfinite(rows).all(axis=1)
    if ok.all():
        return None
    return int(np.argmin(ok))


def save_descriptors(matrix: DescriptorMatrix, path) -> None:
    rows = np.ascontiguousarray(matrix.rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, rows.shape[0], rows.shape[1], *matrix.block_widths))
        fh.write(rows.tobytes())


def read_descriptor_header(path) -> tuple[int, int, tuple[int, ...]]:
    """Return ``(n_rows, width, block_widths)`` without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_rows, width, *blocks = _HEADER.unpack(head)
    check_magic(path, magic, DESCRIPTOR_MAGIC)
    if version != DESCRIPTOR_VERSION:
        raise FormatError(f"{path}: unsupported descriptor version {version}")
    return n_rows, width, tuple(blocks)


def _load_binary(path: Path, video_id: str) -> DescriptorMatrix:
    n_rows, width, blocks = read_descriptor_header(path)
    if n_rows < 1 or sum(blocks) != width or min(blocks) < 1:
        raise FormatError(f"{path}: header declares {n_rows} rows of width {width} with blocks {blocks}")
    raw = path.read_bytes()[_HEADER.size:]
    expected = n_rows * width * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: payload has {len(raw)} bytes, header implies {expected}")
    rows = np.frombuffer(raw, dtype="<f4").reshape(n_rows, width)
    bad = _first_nonfinite_row(rows)
    if bad is not None:
        raise FormatError(f"{path}: non-finite value in row {bad}")
    return DescriptorMatrix(video_id, rows, blocks)


def _load_csv(path: Path, video_id: str, widths: tuple[int, ...]) -> DescriptorMatrix:
    d_in = sum(widths)
    rows = []
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise FormatError(f"{path}: neither an LSFD binary file nor CSV text") from None
    for i, line in enumerate(ln for ln in text.splitlines() if ln.strip()):
        parts = line.strip().split(",")
        if len(parts) != d_in:
            raise FormatError(f"{path}: row {i} has width {len(parts)}, expected {d_in}")
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}: row {i} is not numeric ({exc})") from None
        if not np.all(np.isfinite(values)):
            raise FormatError(f"{path}: non-finite value in row {i}")
        rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no descriptor rows")
    return DescriptorMatrix(video_id, np.asarray(rows, dtype=np.float32), widths)


def load_descriptors(
    path,
    expected_block_widths: Sequence[int] = DEFAULT_BLOCK_WIDTHS,
    video_id: Optional[str] = None,
    check_norms: bool = False,
) -> DescriptorMatrix:
    """Load a descriptor file (binary, or CSV when the magic is absent).

    Args:
        path: descriptor file.
        expected_block_widths: the four block widths; the binary header must
            agree with them, the CSV reader takes them as given.
        video_id: defaults to the file stem.
        check_norms: log a warning when a block's mean L2 norm is more than
            0.1 away from 1. Rows are never rescaled.
    """
    path = Path(path)
    widths = tuple(int(w) for w in expected_block_widths)
    video_id = video_id if video_id is not None else path.stem
    if not path.is_file():
        raise FormatError(f"{path}: no such descriptor file")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == DESCRIPTOR_MAGIC:
        matrix = _load_binary(path, video_id)
        if matrix.block_widths != widths:
            raise FormatError(f"{path}: block widths {matrix.block_widths} differ from expected {widths}")
    else:
        matrix = _load_csv(path, video_id, widths)
    if check_norms:
        _warn_on_norms(matrix)
    return matrix


def _warn_on_norms(matrix: DescriptorMatrix) -> None:
    start = 0
    for name, w in zip(("trajectory", "hog", "hof", "mbh"), matrix.block_widths):
        norms = np.linalg.norm(matrix.rows[:, start:start + w].astype(np.float64), axis=1)
        start += w
        if abs(norms.mean() - 1.0) > 0.1:
            logger.warning("%s: %s block mean L2 norm %.3f is not ~1", matrix.video_id, name, norms.mean())


# -- manifests ---------------------------------------------------------------

def _parse_header(line: str) -> tuple[str, tuple[str, ...]]:
    if not line.startswith("#"):
        raise FormatError("manifest must start with a '#split=...;classes=...' header line")
    fields = {}
    for part in line[1:].strip().split(";"):
        key, _, value = part.partition("=")
        fields[key.strip()] = value.strip()
    if "classes" not in fields or not fields["classes"]:
        raise FormatError("manifest header lacks classes=")
    return fields.get("split", "train"), tuple(c.strip() for c in fields["classes"].split(","))


def load_manifest(path, split: Optional[str] = None) -> DatasetManifest:
    """Parse a manifest file. Descriptor paths are relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such manifest")
    lines = [ln.rstrip("\n") for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        file_split, class_names = _parse_header(lines[0])
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    n_classes = len(class_names)
    entries, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        vid, rel, label, flag = parts
        if vid in seen:
            raise DataError(f"{path}:{lineno}: duplicate video id {vid!r}")
        seen.add(vid)
        bg = None if label == "-" else int(label)
        if bg is not None and not 0 <= bg < n_classes:
            raise DataError(f"{path}:{lineno}: label {bg} outside [0, {n_classes})")
        if flag not in ("-", "0", "1"):
            raise FormatError(f"{path}:{lineno}: foreground flag must be 0, 1 or -")
        fg = None if flag == "-" else flag == "1"
        fpath = (path.parent / rel).resolve()
        if not fpath.is_file():
            raise DataError(f"{path}:{lineno}: descriptor file {fpath} does not exist")
        entries.append(ManifestEntry(vid, fpath, bg, fg))
    return DatasetManifest(tuple(entries), class_names, split or file_split)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    out = [f"#split={manifest.split};classes={','.join(manifest.class_names)}"]
    for e in manifest.entries:
        try:
            rel = Path(e.path).resolve().relative_to(base)
        except ValueError:
            rel = Path(e.path).resolve()
        label = "-" if e.background_label is None else str(e.background_label)
        flag = "-" if e.foreground is None else str(int(e.foreground))
        out.append(f"{e.video_id},{rel.as_posix()},{label},{flag}")
    path.write_text("\n".join(out) + "\n")


# -- sampling -----------------------------------------------------------------

def count_rows(path: Path, widths) -> int:
    with open(path, "rb") as fh:
        binary = fh.read(4) == DESCRIPTOR_MAGIC
    if binary:
        return read_descriptor_header(path)[0]
    return load_descriptors(path, widths).n_points


def sample_labeled_rows(
    manifest: DatasetManifest,
    sample_size: int,
    seed: int,
    block_widths: Sequence[int] = DEFAULT_BLOCK_WIDTHS,
) -> LabeledDescriptorBatch:
    """Draw ``sample_size`` descriptor rows uniformly from all videos.

    Each row carries its video's background label. Sampling is without
    replacement unless the population is smaller than ``sample_size``.
    """
    if len(manifest) == 0:
        raise DataError("cannot sample from an empty manifest")
    if sample_size < 1:
        raise DataError("sample_size must be positive")
    labels = manifest.labels("background")
    counts = np.array([count_rows(e.path, block_widths) for e in manifest.entries], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])

    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=sample_size, replace=sample_size > total)
    owner = np.searchsorted(offsets, flat, side="right") - 1

    rows = np.empty((sample_size, sum(block_widths)), dtype=np.float32)
    for v in np.unique(owner):
        slots = np.flatnonzero(owner == v)
        matrix = load_descriptors(manifest.entries[v].path, block_widths)
        rows[slots] = matrix.rows[flat[slots] - offsets[v]]
    return LabeledDescriptorBatch(rows, labels[owner])
