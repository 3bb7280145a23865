"""Gaussian descriptor clouds for exercising the pipeline without real video.

Every background class gets a centroid in descriptor space; centroids are
placed on orthogonal axes so that every pair sits exactly
``separation * sigma`` apart. Each trajectory row is its class centroid plus
isotropic noise of standard deviation ``sigma`` per component. Videos with the
foreground flag additionally shift a fraction of their rows along a further
orthogonal direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptors import (
    BACKGROUND_CLASSES,
    DEFAULT_BLOCK_WIDTHS,
    DatasetManifest,
    DescriptorMatrix,
    ManifestEntry,
    save_descriptors,
    save_manifest,
)


@dataclass
class SyntheticSpec:
    n_classes: int = 6
    n_train: int = 600
    n_test: int = 300
    min_points: int = 50
    max_points: int = 500
    separation: float = 10.0
    sigma: float = 0.05
    foreground_fraction: float = 0.3   # share of videos flagged foreground
    foreground_rows: float = 0.3       # share of a flagged video's rows that move
    block_widths: tuple = DEFAULT_BLOCK_WIDTHS
    seed: int = 0


def class_geometry(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Centroids ``(C, D)`` and a unit foreground direction ``(D,)``."""
    dim = sum(spec.block_widths)
    q, _ = np.linalg.qr(rng.standard_normal((dim, spec.n_classes + 1)))
    axes = q.T
    offset = rng.normal(0.0, spec.sigma, size=dim)
    # orthonormal axes scaled by s are s*sqrt(2) apart
    centroids = offset + axes[:spec.n_classes] * (spec.separation * spec.sigma / np.sqrt(2.0))
    return centroids, axes[spec.n_classes]


def _class_names(n: int) -> tuple[str, ...]:
    if n <= len(BACKGROUND_CLASSES):
        return BACKGROUND_CLASSES[:n]
    return tuple(f"class_{c}" for c in range(n))


def generate(out_dir, spec: SyntheticSpec = None) -> tuple[Path, Path]:
    """Write descriptor files plus ``train_manifest.txt`` / ``test_manifest.txt``.

    Returns the two manifest paths.
    """
    spec = spec or SyntheticSpec()
    out_dir = Path(out_dir)
    desc_dir = out_dir / "descriptors"
    desc_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    centroids, fg_axis = class_geometry(spec, rng)
    fg_shift = fg_axis * spec.separation * spec.sigma
    names = _class_names(spec.n_classes)

    paths = []
    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        labels = rng.permutation(np.arange(count) % spec.n_classes)
        entries = []
        for i, label in enumerate(labels):
            vid = f"{split}_{i:05d}"
            n_points = int(rng.integers(spec.min_points, spec.max_points + 1))
            rows = centroids[label] + rng.normal(0.0, spec.sigma, size=(n_points, centroids.shape[1]))
            foreground = bool(rng.random() < spec.foreground_fraction)
            if foreground:
                moved = rng.random(n_points) < spec.foreground_rows
                rows[moved] += fg_shift
            path = desc_dir / f"{vid}.lsfd"
            save_descriptors(DescriptorMatrix(vid, rows.astype(np.float32), spec.block_widths), path)
            entries.append(ManifestEntry(vid, path, int(label), foreground))
        manifest_path = out_dir / f"{split}_manifest.txt"
        save_manifest(DatasetManifest(tuple(entries), names, split), manifest_path)
        paths.append(manifest_path)
    return paths[0], paths[1]
