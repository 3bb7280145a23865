"""Stage functions behind the ``lsf`` command line.

Training phase 1 fits the fusion network on sampled descriptor rows; phase 2
encodes and pools every video, fits the Fisher selector and builds the
projection index. Testing runs the same encode/pool/select path per video and
classifies by soft voting. Every stage reads and writes its own artifact file.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import descriptors, features, network
from . import index as simindex
from .errors import DataError

logger = logging.getLogger(__name__)

FOREGROUND_CLASSES = ("no_foreground", "foreground")
TASKS = ("background", "foreground")


@dataclass
class PipelineConfig:
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    out_dir: str = "lsf_out"
    model: Optional[str] = None
    selector: Optional[str] = None
    index: Optional[str] = None
    train_features: Optional[str] = None
    test_features: Optional[str] = None
    task: str = "background"
    selector_task: str = "background"
    q: float = 50.0
    n_hashes: int = simindex.DEFAULT_N
    k: int = simindex.DEFAULT_K
    n_grid: tuple = (10, 20, 30, 40, 50)
    k_grid: tuple = (50, 75, 100)
    random_pairs: int = 0
    sample_size: int = 1_000_000
    hidden: int = 256
    code: int = 128
    head_hidden: int = 0
    block_widths: tuple = descriptors.DEFAULT_BLOCK_WIDTHS
    lr_autoencoder: float = 1e-3
    lr_classifier: float = 1e-2
    iterations: int = 200
    batch_size: int = 256
    early_stop: bool = False
    seed: int = 0
    workers: int = 1
    check_norms: bool = False

    def __post_init__(self):
        if self.task not in TASKS or self.selector_task not in TASKS:
            raise DataError(f"task must be one of {TASKS}")
        if not 0 < self.q <= 100:
            raise DataError(f"q must lie in (0, 100], got {self.q}")
        if not self.n_grid or not self.k_grid:
            raise DataError("the (N, K) sweep ranges must be non-empty")
        if self.workers < 1:
            raise DataError("workers must be >= 1")

    def artifact(self, name: str) -> Path:
        """Explicit path for ``name`` if configured, else a default inside ``out_dir``."""
        explicit = getattr(self, name)
        if explicit:
            return Path(explicit)
        defaults = {"model": "model.lsfm", "selector": "selector.lsfs", "index": "index.lsfi",
                    "train_features": "train_features.csv", "test_features": "test_features.csv"}
        return Path(self.out_dir) / defaults[name]

    def train_config(self) -> network.TrainConfig:
        return network.TrainConfig(self.lr_autoencoder, self.lr_classifier, self.iterations,
                                   self.batch_size, self.seed + 2, self.early_stop)

    def manifest(self, split: str) -> descriptors.DatasetManifest:
        path = self.train_manifest if split == "train" else self.test_manifest
        if not path:
            raise DataError(f"no {split}_manifest configured")
        return descriptors.load_manifest(path, split)

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        """Build from string or typed values, ignoring ``None``."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if raw is None:
                continue
            key = key.replace("-", "_")
            if key not in types:
                raise DataError(f"unknown config key {key!r}")
            kwargs[key] = _convert(types[key], raw, key)
        return cls(**kwargs)


def _convert(type_name: str, raw, key: str):
    if not isinstance(raw, str):
        return tuple(raw) if type_name == "tuple" else raw
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if type_name == "tuple":
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise DataError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from None
    return raw


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


Log = Callable[[str], None]


def _nolog(msg: str) -> None:
    logger.info(msg)


def task_labels(manifest: descriptors.DatasetManifest, task: str) -> tuple[np.ndarray, tuple[str, ...]]:
    names = manifest.class_names if task == "background" else FOREGROUND_CLASSES
    return manifest.labels(task), names


# -- phase 1 -------------------------------------------------------------------

def cmd_train_fusion(config: PipelineConfig, log: Log = _nolog) -> Path:
    manifest = config.manifest("train")
    manifest.labels("background")
    out = config.artifact("model")
    out.parent.mkdir(parents=True, exist_ok=True)

    widths = config.block_widths
    total = sum(descriptors.count_rows(e.path, widths) for e in manifest.entries)
    size = min(config.sample_size, total)
    log(f"sampling {size} of {total} descriptor rows from {len(manifest)} videos")
    batch = descriptors.sample_labeled_rows(manifest, size, config.seed, widths)

    dims = (sum(widths), config.hidden, config.code)
    model = network.init_model(dims, len(manifest.class_names), config.seed + 1, config.head_hidden)
    model, history = network.train(model, batch, config.train_config(), log=log)
    network.save_model(model, out)
    history.to_csv(out.with_name(out.stem + "_loss.csv"))
    l1, l2 = history.epoch_means("L1"), history.epoch_means("L2")
    log(f"L1 {l1[0]:.6g} -> {l1[-1]:.6g}, L2 {l2[0]:.6g} -> {l2[-1]:.6g}; model written to {out}")
    return out


# -- phase 2 -------------------------------------------------------------------

def video_feature(model: network.LSFNetModel, path, widths, check_norms: bool = False) -> np.ndarray:
    """Load, encode and average-pool one video: returns a ``(D_code,)`` vector."""
    matrix = descriptors.load_descriptors(path, widths, check_norms=check_norms)
    return features.average_pool(network.encode(model, matrix.rows), matrix.video_id).values


def extract_features(config: PipelineConfig, manifest: descriptors.DatasetManifest,
                     model: Optional[network.LSFNetModel] = None) -> tuple[list[str], np.ndarray, dict]:
    """Pooled features in manifest order plus a ``{video_id: error}`` map."""
    model = model or network.load_model(config.artifact("model"))

    def one(entry):
        try:
            return video_feature(model, entry.path, config.block_widths, config.check_norms), None
        except Exception as exc:  # collected and reported per video
            return None, f"{type(exc).__name__}: {exc}"

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(one, manifest.entries))
    else:
        results = [one(e) for e in manifest.entries]
    ids, rows, failures = [], [], {}
    for entry, (vec, err) in zip(manifest.entries, results):
        if err is not None:
            failures[entry.video_id] = err
        else:
            ids.append(entry.video_id)
            rows.append(vec)
    width = model.layer_dims[2]
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), width), failures


def cmd_extract(config: PipelineConfig, split: str = "train", log: Log = _nolog) -> Path:
    manifest = config.manifest(split)
    ids, feats, failures = extract_features(config, manifest)
    out = config.artifact(f"{split}_features")
    out.parent.mkdir(parents=True, exist_ok=True)
    features.write_features_csv(out, ids, feats)
    log(f"wrote {len(ids)} pooled features of width {feats.shape[1]} to {out}")
    if failures:
        for vid, err in failures.items():
            log(f"  failed {vid}: {err}")
        raise DataError(f"{len(failures)} of {len(manifest)} videos failed during extraction")
    return out


def _labelled_features(config: PipelineConfig, task: str):
    manifest = config.manifest("train")
    ids, feats = features.read_features_csv(config.artifact("train_features"))
    labels, names = task_labels(manifest, task)
    lookup = {e.video_id: i for i, e in enumerate(manifest.entries)}
    missing = [v for v in ids if v not in lookup]
    if missing:
        raise DataError(f"features file has videos absent from the manifest: {missing[:5]}")
    return ids, feats, labels[[lookup[v] for v in ids]], names


def cmd_fit_selector(config: PipelineConfig, log: Log = _nolog) -> Path:
    _, feats, labels, _ = _labelled_features(config, config.selector_task)
    _, scores = features.fisher_scores(feats, labels)
    selector = features.fit_selector(scores, config.q)
    out = config.artifact("selector")
    out.parent.mkdir(parents=True, exist_ok=True)
    features.save_selector(selector, out)
    features.export_selector_csv(selector, out.with_suffix(".csv"))
    log(f"kept {len(selector.selected)} of {selector.width} components (q={config.q:g})")
    for rank, comp in enumerate(selector.ranking()[:10], start=1):
        log(f"  {rank:2d}. component {comp:3d}  fisher {selector.scores[comp]:.6g}")
    return out


def _build(config, feats, labels, names, ids, selector, n_hashes):
    return simindex.build_index(features.apply_selection(selector, feats), labels, n_hashes, config.seed,
                             video_ids=ids, class_names=names, k_default=config.k)


def cmd_build_index(config: PipelineConfig, log: Log = _nolog) -> Path:
    ids, feats, labels, names = _labelled_features(config, config.task)
    selector = features.load_selector(config.artifact("selector"))
    idx = _build(config, feats, labels, names, ids, selector, config.n_hashes)
    out = config.artifact("index")
    out.parent.mkdir(parents=True, exist_ok=True)
    simindex.save_index(idx, out)
    log(f"index over {len(ids)} videos, {idx.n_classes} classes, N={idx.n_hashes}: "
        f"bucket sizes {idx.bucket_sizes()} -> {out}")
    return out


# -- testing ---------------------------------------------------------------------

def cmd_classify(config: PipelineConfig, descriptor_path, log: Log = _nolog) -> simindex.Vote:
    model = network.load_model(config.artifact("model"))
    selector = features.load_selector(config.artifact("selector"))
    idx = simindex.load_index(config.artifact("index"))
    vec = video_feature(model, descriptor_path, config.block_widths, config.check_norms)
    vote = simindex.classify(idx, features.apply_selection(selector, vec), config.k)
    log(f"{Path(descriptor_path).name}: {idx.class_names[vote.predicted]} "
        f"(confidence {vote.confidences[vote.predicted]:.4f})")
    for name, conf in zip(idx.class_names, vote.confidences):
        log(f"  {name:<20s} {conf:.6f}")
    return vote


@dataclass
class EvalReport:
    task: str
    class_names: tuple
    default_pair: tuple
    accuracy: float
    confusion: np.ndarray
    pair_accuracies: list
    mean_accuracy: float
    n_train: int
    n_test: int
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "class_names": list(self.class_names),
            "split": {"train": self.n_train, "test": self.n_test},
            "default_pair": {"N": self.default_pair[0], "K": self.default_pair[1]},
            "accuracy": self.accuracy, "confusion": self.confusion.tolist(),
            "pairs": [{"N": n, "K": k, "accuracy": a} for n, k, a in self.pair_accuracies],
            "mean_accuracy": self.mean_accuracy, "timings_s": self.timings,
        }

    def table(self) -> str:
        lines = [f"task {self.task}: {self.n_train} train / {self.n_test} test videos",
                 f"{'N':>4} {'K':>4}  accuracy"]
        lines += [f"{n:>4} {k:>4}  {a:.4f}" for n, k, a in self.pair_accuracies]
        lines.append(f"mean accuracy over {len(self.pair_accuracies)} pairs: {self.mean_accuracy:.4f}")
        n, k = self.default_pair
        lines.append(f"accuracy at N={n}, K={k}: {self.accuracy:.4f}")
        width = max(len(c) for c in self.class_names)
        lines.append("confusion (rows true, columns predicted):")
        for name, row in zip(self.class_names, self.confusion):
            lines.append(f"  {name:<{width}s} " + " ".join(f"{v:5d}" for v in row))
        return "\n".join(lines)

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        report = out_dir / f"eval_{self.task}.json"
        report.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        conf = out_dir / f"confusion_{self.task}.csv"
        with open(conf, "w") as fh:
            fh.write("true\\pred," + ",".join(self.class_names) + "\n")
            for name, row in zip(self.class_names, self.confusion):
                fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
        return report, conf


def sweep_pairs(config: PipelineConfig) -> list[tuple[int, int]]:
    """The fixed ``n_grid x k_grid`` sweep, or seeded random draws from N in [10, 50] and K in [50, 100]."""
    if config.random_pairs:
        rng = np.random.default_rng(config.seed + 3)
        return [(int(rng.integers(10, 51)), int(rng.integers(50, 101))) for _ in range(config.random_pairs)]
    return [(n, k) for n in config.n_grid for k in config.k_grid]


def confusion_matrix(truth, predicted, n_classes: int) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (np.asarray(truth), np.asarray(predicted)), 1)
    return out


def predict_all(idx: simindex.ProjectionIndex, queries: np.ndarray, k: int) -> np.ndarray:
    return np.array([simindex.classify(idx, q, k).predicted for q in queries], dtype=np.int64)


def cmd_evaluate(config: PipelineConfig, log: Log = _nolog) -> EvalReport:
    timings = {}
    t0 = time.perf_counter()
    model = network.load_model(config.artifact("model"))
    selector = features.load_selector(config.artifact("selector"))
    train_ids, train_feats, train_labels, names = _labelled_features(config, config.task)
    test_manifest = config.manifest("test")
    test_ids, test_feats, failures = extract_features(config, test_manifest, model)
    if failures:
        raise DataError(f"{len(failures)} test videos failed: {sorted(failures)[:5]}")
    out = config.artifact("test_features")
    out.parent.mkdir(parents=True, exist_ok=True)
    features.write_features_csv(out, test_ids, test_feats)
    test_labels, _ = task_labels(test_manifest, config.task)
    queries = features.apply_selection(selector, test_feats)
    timings["load_and_extract"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pairs = sweep_pairs(config)
    by_n: dict[int, simindex.ProjectionIndex] = {}

    def idx_for(n):
        if n not in by_n:
            by_n[n] = _build(config, train_feats, train_labels, names, train_ids, selector, n)
        return by_n[n]

    pair_acc = []
    for n, k in pairs:
        acc = float(np.mean(predict_all(idx_for(n), queries, k) == test_labels))
        pair_acc.append((n, k, acc))
        log(f"N={n:3d} K={k:3d}  accuracy {acc:.4f}")
    default_pred = predict_all(idx_for(config.n_hashes), queries, config.k)
    timings["index_and_classify"] = time.perf_counter() - t0

    report = EvalReport(
        task=config.task, class_names=tuple(names), default_pair=(config.n_hashes, config.k),
        accuracy=float(np.mean(default_pred == test_labels)),
        confusion=confusion_matrix(test_labels, default_pred, len(names)),
        pair_accuracies=pair_acc, mean_accuracy=float(np.mean([a for _, _, a in pair_acc])),
        n_train=len(train_ids), n_test=len(test_ids), timings=timings,
    )
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    report.write(config.out_dir)
    log(report.table())
    return report


def run_all(config: PipelineConfig, log: Log = _nolog) -> EvalReport:
    """train-fusion, extract, fit-selector, build-index and evaluate in sequence."""
    cmd_train_fusion(config, log)
    cmd_extract(config, "train", log)
    cmd_fit_selector(config, log)
    cmd_build_index(config, log)
    return cmd_evaluate(config, log)
