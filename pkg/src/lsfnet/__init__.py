"""Fusion of trajectory-aligned video descriptors and similarity-search classification."""

from .descriptors import (
    DatasetManifest,
    DescriptorMatrix,
    LabeledDescriptorBatch,
    load_descriptors,
    load_manifest,
    sample_labeled_rows,
    save_descriptors,
)
from .errors import DataError, DivergenceError, FormatError, LSFError
from .features import FeatureSelector, apply_selection, average_pool, fisher_scores, fit_selector
from .index import ProjectionIndex, Vote, build_index, classify, make_family, query_knn, soft_vote
from .network import (
    LSFNetModel,
    TrainConfig,
    classify_logits,
    encode,
    init_model,
    reconstruct,
    train,
    train_step_ae,
    train_step_cls,
)

__version__ = "0.1.0"
