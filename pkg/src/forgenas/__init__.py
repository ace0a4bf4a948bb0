"""Differentiable architecture search over central-difference convolutions
for face forgery detection, with a cascaded pyramid detection network."""

from .autodiff import Tensor, no_grad
from .cdc import OperatorRegistry, OperationKind, parse_kind, format_kind
from .estimator import Genotype
from .search import SearchConfig, search, cross_dataset_search
from .c2pn import TrainConfig, build, train, evaluate, activation_map
from .data import generate_synthetic, load_directory, SplitSpec
from .metrics import auc, accuracy, MetricsReport

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "OperatorRegistry", "OperationKind", "parse_kind",
    "format_kind", "Genotype", "SearchConfig", "search",
    "cross_dataset_search", "TrainConfig", "build", "train", "evaluate",
    "activation_map", "generate_synthetic", "load_directory", "SplitSpec",
    "auc", "accuracy", "MetricsReport",
]
