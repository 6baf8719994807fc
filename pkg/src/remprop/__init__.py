"""Personal-indicator label propagation over object embedding stores."""

from .core import (
    BoundingBox,
    DatasetManifest,
    EmbeddingVector,
    EvaluationView,
    Indicator,
    NodeStore,
    ObjectNode,
    l2_norm,
    load_dataset,
    save_dataset,
)
from .propagation import (
    PropagationConfig,
    PropagationResult,
    affinity_scores,
    cosine_similarity,
    propagate,
    propagate_pass,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "DatasetManifest",
    "EmbeddingVector",
    "EvaluationView",
    "Indicator",
    "NodeStore",
    "ObjectNode",
    "PropagationConfig",
    "PropagationResult",
    "affinity_scores",
    "cosine_similarity",
    "l2_norm",
    "load_dataset",
    "propagate",
    "propagate_pass",
    "save_dataset",
    "__version__",
]
