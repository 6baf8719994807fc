"""Exception hierarchy shared by all remprop modules."""

from __future__ import annotations


class RempropError(Exception):
    """Base class for all errors raised by this package."""


class ManifestError(RempropError):
    """Dataset manifest or embedding blob failed validation."""


class DuplicateNodeId(ManifestError):
    """Two nodes in one dataset share a node_id."""


class DuplicateIndicator(ManifestError):
    """Two personal objects share an indicator id."""


class MissingEmbedding(ManifestError):
    """A node references an embedding offset outside the blob."""


class InvalidEmbedding(RempropError):
    """Embedding vector violates basic invariants (non-finite, wrong shape)."""


class ZeroNormEmbedding(RempropError):
    """A zero vector was passed where a direction is required."""


class DimensionMismatch(RempropError):
    """Two embeddings of different dimensionality were combined."""


class EmptyLabeledSet(RempropError):
    """An affinity query ran against a store with no labeled nodes."""


class EmptyScene(RempropError):
    """A grounding query named a scene with no candidate boxes."""


class UnknownIndicator(RempropError):
    """A query referenced an indicator with no labeled nodes."""


class UnknownMethod(RempropError):
    """Method name is not one of direct/passive/pga/supervised."""


class InvalidConfig(RempropError):
    """A configuration value is outside its documented range."""


class InfeasibleSpec(RempropError):
    """The synthetic generator could not satisfy the requested geometry."""


class SizeOutOfRange(RempropError):
    """An ablation size is outside [0, number of raw scenes]."""
