"""Seed/view ingestion from the manifest and the four ablation method configurations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    LABEL_FIXED,
    ORIGIN_REMINISCENCE,
    ORIGIN_SEED_HUMAN,
    ORIGIN_SEED_VIEW,
    DatasetManifest,
    EmbeddingVector,
    EvaluationView,
    NodeStore,
    ObjectNode,
    l2_norm,
)
from .errors import InvalidConfig, InvalidEmbedding, UnknownMethod

METHOD_NAMES = ("direct", "passive", "pga", "supervised")


@dataclass(frozen=True)
class ViewSimulationParams:
    """Knobs for the multi-view stand-in: perturb the seed embedding instead of rotating a real object."""

    views_per_object: int = 4
    perturbation_sigma: float = 0.05
    rotation_subspace_dim: int = 0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.views_per_object < 0:
            raise InvalidConfig("views_per_object must be >= 0")
        if self.perturbation_sigma < 0:
            raise InvalidConfig("perturbation_sigma must be >= 0")
        if self.rotation_subspace_dim < 0:
            raise InvalidConfig("rotation_subspace_dim must be >= 0")


@dataclass(frozen=True)
class MethodConfig:
    name: str
    use_views: bool
    use_propagation: bool
    use_gt_reminiscence_labels: bool


_METHODS = {
    "direct": MethodConfig("direct", use_views=False, use_propagation=False, use_gt_reminiscence_labels=False),
    "passive": MethodConfig("passive", use_views=False, use_propagation=True, use_gt_reminiscence_labels=False),
    "pga": MethodConfig("pga", use_views=True, use_propagation=True, use_gt_reminiscence_labels=False),
    "supervised": MethodConfig("supervised", use_views=False, use_propagation=False, use_gt_reminiscence_labels=True),
}


def build_method_config(name: str) -> MethodConfig:
    try:
        return _METHODS[name]
    except KeyError:
        raise UnknownMethod(f"unknown method {name!r}; expected one of {METHOD_NAMES}") from None


def _collect_nodes(manifest: DatasetManifest, *, include_views: bool) -> list[ObjectNode]:
    """Interaction nodes in personal-object order, then reminiscence nodes in scene order."""
    index = manifest.node_index()
    scene_of = {sb.node_id: s.scene_id for s in manifest.scenes for sb in s.boxes}
    nodes: list[ObjectNode] = []
    for po in manifest.personal_objects:
        ref_ids = [po.seed_node_id]
        if include_views:
            ref_ids.extend(po.view_node_ids)
        for pos, nid in enumerate(ref_ids):
            sb = index[nid]
            scene_id = scene_of[nid]
            nodes.append(
                ObjectNode(
                    node_id=nid,
                    embedding=manifest.embedding_for(sb.embedding_offset),
                    scene_id=scene_id,
                    box=sb.box,
                    origin=ORIGIN_SEED_HUMAN if pos == 0 else ORIGIN_SEED_VIEW,
                    label=po.indicator.id,
                    label_kind=LABEL_FIXED,
                )
            )
    for scene in manifest.reminiscence_scenes():
        for sb in scene.boxes:
            nodes.append(
                ObjectNode(
                    node_id=sb.node_id,
                    embedding=manifest.embedding_for(sb.embedding_offset),
                    scene_id=scene.scene_id,
                    box=sb.box,
                    origin=ORIGIN_REMINISCENCE,
                )
            )
    return nodes


def ingest_seeds(manifest: DatasetManifest) -> NodeStore:
    """Store with one fixed seed per personal object and the reminiscence pool unlabeled."""
    nodes = _collect_nodes(manifest, include_views=False)
    return NodeStore(nodes, [po.indicator for po in manifest.personal_objects])


def simulate_views(seed: ObjectNode, params: ViewSimulationParams) -> list[ObjectNode]:
    """Stand-in for inspecting an object from multiple angles.

    Each view perturbs the seed embedding with Gaussian noise whose expected
    displacement is perturbation_sigma as a fraction of the seed norm, then
    optionally rotates it inside a random subspace, and finally rescales back
    to the seed's norm. Deterministic for a given (rng_seed, seed node).
    """
    if seed.label_kind != LABEL_FIXED or seed.label is None:
        raise InvalidConfig(f"simulate_views needs a fixed-label seed, got node {seed.node_id}")
    if params.views_per_object == 0:
        return []

    entropy = [params.rng_seed & 0xFFFFFFFF, *seed.node_id.encode("utf-8")]
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    base = seed.embedding.values
    dim = base.shape[0]
    seed_norm = l2_norm(seed.embedding)
    if seed_norm == 0.0:
        raise InvalidEmbedding(f"seed node {seed.node_id} has a zero embedding")

    views: list[ObjectNode] = []
    for a in range(params.views_per_object):
        emb = base.copy()
        if params.perturbation_sigma > 0:
            scale = params.perturbation_sigma * seed_norm / math.sqrt(dim)
            emb = emb + scale * rng.standard_normal(dim)
        r = min(params.rotation_subspace_dim, dim)
        if r >= 2:
            basis, _ = np.linalg.qr(rng.standard_normal((dim, r)))
            rot, _ = np.linalg.qr(rng.standard_normal((r, r)))
            coords = basis.T @ emb
            emb = emb + basis @ (rot @ coords - coords)
        norm = float(np.sqrt(np.einsum("j,j->", emb, emb)))
        if norm == 0.0:
            raise InvalidEmbedding(f"simulated view of {seed.node_id} collapsed to zero")
        emb = emb * (seed_norm / norm)
        views.append(
            ObjectNode(
                node_id=f"{seed.node_id}::view{a}",
                embedding=EmbeddingVector(emb),
                scene_id=seed.scene_id,
                box=seed.box,
                origin=ORIGIN_SEED_VIEW,
                label=seed.label,
                label_kind=LABEL_FIXED,
            )
        )
    return views


def build_method_store(
    manifest: DatasetManifest,
    method: MethodConfig,
    *,
    simulated_views: ViewSimulationParams | None = None,
) -> NodeStore:
    """Assemble the training-visible store for one method configuration.

    The supervised config is the one sanctioned consumer of ground-truth
    reminiscence labels, applied through the evaluation view.
    """
    nodes = _collect_nodes(manifest, include_views=method.use_views)
    if method.use_views and simulated_views is not None:
        extra: list[ObjectNode] = []
        for node in nodes:
            if node.origin == ORIGIN_SEED_HUMAN:
                extra.extend(simulate_views(node, simulated_views))
        seed_and_views = [n for n in nodes if n.origin != ORIGIN_REMINISCENCE]
        reminiscence = [n for n in nodes if n.origin == ORIGIN_REMINISCENCE]
        nodes = seed_and_views + extra + reminiscence
    store = NodeStore(nodes, [po.indicator for po in manifest.personal_objects])

    if method.use_gt_reminiscence_labels:
        view = EvaluationView(manifest)
        for row in store.reminiscence_rows:
            gt = view.gt_label(store.nodes[row].node_id)
            if gt is not None and gt in store.indicators:
                store.assign_label(int(row), gt)
    return store
