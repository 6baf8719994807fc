from __future__ import annotations

import numpy as np
import pytest

from remprop.core import (
    BoundingBox,
    DatasetManifest,
    EmbeddingVector,
    Indicator,
    NodeStore,
    ObjectNode,
    PersonalObject,
    Scene,
    SceneBox,
)

BOX = BoundingBox(0, 0, 10, 10)


def make_node(node_id, values, indicator=None, *, origin=None, scene_id="s0", box=BOX):
    if origin is None:
        origin = "seed_human" if indicator else "reminiscence"
    return ObjectNode(
        node_id=node_id,
        embedding=EmbeddingVector(np.asarray(values, dtype=np.float64)),
        scene_id=scene_id,
        box=box,
        origin=origin,
        label=indicator,
        label_kind="fixed" if indicator else "none",
    )


def make_store(seed_vecs: dict[str, list], rem_vecs: dict[str, list]) -> NodeStore:
    """Store with one fixed seed per indicator and unlabeled reminiscence nodes."""
    indicators = [Indicator(id=u, text=f"my {u}") for u in seed_vecs]
    nodes = [make_node(f"seed-{u}", v, u) for u, v in seed_vecs.items()]
    nodes += [make_node(nid, v) for nid, v in rem_vecs.items()]
    return NodeStore(nodes, indicators)


def unit(theta_deg: float) -> list[float]:
    t = np.deg2rad(theta_deg)
    return [float(np.cos(t)), float(np.sin(t))]


def tiny_manifest(n_objects=2, n_rem=3, dim=4, with_views=True) -> DatasetManifest:
    """Hand-built manifest: interaction scene per object plus one reminiscence scene."""
    rng = np.random.default_rng(42)
    embeddings = []
    scenes = []
    personal = []
    for j in range(n_objects):
        ind = Indicator(id=f"u{j}", text=f"my thing {j}")
        base = np.zeros(dim)
        base[j % dim] = 1.0
        boxes = []
        embeddings.append(base)
        boxes.append(SceneBox(node_id=f"seed-{j}", box=BOX, embedding_offset=len(embeddings) - 1))
        view_ids = []
        if with_views:
            for a in range(2):
                embeddings.append(base + 0.01 * rng.standard_normal(dim))
                view_ids.append(f"view-{j}-{a}")
                boxes.append(SceneBox(node_id=view_ids[-1], box=BOX, embedding_offset=len(embeddings) - 1))
        scenes.append(Scene(scene_id=f"interaction-{j}", image_ref=f"ref://i/{j}", boxes=tuple(boxes)))
        personal.append(PersonalObject(indicator=ind, seed_node_id=f"seed-{j}", view_node_ids=tuple(view_ids)))
    rem_boxes = []
    for m in range(n_rem):
        base = np.zeros(dim)
        base[m % max(n_objects, 1)] = 1.0
        embeddings.append(base + 0.05 * rng.standard_normal(dim))
        rem_boxes.append(SceneBox(node_id=f"rem-{m}", box=BOX, embedding_offset=len(embeddings) - 1))
    scenes.append(Scene(scene_id="scene-0", image_ref="ref://s/0", boxes=tuple(rem_boxes)))
    return DatasetManifest(
        dim=dim,
        embedding_blob_ref="embeddings.bin",
        scenes=scenes,
        personal_objects=personal,
        test_queries=[],
        embeddings=np.array(embeddings),
    )


@pytest.fixture(scope="session")
def small_separable_manifest():
    from remprop.synth import generate_synthetic_dataset, separable_spec

    spec = separable_spec(
        rng_seed=5,
        n_indicators=6,
        nodes_per_indicator=10,
        n_scenes=12,
        n_ambiguous=20,
        n_invalid=25,
        n_test_scenes_het=4,
    )
    return generate_synthetic_dataset(spec)
