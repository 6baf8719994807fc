from __future__ import annotations

import numpy as np
import pytest

from remprop.acquisition import (
    ViewSimulationParams,
    build_method_config,
    build_method_store,
    ingest_seeds,
    simulate_views,
)
from remprop.core import DatasetManifest, Indicator, PersonalObject, Scene, SceneBox, l2_norm
from remprop.errors import (
    DuplicateIndicator,
    EmptyLabeledSet,
    InvalidConfig,
    UnknownMethod,
)
from remprop.propagation import PropagationConfig, cosine_similarity, propagate
from remprop.synth import fullscale_spec, generate_synthetic_dataset

from conftest import BOX, make_node, tiny_manifest


class TestMethodConfig:
    @pytest.mark.parametrize(
        "name,views,prop,gt",
        [
            ("direct", False, False, False),
            ("passive", False, True, False),
            ("pga", True, True, False),
            ("supervised", False, False, True),
        ],
    )
    def test_table(self, name, views, prop, gt):
        cfg = build_method_config(name)
        assert (cfg.use_views, cfg.use_propagation, cfg.use_gt_reminiscence_labels) == (views, prop, gt)

    def test_unknown_method(self):
        with pytest.raises(UnknownMethod):
            build_method_config("bogus")


class TestIngestSeeds:
    def test_ninety_six_objects(self):
        spec = fullscale_spec(
            rng_seed=0,
            nodes_per_indicator=1,
            n_scenes=8,
            n_ambiguous=0,
            n_invalid=0,
            n_everyday=0,
            n_test_scenes_het=1,
            n_test_scenes_hom=0,
            n_test_scenes_clut=0,
        )
        manifest = generate_synthetic_dataset(spec)
        store = ingest_seeds(manifest)
        seeds = [n for n in store.nodes if n.origin == "seed_human"]
        assert len(seeds) == 96
        assert store.n_indicators == 96
        assert all(n.label_kind == "fixed" for n in seeds)
        # views are not part of seed ingestion
        assert all(n.origin != "seed_view" for n in store.nodes)

    def test_reminiscence_loaded_unlabeled(self):
        store = ingest_seeds(tiny_manifest())
        rem = [store.nodes[i] for i in store.reminiscence_rows]
        assert rem and all(n.label is None for n in rem)

    def test_zero_personal_objects_valid_but_rejected_by_propagate(self):
        m = tiny_manifest(n_objects=0, n_rem=2)
        store = ingest_seeds(m)
        assert store.n_indicators == 0
        with pytest.raises(EmptyLabeledSet):
            propagate(store, PropagationConfig())

    def test_duplicate_indicator_rejected(self):
        m = tiny_manifest()
        dup = PersonalObject(
            indicator=m.personal_objects[0].indicator,
            seed_node_id=m.personal_objects[1].seed_node_id,
            view_node_ids=(),
        )
        with pytest.raises(DuplicateIndicator):
            DatasetManifest(
                dim=m.dim,
                embedding_blob_ref=m.embedding_blob_ref,
                scenes=m.scenes,
                personal_objects=[m.personal_objects[0], dup],
                test_queries=[],
                embeddings=m.embeddings,
            )


class TestSimulateViews:
    SEED = staticmethod(lambda: make_node("seed-x", [3.0, 4.0, 0.0, 0.0], "ux"))

    def test_zero_views(self):
        assert simulate_views(self.SEED(), ViewSimulationParams(views_per_object=0)) == []

    def test_degenerate_perturbation_copies_bitwise(self):
        seed = self.SEED()
        views = simulate_views(
            seed,
            ViewSimulationParams(views_per_object=4, perturbation_sigma=0.0, rotation_subspace_dim=0),
        )
        assert len(views) == 4
        for v in views:
            assert np.array_equal(v.embedding.values, seed.embedding.values)
            assert v.origin == "seed_view"
            assert v.label == "ux" and v.label_kind == "fixed"

    def test_small_sigma_keeps_views_close(self):
        rng = np.random.default_rng(9)
        base = rng.standard_normal(64)
        seed = make_node("seed-y", list(base), "uy")
        views = simulate_views(
            seed, ViewSimulationParams(views_per_object=4, perturbation_sigma=0.05, rng_seed=7)
        )
        assert len(views) == 4
        embs = {tuple(v.embedding.values) for v in views}
        assert len(embs) == 4  # distinct
        for v in views:
            assert cosine_similarity(v.embedding, seed.embedding) >= 0.98
            assert l2_norm(v.embedding) == pytest.approx(l2_norm(seed.embedding), rel=1e-12)

    def test_rotation_subspace_changes_direction(self):
        seed = self.SEED()
        views = simulate_views(
            seed,
            ViewSimulationParams(views_per_object=2, perturbation_sigma=0.0, rotation_subspace_dim=3, rng_seed=1),
        )
        for v in views:
            assert not np.array_equal(v.embedding.values, seed.embedding.values)
            assert l2_norm(v.embedding) == pytest.approx(l2_norm(seed.embedding), rel=1e-12)

    def test_deterministic_bit_for_bit(self):
        params = ViewSimulationParams(views_per_object=3, perturbation_sigma=0.1, rotation_subspace_dim=4, rng_seed=5)
        a = simulate_views(self.SEED(), params)
        b = simulate_views(self.SEED(), params)
        for va, vb in zip(a, b):
            assert np.array_equal(va.embedding.values, vb.embedding.values)

    def test_requires_fixed_seed(self):
        with pytest.raises(InvalidConfig):
            simulate_views(make_node("r", [1.0, 0.0]), ViewSimulationParams())

    def test_param_validation(self):
        with pytest.raises(InvalidConfig):
            ViewSimulationParams(views_per_object=-1)
        with pytest.raises(InvalidConfig):
            ViewSimulationParams(perturbation_sigma=-0.1)


class TestMethodStores:
    def test_direct_labeled_count_equals_objects(self, small_separable_manifest):
        store = build_method_store(small_separable_manifest, build_method_config("direct"))
        assert store.labeled_count() == len(small_separable_manifest.personal_objects)

    def test_pga_seed_set_strictly_contains_passive(self, small_separable_manifest):
        passive = build_method_store(small_separable_manifest, build_method_config("passive"))
        pga = build_method_store(small_separable_manifest, build_method_config("pga"))
        passive_ids = {passive.nodes[r].node_id for r in passive.labeled_rows()}
        pga_ids = {pga.nodes[r].node_id for r in pga.labeled_rows()}
        assert passive_ids < pga_ids

    def test_passive_labeled_count_grows_past_direct(self, small_separable_manifest):
        n_objects = len(small_separable_manifest.personal_objects)
        passive = build_method_store(small_separable_manifest, build_method_config("passive"))
        assert passive.labeled_count() == n_objects
        propagate(passive, PropagationConfig(threshold=0.75))
        assert passive.labeled_count() >= n_objects

    def test_supervised_uses_ground_truth(self, small_separable_manifest):
        from remprop.core import EvaluationView

        store = build_method_store(small_separable_manifest, build_method_config("supervised"))
        view = EvaluationView(small_separable_manifest)
        labeled = {store.nodes[r].node_id: store.nodes[r].label for r in store.labeled_rows()}
        gt_nodes = [
            sb.node_id
            for scene in small_separable_manifest.reminiscence_scenes()
            for sb in scene.boxes
            if view.gt_label(sb.node_id) is not None
        ]
        assert gt_nodes
        for nid in gt_nodes:
            assert labeled.get(nid) == view.gt_label(nid)
        # noise nodes carry no gt indicator and stay unlabeled
        noise = [nid for nid in view.annotated_node_ids() if view.gt_label(nid) is None]
        assert all(nid not in labeled for nid in noise)

    def test_simulated_views_extend_pga_store(self, small_separable_manifest):
        params = ViewSimulationParams(views_per_object=2, perturbation_sigma=0.02, rng_seed=3)
        plain = build_method_store(small_separable_manifest, build_method_config("pga"))
        extended = build_method_store(
            small_separable_manifest, build_method_config("pga"), simulated_views=params
        )
        extra = extended.labeled_count() - plain.labeled_count()
        assert extra == 2 * len(small_separable_manifest.personal_objects)
