"""Acceptance gate: one test per release criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
The thread-scaling half of the performance criterion needs at least 4 physical
cores to be attainable; on smaller hosts it reports FAIL with the measured
host ceiling in the message.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest

from remprop.core import (
    BoundingBox,
    DatasetManifest,
    EmbeddingVector,
    Indicator,
    NodeStore,
    ObjectNode,
)
from remprop.grounding import iou
from remprop.pipeline import build_queries, run_method
from remprop.propagation import (
    PropagationConfig,
    affinity_scores,
    cosine_similarity,
    propagate,
    propagate_pass,
)
from remprop.synth import (
    brute_force_propagate,
    fullscale_spec,
    generate_synthetic_dataset,
    propagation_noise_report,
    random_instance,
    reminiscence_ablation,
    separable_spec,
)

from conftest import make_node, make_store

CONFIG = PropagationConfig(threshold=0.75)


def _verdict(name: str, ok: bool, details: str) -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({details})")
    assert ok, f"{name}: {details}"


def test_oracle_equivalence():
    """200 random instances, both update modes, engine == brute force exactly."""
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(200):
        _, _, drawn = random_instance(seed)
        for mode in ("sequential", "batch"):
            config = PropagationConfig(**{**drawn.to_dict(), "update_mode": mode})
            nodes_a, inds_a, _ = random_instance(seed)
            nodes_b, inds_b, _ = random_instance(seed)
            engine = propagate(NodeStore(nodes_a, inds_a), config)
            oracle = brute_force_propagate(NodeStore(nodes_b, inds_b), config)
            if engine.to_json() != oracle.to_json():
                mismatches.append((seed, mode))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 60.0
    _verdict(
        "oracle-equivalence",
        ok,
        f"200 instances x 2 modes, {len(mismatches)} mismatches, {elapsed:.1f}s < 60s",
    )


def test_synthetic_recovery():
    """Separable profile: clean recall >= 95%, invalid 0%, PGA ambiguous < Passive on average."""
    recalls, invalids, amb_pga, amb_passive = [], [], [], []
    for seed in range(1, 11):
        manifest = generate_synthetic_dataset(separable_spec(rng_seed=seed))
        pga = run_method(manifest, "pga", CONFIG)
        passive = run_method(manifest, "passive", CONFIG)
        rep_pga = propagation_noise_report(pga.propagation, manifest)
        rep_passive = propagation_noise_report(passive.propagation, manifest)
        recalls.append(rep_pga.per_class["clean"]["recall_pct"])
        invalids.append(rep_pga.invalid_labeled_rate)
        invalids.append(rep_passive.invalid_labeled_rate)
        amb_pga.append(rep_pga.ambiguous_labeled_rate)
        amb_passive.append(rep_passive.ambiguous_labeled_rate)
    mean_pga = float(np.mean(amb_pga))
    mean_passive = float(np.mean(amb_passive))
    ok = min(recalls) >= 95.0 and max(invalids) == 0.0 and mean_pga < mean_passive
    _verdict(
        "synthetic-recovery",
        ok,
        f"min recall {min(recalls):.1f}% >= 95, max invalid {max(invalids):.2f}% == 0, "
        f"ambiguous pga {mean_pga:.1f}% < passive {mean_passive:.1f}% over 10 seeds",
    )


def test_method_ordering():
    """Full-scale profile: Supervised >= PGA >= Passive >= Direct, PGA beats Direct by >= 10 points."""
    means = {m: [] for m in ("direct", "passive", "pga", "supervised")}
    for seed in range(1, 11):
        manifest = generate_synthetic_dataset(fullscale_spec(rng_seed=seed))
        for method in means:
            means[method].append(run_method(manifest, method, CONFIG).overall.iou_at_50)
    avg = {m: float(np.mean(v)) for m, v in means.items()}
    ordered = avg["supervised"] >= avg["pga"] >= avg["passive"] >= avg["direct"]
    gap = avg["pga"] - avg["direct"]
    ok = ordered and gap >= 10.0
    _verdict(
        "method-ordering",
        ok,
        f"supervised {avg['supervised']:.1f} >= pga {avg['pga']:.1f} >= "
        f"passive {avg['passive']:.1f} >= direct {avg['direct']:.1f}, gap {gap:.1f} >= 10",
    )


def test_reminiscence_size_trend():
    """Accuracy rises from size 0 to size 400; size-0 output is bitwise the direct run."""
    manifest = generate_synthetic_dataset(fullscale_spec(rng_seed=7))
    report = reminiscence_ablation(manifest, [0, 25, 100, 400], 3, prop_config=CONFIG, rng_seed=11)
    mean_at = {m["size"]: m["iou50"] for m in report.means}
    direct = run_method(manifest, "direct", CONFIG)
    bitwise = all(
        report.overall_reports[(0, trial, "pga")] == direct.overall.to_json()
        for trial in (1, 2, 3)
    )
    ok = mean_at[400] > mean_at[0] and bitwise
    _verdict(
        "reminiscence-size-trend",
        ok,
        f"mean iou50 size400 {mean_at[400]:.1f} > size0 {mean_at[0]:.1f}; "
        f"size-0 bitwise == direct: {bitwise}",
    )


def test_convergence_rule():
    """Converged runs end below the 10% changed ratio; nothing exceeds the iteration cap."""
    results = []
    for seed in range(1, 4):
        manifest = generate_synthetic_dataset(separable_spec(rng_seed=seed))
        results.append(run_method(manifest, "pga", CONFIG).propagation)
    for seed in range(30):
        nodes, inds, config = random_instance(seed + 900)
        results.append(propagate(NodeStore(nodes, inds), config))

    violations = []
    for result in results:
        cap = result.config.max_iterations
        if result.iterations_used > cap:
            violations.append("iteration cap exceeded")
        if result.converged:
            if result.passes and result.passes[-1].changed_ratio >= result.config.convergence_ratio:
                violations.append("converged run ended at or above the ratio")
        elif result.iterations_used != cap:
            violations.append("unconverged run stopped before the cap")
    ok = not violations
    _verdict(
        "convergence-rule",
        ok,
        f"{len(results)} runs, default ratio 0.10, violations: {violations or 'none'}",
    )


def test_determinism_and_scale_invariance():
    """1 vs 8 workers give identical bytes; scaling embeddings by 7.3 changes no decision."""
    manifest = generate_synthetic_dataset(separable_spec(rng_seed=2))
    config = PropagationConfig(threshold=0.75, update_mode="batch")

    from remprop.acquisition import build_method_config, build_method_store

    outs = []
    for workers in (1, 8):
        store = build_method_store(manifest, build_method_config("pga"))
        outs.append(propagate(store, config, workers=workers).to_json())
    threads_identical = outs[0] == outs[1]

    scaled_manifest = DatasetManifest(
        dim=manifest.dim,
        embedding_blob_ref=manifest.embedding_blob_ref,
        scenes=manifest.scenes,
        personal_objects=manifest.personal_objects,
        test_queries=manifest.test_queries,
        embeddings=manifest.embeddings * 7.3,
        annotations=manifest.annotations,
    )
    base_run = run_method(manifest, "pga", CONFIG)
    scaled_run = run_method(scaled_manifest, "pga", CONFIG)
    labels_same = base_run.propagation.final_labels() == scaled_run.propagation.final_labels()
    choices_base = [q.chosen_node_id for q in base_run.overall.per_query]
    choices_scaled = [q.chosen_node_id for q in scaled_run.overall.per_query]
    grounding_same = choices_base == choices_scaled

    ok = threads_identical and labels_same and grounding_same
    _verdict(
        "determinism-and-scale-invariance",
        ok,
        f"1 vs 8 workers bit-identical: {threads_identical}; x7.3 labels unchanged: {labels_same}; "
        f"x7.3 grounding choices unchanged: {grounding_same}",
    )


def _perf_store(rng_seed: int) -> NodeStore:
    """10,000 reminiscence nodes x 768 dims, 100 indicators, 600 labeled nodes."""
    rng = np.random.default_rng(rng_seed)
    dim, n_ind, per_ind, n_rem = 768, 100, 6, 10_000
    box = BoundingBox(0, 0, 4, 4)
    indicators = [Indicator(id=f"u{j:03d}", text=f"my object {j}") for j in range(n_ind)]
    nodes = []
    for j in range(n_ind):
        center = rng.standard_normal(dim)
        for s in range(per_ind):
            emb = (center + 0.2 * rng.standard_normal(dim)).astype(np.float32).astype(np.float64)
            nodes.append(
                ObjectNode(
                    node_id=f"seed-{j:03d}-{s}",
                    embedding=EmbeddingVector(emb),
                    scene_id=f"i{j}",
                    box=box,
                    origin="seed_human" if s == 0 else "seed_view",
                    label=indicators[j].id,
                    label_kind="fixed",
                )
            )
    rem = rng.standard_normal((n_rem, dim)).astype(np.float32).astype(np.float64)
    for m in range(n_rem):
        nodes.append(
            ObjectNode(
                node_id=f"r{m:05d}",
                embedding=EmbeddingVector(rem[m]),
                scene_id=f"s{m % 50}",
                box=box,
                origin="reminiscence",
            )
        )
    return NodeStore(nodes, indicators)


def test_performance_single_thread_budget():
    """One batch pass at 10k x 768 x 100 indicators finishes within 5 seconds on one thread."""
    store = _perf_store(0)
    config = PropagationConfig(threshold=0.9, update_mode="batch", max_iterations=1)
    t0 = time.perf_counter()
    propagate_pass(store, config, workers=1)
    elapsed = time.perf_counter() - t0
    ok = elapsed <= 5.0
    _verdict("performance-single-thread", ok, f"batch pass took {elapsed:.2f}s <= 5s")


def test_performance_thread_scaling():
    """The same pass must speed up at least 2.5x with 4 worker threads."""
    config = PropagationConfig(threshold=0.9, update_mode="batch", max_iterations=1)
    store1 = _perf_store(0)
    t0 = time.perf_counter()
    propagate_pass(store1, config, workers=1)
    t_one = time.perf_counter() - t0

    store4 = _perf_store(0)
    t0 = time.perf_counter()
    propagate_pass(store4, config, workers=4)
    t_four = time.perf_counter() - t0

    speedup = t_one / t_four if t_four > 0 else float("inf")
    ok = speedup >= 2.5
    _verdict(
        "performance-thread-scaling",
        ok,
        f"speedup {speedup:.2f}x (1 thread {t_one:.2f}s, 4 threads {t_four:.2f}s) "
        f">= 2.5x required; host exposes {os.cpu_count()} CPUs",
    )


def test_numeric_micro_checks():
    """Closed-form spot values for the three numeric primitives."""
    cos = cosine_similarity(
        EmbeddingVector(np.array([1.0, 1.0])), EmbeddingVector(np.array([1.0, 0.0]))
    )
    cos_ok = abs(cos - 0.70710678) <= 1e-7

    overlap = iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 0, 15, 10))
    iou_ok = abs(overlap - 1.0 / 3.0) <= 1e-6

    # Cosines land at exactly 0.8 and 0.6 by construction, so the Eq-2 mean
    # must be exactly 0.7 in IEEE doubles.
    store = make_store({"u1": [0.8, 0.6]}, {})
    extra = make_node("k2", [0.6, 0.8], "u1")
    store = NodeStore(store.nodes + [extra], list(store.indicators.values()))
    mean = affinity_scores(make_node("q", [1.0, 0.0]), store)["u1"]
    mean_ok = mean == 0.7

    ok = cos_ok and iou_ok and mean_ok
    _verdict(
        "numeric-micro-checks",
        ok,
        f"cosine {cos!r} (+-1e-7), iou {overlap!r} (+-1e-6), affinity mean {mean!r} == 0.7: {mean_ok}",
    )
