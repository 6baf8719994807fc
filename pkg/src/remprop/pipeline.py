"""End-to-end method runs: assemble a store, propagate if configured, evaluate every test split."""

from __future__ import annotations

from dataclasses import dataclass

from .acquisition import MethodConfig, ViewSimulationParams, build_method_config, build_method_store
from .core import ORIGIN_REMINISCENCE, DatasetManifest, NodeStore, ObjectNode
from .grounding import EvalReport, GroundingQuery, evaluate_split, ground
from .propagation import PropagationConfig, PropagationResult, propagate

# Looser boxes in cluttered scenes often cover several objects, so the 0.5
# column is advisory there and only the 0.8 column is load-bearing.
ADVISORY_IOU50_SPLITS = ("cluttered",)


@dataclass
class MethodRun:
    method: MethodConfig
    store: NodeStore
    propagation: PropagationResult | None
    split_reports: dict[str, EvalReport]
    overall: EvalReport

    @property
    def labeled_count(self) -> int:
        return self.store.labeled_count()


def build_queries(manifest: DatasetManifest) -> list[GroundingQuery]:
    """Materialize test queries with their scene candidates as eval-only nodes."""
    indicators = {po.indicator.id: po.indicator for po in manifest.personal_objects}
    scene_cache: dict[str, tuple[ObjectNode, ...]] = {}
    queries: list[GroundingQuery] = []
    for tq in manifest.test_queries:
        if tq.scene_id not in scene_cache:
            scene = manifest.scene_by_id(tq.scene_id)
            scene_cache[tq.scene_id] = tuple(
                ObjectNode(
                    node_id=sb.node_id,
                    embedding=manifest.embedding_for(sb.embedding_offset),
                    scene_id=scene.scene_id,
                    box=sb.box,
                    origin=ORIGIN_REMINISCENCE,
                )
                for sb in scene.boxes
            )
        queries.append(
            GroundingQuery(
                scene_id=tq.scene_id,
                candidates=scene_cache[tq.scene_id],
                indicator=indicators[tq.indicator_id],
                gt_box=tq.gt_box,
                split=tq.split,
            )
        )
    return queries


def evaluate_store(manifest: DatasetManifest, store: NodeStore) -> tuple[dict[str, EvalReport], EvalReport]:
    """Per-split reports plus one report pooled over every test query."""
    queries = build_queries(manifest)
    splits: dict[str, list[GroundingQuery]] = {}
    for q in queries:
        splits.setdefault(q.split, []).append(q)
    split_reports = {}
    for split_name, qs in splits.items():
        report = evaluate_split(qs, ground, store, split_name=split_name)
        report.iou50_advisory = split_name in ADVISORY_IOU50_SPLITS
        split_reports[split_name] = report
    overall = evaluate_split(queries, ground, store, split_name="overall")
    return split_reports, overall


def run_method(
    manifest: DatasetManifest,
    method: MethodConfig | str,
    prop_config: PropagationConfig | None = None,
    *,
    simulated_views: ViewSimulationParams | None = None,
    workers: int = 1,
) -> MethodRun:
    """Run one ablation configuration end to end over a dataset."""
    if isinstance(method, str):
        method = build_method_config(method)
    prop_config = prop_config or PropagationConfig()
    store = build_method_store(manifest, method, simulated_views=simulated_views)
    result = propagate(store, prop_config, workers=workers) if method.use_propagation else None
    split_reports, overall = evaluate_store(manifest, store)
    return MethodRun(
        method=method,
        store=store,
        propagation=result,
        split_reports=split_reports,
        overall=overall,
    )
