"""Nearest-prototype grounding over scene candidates and the IoU evaluation protocol."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import BoundingBox, Indicator, NodeStore, ObjectNode, l2_norm
from .errors import (
    DimensionMismatch,
    EmptyScene,
    RempropError,
    UnknownIndicator,
    ZeroNormEmbedding,
)


@dataclass(frozen=True)
class GroundingPrediction:
    scene_id: str
    indicator: str
    chosen_box: BoundingBox
    chosen_node_id: str
    score: float
    runner_up_margin: float | None


@dataclass(frozen=True)
class GroundingQuery:
    """One evaluation item: a scene's candidate nodes, the queried indicator, and the true box."""

    scene_id: str
    candidates: tuple[ObjectNode, ...]
    indicator: Indicator
    gt_box: BoundingBox
    split: str = "default"


@dataclass(frozen=True)
class QueryOutcome:
    indicator: str
    scene_id: str
    iou: float
    hit50: bool
    hit80: bool
    chosen_node_id: str | None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "indicator": self.indicator,
            "scene_id": self.scene_id,
            "iou": self.iou,
            "hit50": self.hit50,
            "hit80": self.hit80,
            "chosen_node_id": self.chosen_node_id,
            "error": self.error,
        }


@dataclass
class EvalReport:
    split_name: str
    n_queries: int
    iou_at_50: float
    iou_at_80: float
    per_query: list[QueryOutcome] = field(default_factory=list)
    iou50_advisory: bool = False

    def to_json_dict(self) -> dict:
        return {
            "split_name": self.split_name,
            "n_queries": self.n_queries,
            "iou_at_50": self.iou_at_50,
            "iou_at_80": self.iou_at_80,
            "iou50_advisory": self.iou50_advisory,
            "per_query": [q.to_dict() for q in self.per_query],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area() + b.area() - inter
    return inter / union


def _mean_cosine_to(store: NodeStore, rows: list[int], candidate: ObjectNode) -> float:
    """Mean clamped cosine between the candidate and the given labeled rows, summed in store order."""
    qnorm = l2_norm(candidate.embedding)
    if qnorm == 0.0:
        raise ZeroNormEmbedding(f"candidate {candidate.node_id} has a zero embedding")
    idx = np.array(rows, dtype=np.int64)
    dots = np.einsum("ij,j->i", store.matrix[idx], np.ascontiguousarray(candidate.embedding.values))
    cos = dots / (qnorm * store.norms[idx])
    np.minimum(cos, 1.0, out=cos)
    np.maximum(cos, -1.0, out=cos)
    total = 0.0
    for v in cos.tolist():
        total += v
    return total / len(rows)


def ground(
    scene_nodes: list[ObjectNode], indicator: Indicator, labeled: NodeStore
) -> GroundingPrediction:
    """Pick the scene candidate with the highest mean cosine to the indicator's labeled nodes."""
    if not scene_nodes:
        raise EmptyScene(f"no candidates for indicator {indicator.id!r}")
    if indicator.id not in labeled.indicators:
        raise UnknownIndicator(f"indicator {indicator.id!r} is not registered in the store")
    rows = labeled.rows_for_indicator(indicator.id)
    if not rows:
        raise UnknownIndicator(f"indicator {indicator.id!r} has no labeled nodes")
    for node in scene_nodes:
        if node.embedding.dim != labeled.dim:
            raise DimensionMismatch(
                f"candidate {node.node_id}: dim {node.embedding.dim} != store dim {labeled.dim}"
            )

    scored = [(_mean_cosine_to(labeled, rows, node), node) for node in scene_nodes]
    best_score = max(s for s, _ in scored)
    best = min((node for s, node in scored if s == best_score), key=lambda n: n.node_id)
    others = sorted((s for s, _ in scored), reverse=True)
    margin = best_score - others[1] if len(others) > 1 else None
    return GroundingPrediction(
        scene_id=best.scene_id,
        indicator=indicator.id,
        chosen_box=best.box,
        chosen_node_id=best.node_id,
        score=best_score,
        runner_up_margin=margin,
    )


def evaluate_split(
    split: list[GroundingQuery],
    grounder,
    labeled: NodeStore,
    *,
    split_name: str = "default",
) -> EvalReport:
    """Ground every query, compare against its true box, and aggregate hit rates.

    Per-query failures are recorded as misses with a reason; the split never aborts.
    """
    outcomes: list[QueryOutcome] = []
    for query in split:
        try:
            pred = grounder(list(query.candidates), query.indicator, labeled)
            overlap = iou(pred.chosen_box, query.gt_box)
            outcomes.append(
                QueryOutcome(
                    indicator=query.indicator.id,
                    scene_id=query.scene_id,
                    iou=overlap,
                    hit50=overlap > 0.5,
                    hit80=overlap > 0.8,
                    chosen_node_id=pred.chosen_node_id,
                )
            )
        except RempropError as exc:
            outcomes.append(
                QueryOutcome(
                    indicator=query.indicator.id,
                    scene_id=query.scene_id,
                    iou=0.0,
                    hit50=False,
                    hit80=False,
                    chosen_node_id=None,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    n = len(outcomes)
    hits50 = sum(1 for o in outcomes if o.hit50)
    hits80 = sum(1 for o in outcomes if o.hit80)
    return EvalReport(
        split_name=split_name,
        n_queries=n,
        iou_at_50=100.0 * hits50 / n if n else 0.0,
        iou_at_80=100.0 * hits80 / n if n else 0.0,
        per_query=outcomes,
    )
