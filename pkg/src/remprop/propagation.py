"""Affinity scoring and the iterative pseudo-labeling loop over the reminiscence pool.

Numeric policy: every similarity is a float64 einsum dot divided by the product
of cached norms, clamped to [-1, 1]; per-indicator sums accumulate left to
right in labeled-set insertion order (np.bincount). The brute-force reference
in remprop.synth reproduces these reductions pair by pair, so engine output is
expected to match it bit for bit, not merely within tolerance.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import EmbeddingVector, NodeStore, ObjectNode, l2_norm
from .errors import (
    DimensionMismatch,
    EmptyLabeledSet,
    InvalidConfig,
    ZeroNormEmbedding,
)

UPDATE_MODES = ("sequential", "batch")
NODE_ORDERS = ("manifest_order", "node_id_lexicographic")
TIE_BREAKS = ("indicator_lexicographic",)
RATIO_DENOMINATORS = ("all_reminiscence", "labeled_reminiscence")

_CHUNK_ROWS = 512  # fixed batch chunking; must not depend on worker count


@dataclass(frozen=True)
class PropagationConfig:
    threshold: float = 0.75
    max_iterations: int = 100
    convergence_ratio: float = 0.10
    update_mode: str = "sequential"
    node_order: str = "manifest_order"
    tie_break: str = "indicator_lexicographic"
    ratio_denominator: str = "all_reminiscence"

    def __post_init__(self) -> None:
        if not (-1.0 < self.threshold <= 1.0):
            raise InvalidConfig(f"threshold must lie in (-1, 1], got {self.threshold}")
        if self.max_iterations < 1:
            raise InvalidConfig(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not (0.0 < self.convergence_ratio <= 1.0):
            raise InvalidConfig(f"convergence_ratio must lie in (0, 1], got {self.convergence_ratio}")
        if self.update_mode not in UPDATE_MODES:
            raise InvalidConfig(f"update_mode must be one of {UPDATE_MODES}")
        if self.node_order not in NODE_ORDERS:
            raise InvalidConfig(f"node_order must be one of {NODE_ORDERS}")
        if self.tie_break not in TIE_BREAKS:
            raise InvalidConfig(f"tie_break must be one of {TIE_BREAKS}")
        if self.ratio_denominator not in RATIO_DENOMINATORS:
            raise InvalidConfig(f"ratio_denominator must be one of {RATIO_DENOMINATORS}")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "max_iterations": self.max_iterations,
            "convergence_ratio": self.convergence_ratio,
            "update_mode": self.update_mode,
            "node_order": self.node_order,
            "tie_break": self.tie_break,
            "ratio_denominator": self.ratio_denominator,
        }


@dataclass(frozen=True)
class NodeDecision:
    node_id: str
    chosen_indicator: str | None
    max_score: float
    runner_up_score: float | None

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "chosen_indicator": self.chosen_indicator,
            "max_score": self.max_score,
            "runner_up_score": self.runner_up_score,
        }


@dataclass(frozen=True)
class PassReport:
    pass_index: int
    labels_assigned: int
    labels_changed: int
    changed_ratio: float
    decisions: tuple[NodeDecision, ...]

    def to_dict(self) -> dict:
        return {
            "pass_index": self.pass_index,
            "labels_assigned": self.labels_assigned,
            "labels_changed": self.labels_changed,
            "changed_ratio": self.changed_ratio,
            "decisions": [d.to_dict() for d in self.decisions],
        }


@dataclass
class PropagationResult:
    final_store: NodeStore
    passes: list[PassReport]
    converged: bool
    iterations_used: int
    config: PropagationConfig = field(default_factory=PropagationConfig)

    def final_labels(self) -> dict[str, str]:
        """Pseudo labels assigned to reminiscence nodes (seeds excluded)."""
        out: dict[str, str] = {}
        for row in self.final_store.reminiscence_rows:
            node = self.final_store.nodes[row]
            if node.label is not None:
                out[node.node_id] = node.label
        return out

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "converged": self.converged,
            "iterations_used": self.iterations_used,
            "final_labels": self.final_labels(),
            "passes": [p.to_dict() for p in self.passes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of two embeddings, clamped to [-1, 1]. Symmetric and scale-invariant."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"cosine over dims {a.dim} and {b.dim}")
    na = l2_norm(a)
    nb = l2_norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormEmbedding("cosine similarity is undefined for a zero vector")
    raw = float(np.einsum("j,j->", a.values, b.values)) / (na * nb)
    return min(max(raw, -1.0), 1.0)


def _ordered_group_sums(
    cos_row: np.ndarray, labels: np.ndarray, n_indicators: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-indicator sums and counts, accumulated left to right in labeled-set order."""
    sums = np.bincount(labels, weights=cos_row, minlength=n_indicators)
    counts = np.bincount(labels, minlength=n_indicators)
    return sums, counts


def _score_means(sums: np.ndarray, counts: np.ndarray) -> np.ndarray:
    means = np.full(sums.shape[0], -np.inf)
    present = counts > 0
    np.divide(sums, counts.astype(np.float64), out=means, where=present)
    return means


def _decide(
    means: np.ndarray, counts: np.ndarray, indicator_ids: list[str], threshold: float
) -> tuple[str | None, float, float | None]:
    """Argmax with lexicographic tie-break; returns (chosen, max_score, runner_up)."""
    present = np.nonzero(counts > 0)[0]
    vals = means[present]
    max_score = float(vals.max())
    tied = [indicator_ids[i] for i in present if means[i] == max_score]
    winner = min(tied)
    if len(vals) > 1:
        runner_up = float(np.sort(vals)[-2])
    else:
        runner_up = None
    chosen = winner if max_score > threshold else None
    return chosen, max_score, runner_up


def _cos_rows_against(
    store: NodeStore, query_rows: np.ndarray, target_rows: np.ndarray
) -> np.ndarray:
    """Clamped cosine block between store rows; dots via einsum, never BLAS."""
    dots = np.einsum("ij,kj->ik", store.matrix[query_rows], store.matrix[target_rows])
    denom = store.norms[query_rows][:, None] * store.norms[target_rows][None, :]
    cos = dots / denom
    np.minimum(cos, 1.0, out=cos)
    np.maximum(cos, -1.0, out=cos)
    return cos


def _cos_row_against(store: NodeStore, query_row: int, target_rows: np.ndarray) -> np.ndarray:
    dots = np.einsum("ij,j->i", store.matrix[target_rows], store.matrix[query_row])
    cos = dots / (store.norms[query_row] * store.norms[target_rows])
    np.minimum(cos, 1.0, out=cos)
    np.maximum(cos, -1.0, out=cos)
    return cos


def _check_norms(store: NodeStore, rows) -> None:
    for row in rows:
        if store.norms[row] == 0.0:
            raise ZeroNormEmbedding(f"node {store.nodes[row].node_id} has a zero embedding")


def affinity_scores(query: ObjectNode, labeled: NodeStore) -> dict[str, float]:
    """Mean cosine between the query and each indicator's labeled nodes.

    Indicators with no labeled nodes are absent from the result. If the query
    node itself is part of the labeled set it is excluded from its own scores.
    """
    ok_rows = labeled.labeled_rows()
    if not ok_rows:
        raise EmptyLabeledSet("affinity_scores needs at least one labeled node")
    if query.embedding.dim != labeled.dim:
        raise DimensionMismatch(f"query dim {query.embedding.dim} != store dim {labeled.dim}")
    qnorm = l2_norm(query.embedding)
    if qnorm == 0.0:
        raise ZeroNormEmbedding(f"query node {query.node_id} has a zero embedding")

    rows = np.array(ok_rows, dtype=np.int64)
    if query.node_id in labeled._row:
        qrow = labeled.row_of(query.node_id)
        rows = rows[rows != qrow]
        if rows.size == 0:
            raise EmptyLabeledSet("labeled set holds only the query node itself")
    _check_norms(labeled, rows)

    dots = np.einsum("ij,j->i", labeled.matrix[rows], np.ascontiguousarray(query.embedding.values))
    cos = dots / (qnorm * labeled.norms[rows])
    np.minimum(cos, 1.0, out=cos)
    np.maximum(cos, -1.0, out=cos)

    sums, counts = _ordered_group_sums(cos, labeled.label_idx[rows], labeled.n_indicators)
    means = _score_means(sums, counts)
    ids = labeled.indicator_ids()
    return {ids[i]: float(means[i]) for i in range(labeled.n_indicators) if counts[i] > 0}


def _ordered_reminiscence_rows(store: NodeStore, config: PropagationConfig) -> np.ndarray:
    rows = store.reminiscence_rows
    if config.node_order == "node_id_lexicographic":
        rows = np.array(sorted(rows, key=lambda r: store.nodes[r].node_id), dtype=np.int64)
    return rows


def _pass_preconditions(store: NodeStore, order_rows: np.ndarray) -> None:
    if store.n_indicators == 0 or store.labeled_count() == 0:
        raise EmptyLabeledSet("propagation needs a non-empty labeled set")
    _check_norms(store, store.labeled_rows())
    _check_norms(store, order_rows)


def _sequential_pass(store: NodeStore, config: PropagationConfig, order_rows: np.ndarray) -> list[NodeDecision]:
    ids = store.indicator_ids()
    decisions: list[NodeDecision] = []
    for qrow in order_rows:
        rows = np.array(store.labeled_rows(), dtype=np.int64)
        rows = rows[rows != qrow]
        cos = _cos_row_against(store, int(qrow), rows)
        sums, counts = _ordered_group_sums(cos, store.label_idx[rows], store.n_indicators)
        means = _score_means(sums, counts)
        chosen, max_score, runner_up = _decide(means, counts, ids, config.threshold)
        decisions.append(NodeDecision(store.nodes[qrow].node_id, chosen, max_score, runner_up))
        if chosen is not None:
            store.assign_label(int(qrow), chosen)
    return decisions


def _batch_pass(
    store: NodeStore, config: PropagationConfig, order_rows: np.ndarray, workers: int
) -> list[NodeDecision]:
    ids = store.indicator_ids()
    n_ind = store.n_indicators
    ok_rows = np.array(store.labeled_rows(), dtype=np.int64)
    ok_labels = store.label_idx[ok_rows]
    base_counts = np.bincount(ok_labels, minlength=n_ind)
    present = base_counts > 0
    labeled_set = set(ok_rows.tolist())
    # Lexicographic tie-break, vectorized: scan indicators in id order and take
    # the first one achieving the row maximum.
    lex_perm = np.array(sorted(range(n_ind), key=lambda i: ids[i]), dtype=np.int64)

    chunks = [order_rows[s : s + _CHUNK_ROWS] for s in range(0, len(order_rows), _CHUNK_ROWS)]

    def run_chunk(chunk: np.ndarray) -> list[NodeDecision]:
        cos_block = _cos_rows_against(store, chunk, ok_rows)
        decisions: list[NodeDecision | None] = [None] * len(chunk)

        in_ok = np.fromiter((int(q) in labeled_set for q in chunk), dtype=bool, count=len(chunk))
        fast = np.nonzero(~in_ok)[0]
        if fast.size:
            # One flattened bincount keeps each row's per-indicator sums in the
            # same left-to-right order as the scalar reference path.
            sub = cos_block[fast]
            n_fast = fast.size
            flat_labels = (
                np.arange(n_fast, dtype=np.int64)[:, None] * n_ind + ok_labels[None, :]
            ).ravel()
            sums = np.bincount(flat_labels, weights=sub.ravel(), minlength=n_fast * n_ind)
            sums = sums.reshape(n_fast, n_ind)
            means = np.full((n_fast, n_ind), -np.inf)
            np.divide(
                sums, base_counts.astype(np.float64)[None, :], out=means, where=present[None, :]
            )
            vals = means[:, present]
            maxv = vals.max(axis=1)
            n_present = vals.shape[1]
            runner = (
                np.partition(vals, n_present - 2, axis=1)[:, n_present - 2]
                if n_present > 1
                else None
            )
            means_lex = means[:, lex_perm]
            winner_lex = np.argmax(means_lex == maxv[:, None], axis=1)
            above = maxv > config.threshold
            for f, i in enumerate(fast.tolist()):
                chosen = ids[int(lex_perm[winner_lex[f]])] if above[f] else None
                decisions[i] = NodeDecision(
                    store.nodes[chunk[i]].node_id,
                    chosen,
                    float(maxv[f]),
                    float(runner[f]) if runner is not None else None,
                )

        # Already-labeled rows exclude their own column, which changes the
        # accumulation order, so they go through the scalar path.
        for i in np.nonzero(in_ok)[0].tolist():
            qrow = chunk[i]
            keep = ok_rows != qrow
            sums, counts = _ordered_group_sums(cos_block[i][keep], ok_labels[keep], n_ind)
            means = _score_means(sums, counts)
            chosen, max_score, runner_up = _decide(means, counts, ids, config.threshold)
            decisions[i] = NodeDecision(store.nodes[qrow].node_id, chosen, max_score, runner_up)
        return decisions  # type: ignore[return-value]

    if workers <= 1 or len(chunks) <= 1:
        chunk_decisions = [run_chunk(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            chunk_decisions = list(ex.map(run_chunk, chunks))

    decisions = [d for block in chunk_decisions for d in block]
    # Single-threaded commit, in iteration order, against the pass-start labeled set.
    for qrow, decision in zip(order_rows, decisions):
        if decision.chosen_indicator is not None:
            store.assign_label(int(qrow), decision.chosen_indicator)
    return decisions


def _changed_ratio(
    store: NodeStore, before: np.ndarray, config: PropagationConfig
) -> tuple[int, int, float]:
    rem = store.reminiscence_rows
    after = store.label_idx[rem]
    prior = before[rem]
    assigned = int(np.count_nonzero((prior < 0) & (after >= 0)))
    changed = int(np.count_nonzero((prior >= 0) & (after >= 0) & (prior != after)))
    if config.ratio_denominator == "all_reminiscence":
        denom = len(rem)
    else:
        denom = int(np.count_nonzero(after >= 0))
    ratio = (assigned + changed) / denom if denom else 0.0
    return assigned, changed, ratio


def propagate_pass(
    store: NodeStore, config: PropagationConfig, *, workers: int = 1, pass_index: int = 1
) -> tuple[NodeStore, PassReport]:
    """One full sweep over the reminiscence pool; mutates the store's label state."""
    order_rows = _ordered_reminiscence_rows(store, config)
    _pass_preconditions(store, order_rows)
    before = store.labels_snapshot()
    if config.update_mode == "sequential":
        decisions = _sequential_pass(store, config, order_rows)
    else:
        decisions = _batch_pass(store, config, order_rows, workers)
    assigned, changed, ratio = _changed_ratio(store, before, config)
    report = PassReport(
        pass_index=pass_index,
        labels_assigned=assigned,
        labels_changed=changed,
        changed_ratio=ratio,
        decisions=tuple(decisions),
    )
    return store, report


def propagate(store: NodeStore, config: PropagationConfig, *, workers: int = 1) -> PropagationResult:
    """Repeat passes until the changed-node ratio drops below the convergence ratio.

    Stops converged once a pass alters fewer than convergence_ratio of the
    reminiscence pool, or unconverged at the max_iterations cap. Output is
    deterministic for a given store and config regardless of worker count.
    """
    passes: list[PassReport] = []
    converged = False
    for pass_index in range(1, config.max_iterations + 1):
        _, report = propagate_pass(store, config, workers=workers, pass_index=pass_index)
        passes.append(report)
        if report.changed_ratio < config.convergence_ratio:
            converged = True
            break
    return PropagationResult(
        final_store=store,
        passes=passes,
        converged=converged,
        iterations_used=len(passes),
        config=config,
    )
