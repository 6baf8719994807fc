"""Synthetic dataset generation, the brute-force propagation reference, and analyses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    LABEL_FIXED,
    LABEL_NONE,
    NOISE_AMBIGUOUS,
    NOISE_CLEAN,
    NOISE_INVALID,
    ORIGIN_REMINISCENCE,
    ORIGIN_SEED_HUMAN,
    ORIGIN_SEED_VIEW,
    BoundingBox,
    DatasetManifest,
    EmbeddingVector,
    EvaluationView,
    Indicator,
    NodeAnnotation,
    NodeStore,
    ObjectNode,
    PersonalObject,
    Scene,
    SceneBox,
    TestQuery,
)
from .errors import (
    EmptyLabeledSet,
    InfeasibleSpec,
    InvalidConfig,
    SizeOutOfRange,
    ZeroNormEmbedding,
)
from .propagation import (
    NodeDecision,
    PassReport,
    PropagationConfig,
    PropagationResult,
)

# ---------------------------------------------------------------------------
# Brute-force reference implementation
#
# A deliberate pair-by-pair re-derivation of the propagation loop: every
# cosine is recomputed from the raw vectors on every pass, nothing is cached,
# nothing is vectorized, nothing runs in parallel. Kept independent of the
# engine's kernel so the two can check each other.


def _pair_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(float(np.einsum("j,j->", a, a)))
    nb = math.sqrt(float(np.einsum("j,j->", b, b)))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormEmbedding("cosine similarity is undefined for a zero vector")
    raw = float(np.einsum("j,j->", a, b)) / (na * nb)
    return min(max(raw, -1.0), 1.0)


def _brute_decide(
    sums: dict[str, float],
    counts: dict[str, int],
    threshold: float,
) -> tuple[str | None, float, float | None]:
    means = {u: sums[u] / counts[u] for u in sums}
    max_score = max(means.values())
    winner = min(u for u, m in means.items() if m == max_score)
    ordered = sorted(means.values(), reverse=True)
    runner_up = ordered[1] if len(ordered) > 1 else None
    chosen = winner if max_score > threshold else None
    return chosen, max_score, runner_up


def _brute_scores(
    store: NodeStore, qrow: int, ok_rows: list[int], ok_labels: list[str]
) -> tuple[dict[str, float], dict[str, int]]:
    q = store.nodes[qrow].embedding.values
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for krow, label in zip(ok_rows, ok_labels):
        if krow == qrow:
            continue
        phi = _pair_cosine(q, store.nodes[krow].embedding.values)
        if label in sums:
            sums[label] = sums[label] + phi
            counts[label] = counts[label] + 1
        else:
            sums[label] = phi
            counts[label] = 1
    return sums, counts


def brute_force_propagate(store: NodeStore, config: PropagationConfig) -> PropagationResult:
    """Reference propagation over small instances; output type identical to propagate."""
    rem_rows = [int(r) for r in store.reminiscence_rows]
    if config.node_order == "node_id_lexicographic":
        rem_rows.sort(key=lambda r: store.nodes[r].node_id)
    if store.n_indicators == 0 or store.labeled_count() == 0:
        raise EmptyLabeledSet("propagation needs a non-empty labeled set")

    passes: list[PassReport] = []
    converged = False
    for pass_index in range(1, config.max_iterations + 1):
        before = {row: store.nodes[row].label for row in rem_rows}
        decisions: list[NodeDecision] = []

        if config.update_mode == "sequential":
            for qrow in rem_rows:
                ok_rows = store.labeled_rows()
                ok_labels = [store.nodes[r].label for r in ok_rows]
                sums, counts = _brute_scores(store, qrow, ok_rows, ok_labels)
                chosen, max_score, runner_up = _brute_decide(sums, counts, config.threshold)
                decisions.append(
                    NodeDecision(store.nodes[qrow].node_id, chosen, max_score, runner_up)
                )
                if chosen is not None:
                    store.assign_label(qrow, chosen)
        else:
            ok_rows = store.labeled_rows()
            ok_labels = [store.nodes[r].label for r in ok_rows]
            for qrow in rem_rows:
                sums, counts = _brute_scores(store, qrow, ok_rows, ok_labels)
                chosen, max_score, runner_up = _brute_decide(sums, counts, config.threshold)
                decisions.append(
                    NodeDecision(store.nodes[qrow].node_id, chosen, max_score, runner_up)
                )
            for qrow, decision in zip(rem_rows, decisions):
                if decision.chosen_indicator is not None:
                    store.assign_label(qrow, decision.chosen_indicator)

        assigned = 0
        changed = 0
        labeled_now = 0
        for row in rem_rows:
            after = store.nodes[row].label
            prior = before[row]
            if after is not None:
                labeled_now += 1
            if prior is None and after is not None:
                assigned += 1
            elif prior is not None and after is not None and prior != after:
                changed += 1
        if config.ratio_denominator == "all_reminiscence":
            denom = len(rem_rows)
        else:
            denom = labeled_now
        ratio = (assigned + changed) / denom if denom else 0.0

        passes.append(
            PassReport(
                pass_index=pass_index,
                labels_assigned=assigned,
                labels_changed=changed,
                changed_ratio=ratio,
                decisions=tuple(decisions),
            )
        )
        if ratio < config.convergence_ratio:
            converged = True
            break

    return PropagationResult(
        final_store=store,
        passes=passes,
        converged=converged,
        iterations_used=len(passes),
        config=config,
    )


# ---------------------------------------------------------------------------
# Random small instances for oracle-equivalence checks


def random_instance(
    seed: int, *, max_nodes: int = 50, max_indicators: int = 5
) -> tuple[list[ObjectNode], list[Indicator], PropagationConfig]:
    """Deterministic random propagation instance; call twice for two fresh copies."""
    rng = np.random.default_rng(np.random.SeedSequence([987_001, seed]))
    k = int(rng.integers(1, max_indicators + 1))
    dim = int(rng.integers(2, 17))
    indicators = [Indicator(id=f"u{j:02d}", text=f"object {j}") for j in range(k)]

    def vec() -> np.ndarray:
        v = rng.standard_normal(dim)
        while float(np.einsum("j,j->", v, v)) == 0.0:
            v = rng.standard_normal(dim)
        return v.astype(np.float32).astype(np.float64)

    centers = [vec() for _ in range(k)]
    box = BoundingBox(0, 0, 10, 10)
    nodes: list[ObjectNode] = []
    for j, ind in enumerate(indicators):
        n_seeds = int(rng.integers(1, 4))
        for s in range(n_seeds):
            emb = centers[j] + 0.15 * rng.standard_normal(dim)
            nodes.append(
                ObjectNode(
                    node_id=f"seed-{j:02d}-{s}",
                    embedding=EmbeddingVector(emb.astype(np.float32).astype(np.float64)),
                    scene_id=f"interaction-{j:02d}",
                    box=box,
                    origin=ORIGIN_SEED_HUMAN if s == 0 else ORIGIN_SEED_VIEW,
                    label=ind.id,
                    label_kind=LABEL_FIXED,
                )
            )
    budget = max_nodes - len(nodes)
    n_rem = int(rng.integers(1, max(2, budget + 1)))
    for m in range(n_rem):
        if rng.random() < 0.55:
            j = int(rng.integers(0, k))
            emb = centers[j] + rng.uniform(0.1, 0.9) * rng.standard_normal(dim)
        else:
            emb = vec()
        nodes.append(
            ObjectNode(
                node_id=f"rem-{m:03d}",
                embedding=EmbeddingVector(emb.astype(np.float32).astype(np.float64)),
                scene_id=f"scene-{m % 7}",
                box=box,
                origin=ORIGIN_REMINISCENCE,
            )
        )

    config = PropagationConfig(
        threshold=float(rng.uniform(-0.2, 0.97)),
        max_iterations=int(rng.integers(1, 20)),
        convergence_ratio=float(rng.choice([0.05, 0.10, 0.25])),
        update_mode=str(rng.choice(["sequential", "batch"])),
        node_order=str(rng.choice(["manifest_order", "node_id_lexicographic"])),
    )
    return nodes, indicators, config


# ---------------------------------------------------------------------------
# Synthetic dataset generation


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry and sizing for one synthetic dataset.

    The first block mirrors the measurable dataset shape; the second block is
    the embedding-space difficulty model (how clusters, partial boxes, and
    non-objects are laid out on the sphere), which is a modeling choice.
    """

    n_indicators: int = 12
    nodes_per_indicator: int = 20
    n_scenes: int = 40
    dim: int = 64
    intra_cluster_cos_min: float = 0.90
    inter_cluster_cos_max: float = 0.30
    n_ambiguous: int = 0
    n_invalid: int = 0
    rng_seed: int = 0

    views_per_object: int = 4
    member_cos_max: float = 0.995
    view_cos_low: float | None = None
    view_cos_high: float | None = None
    # Appearance varies along a low-dimensional pose manifold per object, so
    # off-center directions concentrate in a small subspace instead of being
    # isotropic; this is what makes a single capture unrepresentative.
    pose_dims: int = 2
    pose_frac: float = 0.8
    n_everyday: int = 0
    everyday_nodes_per_cluster: int = 12
    group_size: int = 1
    group_cos: float | None = None
    ambiguous_weight_low: float = 0.35
    ambiguous_weight_high: float = 0.65
    invalid_cos_max: float = 0.20

    n_test_scenes_het: int = 10
    n_test_scenes_hom: int = 0
    n_test_scenes_clut: int = 0
    queries_per_scene: int = 2
    distractors_per_query: int = 3
    hard_negatives_per_query: int = 1
    # Normalization pulls a convex mixture toward its dominant component:
    # weights near 0.5 land at cosine ~0.7-0.8 to that center, inside the band
    # where single-seed prototypes get out-argmaxed but averaged ones do not.
    hard_negative_weight_low: float = 0.48
    hard_negative_weight_high: float = 0.55
    clutter_candidates: int = 14

    def __post_init__(self) -> None:
        if self.intra_cluster_cos_min <= self.inter_cluster_cos_max:
            raise InvalidConfig(
                "intra_cluster_cos_min must exceed inter_cluster_cos_max (separability margin)"
            )
        counts = (
            self.n_indicators,
            self.nodes_per_indicator,
            self.n_scenes,
            self.n_ambiguous,
            self.n_invalid,
            self.views_per_object,
            self.n_everyday,
            self.everyday_nodes_per_cluster,
            self.n_test_scenes_het,
            self.n_test_scenes_hom,
            self.n_test_scenes_clut,
        )
        if any(c < 0 for c in counts):
            raise InvalidConfig("all synthetic counts must be >= 0")
        if self.n_indicators == 0:
            raise InvalidConfig("need at least one personal indicator")
        if self.dim < 2:
            raise InvalidConfig("dim must be >= 2")
        if self.group_size < 1:
            raise InvalidConfig("group_size must be >= 1")
        if self.group_cos is not None and self.group_cos > self.inter_cluster_cos_max:
            raise InvalidConfig("group_cos must not exceed inter_cluster_cos_max")
        if self.n_test_scenes_hom > 0 and (self.group_size < 2 or self.group_cos is None):
            raise InvalidConfig("homogeneous test scenes need grouped clusters (group_size >= 2, group_cos set)")
        if not (0 <= self.ambiguous_weight_low <= self.ambiguous_weight_high <= 1):
            raise InvalidConfig("ambiguous weight range must satisfy 0 <= low <= high <= 1")
        if (self.view_cos_low is None) != (self.view_cos_high is None):
            raise InvalidConfig("view_cos_low and view_cos_high must be set together")
        if self.view_cos_low is not None and not (0 < self.view_cos_low <= self.view_cos_high <= 1):
            raise InvalidConfig("view cone range must satisfy 0 < low <= high <= 1")
        if self.pose_dims < 0 or not (0.0 <= self.pose_frac <= 1.0):
            raise InvalidConfig("pose_dims must be >= 0 and pose_frac within [0, 1]")
        if self.pose_dims >= self.dim:
            raise InvalidConfig("pose_dims must be smaller than dim")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / float(np.sqrt(np.einsum("j,j->", v, v)))


def _cone_samples(center: np.ndarray, n: int, cos_lo: float, cos_hi: float, rng) -> np.ndarray:
    """n unit vectors with cosine to center drawn uniformly from [cos_lo, cos_hi]."""
    dim = center.shape[0]
    cos = rng.uniform(cos_lo, cos_hi, size=n)
    t = rng.standard_normal((n, dim))
    t -= np.einsum("ij,j->i", t, center)[:, None] * center
    t /= np.sqrt(np.einsum("ij,ij->i", t, t))[:, None]
    return cos[:, None] * center + np.sqrt(1.0 - cos**2)[:, None] * t


def _sample_centers(spec: SyntheticSpec, rng) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    """Personal and everyday cluster centers with pairwise cosine <= inter_cluster_cos_max."""
    budget = 4000
    centers: list[np.ndarray] = []
    groups: list[list[int]] = []

    def admissible(v: np.ndarray, cap: float) -> bool:
        return all(float(np.einsum("j,j->", v, c)) <= cap for c in centers)

    if spec.group_cos is None:
        for _ in range(spec.n_indicators):
            for attempt in range(budget):
                v = _unit(rng.standard_normal(spec.dim))
                if admissible(v, spec.inter_cluster_cos_max):
                    centers.append(v)
                    groups.append([len(centers) - 1])
                    break
            else:
                raise InfeasibleSpec(
                    f"could not place {spec.n_indicators} centers at pairwise cosine "
                    f"<= {spec.inter_cluster_cos_max} in dim {spec.dim}"
                )
    else:
        # Grouped clusters share an anchor; members sit at sqrt(group_cos) from it,
        # which makes in-group pairwise cosine land at group_cos.
        anchor_cos = math.sqrt(spec.group_cos)
        remaining = spec.n_indicators
        while remaining > 0:
            size = min(spec.group_size, remaining)
            for attempt in range(budget):
                anchor = _unit(rng.standard_normal(spec.dim))
                members = [
                    _unit(m) for m in _cone_samples(anchor, size, anchor_cos, anchor_cos, rng)
                ]
                ok = all(
                    admissible(m, spec.inter_cluster_cos_max) for m in members
                ) and all(
                    float(np.einsum("j,j->", members[i], members[j])) <= spec.inter_cluster_cos_max
                    for i in range(size)
                    for j in range(i + 1, size)
                )
                if ok:
                    start = len(centers)
                    centers.extend(members)
                    groups.append(list(range(start, start + size)))
                    break
            else:
                raise InfeasibleSpec(
                    f"could not place grouped centers at group_cos={spec.group_cos} "
                    f"within pairwise cap {spec.inter_cluster_cos_max}"
                )
            remaining -= size

    everyday: list[np.ndarray] = []
    for _ in range(spec.n_everyday):
        for attempt in range(budget):
            v = _unit(rng.standard_normal(spec.dim))
            if admissible(v, spec.inter_cluster_cos_max) and all(
                float(np.einsum("j,j->", v, e)) <= spec.inter_cluster_cos_max for e in everyday
            ):
                everyday.append(v)
                break
        else:
            raise InfeasibleSpec("could not place everyday-object centers at the requested separation")

    personal = np.array(centers) if centers else np.empty((0, spec.dim))
    everyday_arr = np.array(everyday) if everyday else np.empty((0, spec.dim))
    return personal, everyday_arr, groups


def _push_invalid(all_centers: np.ndarray, n: int, cos_max: float, rng, dim: int) -> np.ndarray:
    """Random directions nudged until near-orthogonal (|cos| <= cos_max) to every center."""
    if n == 0:
        return np.empty((0, dim))
    target = 0.8 * cos_max
    for attempt in range(40):
        v = rng.standard_normal((n, dim))
        v /= np.sqrt(np.einsum("ij,ij->i", v, v))[:, None]
        for _ in range(300):
            cos = v @ all_centers.T
            excess = cos - np.clip(cos, -target, target)
            if not np.any(np.abs(cos) > cos_max):
                break
            v = v - excess @ all_centers
            norms = np.sqrt(np.einsum("ij,ij->i", v, v))
            if np.any(norms == 0):
                break
            v /= norms[:, None]
        v32 = v.astype(np.float32).astype(np.float64)
        v32 /= np.sqrt(np.einsum("ij,ij->i", v32, v32))[:, None]
        if not np.any(np.abs(v32 @ all_centers.T) > cos_max):
            return v32
    raise InfeasibleSpec(
        f"could not push {n} invalid nodes below |cos| <= {cos_max} against "
        f"{all_centers.shape[0]} centers in dim {dim}"
    )


_CANVAS_W, _CANVAS_H = 1280, 960
_GRID_COLS, _GRID_ROWS = 8, 6


def _grid_box(cell: int, rng) -> BoundingBox:
    col, row = cell % _GRID_COLS, (cell // _GRID_COLS) % _GRID_ROWS
    cw, ch = _CANVAS_W // _GRID_COLS, _CANVAS_H // _GRID_ROWS
    x0, y0 = col * cw, row * ch
    w = float(rng.uniform(0.45, 0.75) * cw)
    h = float(rng.uniform(0.45, 0.75) * ch)
    x1 = x0 + float(rng.uniform(0.02, 0.2) * cw)
    y1 = y0 + float(rng.uniform(0.02, 0.2) * ch)
    return BoundingBox(round(x1, 1), round(y1, 1), round(x1 + w, 1), round(y1 + h, 1))


def _overlap_box(gt: BoundingBox) -> BoundingBox:
    """A partial-coverage box: shifted to overlap the true box at IoU 1/7."""
    w = gt.x2 - gt.x1
    dx = 0.75 * w
    if gt.x2 + dx <= _CANVAS_W:
        return BoundingBox(round(gt.x1 + dx, 1), gt.y1, round(gt.x2 + dx, 1), gt.y2)
    return BoundingBox(round(max(0.0, gt.x1 - dx), 1), gt.y1, round(gt.x2 - dx, 1), gt.y2)


class _DatasetBuilder:
    def __init__(self, dim: int) -> None:
        self.dim = dim
        self.rows: list[np.ndarray] = []
        self.scenes: list[Scene] = []
        self.annotations: dict[str, NodeAnnotation] = {}

    def add_embedding(self, vec: np.ndarray) -> int:
        row = np.asarray(vec, dtype=np.float64).astype(np.float32).astype(np.float64)
        self.rows.append(row)
        return len(self.rows) - 1

    def table(self) -> np.ndarray:
        return np.array(self.rows) if self.rows else np.empty((0, self.dim))


def generate_synthetic_dataset(spec: SyntheticSpec) -> DatasetManifest:
    """Deterministic clustered dataset with seeds, views, noise nodes, and test scenes.

    Cluster centers sit on the unit sphere at pairwise cosine at most
    inter_cluster_cos_max; every clean member stays within its cluster cone
    (cosine to center at least intra_cluster_cos_min, re-validated after the
    float32 round trip). Ambiguous nodes are normalized two-center mixtures;
    invalid nodes are pushed near-orthogonal to every center.
    """
    rng = np.random.default_rng(spec.rng_seed)
    personal, everyday, groups = _sample_centers(spec, rng)
    all_centers = np.vstack([personal, everyday]) if everyday.size else personal
    group_of = {j: g for g in groups for j in g}

    pose_bases: list[np.ndarray | None] = []
    for c in all_centers:
        if spec.pose_dims == 0:
            pose_bases.append(None)
            continue
        raw = rng.standard_normal((spec.dim, spec.pose_dims))
        raw -= c[:, None] * np.einsum("j,jk->k", c, raw)[None, :]
        q, _ = np.linalg.qr(raw)
        pose_bases.append(q)

    builder = _DatasetBuilder(spec.dim)
    indicators = [Indicator(id=f"obj-{j:03d}", text=f"my object {j:03d}") for j in range(spec.n_indicators)]
    member_lo = spec.intra_cluster_cos_min + 1e-3
    member_hi = max(spec.member_cos_max, member_lo + 1e-4)

    def cluster_tangent(idx: int) -> np.ndarray:
        center = all_centers[idx]
        basis = pose_bases[idx]
        iso = rng.standard_normal(spec.dim)
        iso -= float(np.einsum("j,j->", iso, center)) * center
        iso = _unit(iso)
        if basis is None or spec.pose_frac == 0.0:
            return iso
        g = rng.standard_normal(basis.shape[1])
        in_pose = _unit(basis @ g)
        t = math.sqrt(spec.pose_frac) * in_pose + math.sqrt(1.0 - spec.pose_frac) * iso
        t -= float(np.einsum("j,j->", t, center)) * center
        return _unit(t)

    def cluster_sample(idx: int, cos_lo: float, cos_hi: float) -> np.ndarray:
        # float32 casting can shave ~1e-7 off a cosine; the 1e-3 margin absorbs it.
        center = all_centers[idx]
        for _ in range(50):
            c = rng.uniform(cos_lo, cos_hi)
            v = c * center + math.sqrt(1.0 - c * c) * cluster_tangent(idx)
            v32 = _unit(v.astype(np.float32).astype(np.float64))
            if cos_lo < member_lo:
                return v32  # bands below the member cone carry no intra guarantee
            if float(np.einsum("j,j->", v32, center)) >= spec.intra_cluster_cos_min:
                return v32
        raise InfeasibleSpec("could not keep a member inside its cluster cone after rounding")

    def cone_member(idx: int) -> np.ndarray:
        return cluster_sample(idx, member_lo, member_hi)

    # View captures show the object from other angles: same pose manifold,
    # optionally a farther band when the profile separates the two cones.
    view_lo = spec.view_cos_low if spec.view_cos_low is not None else member_lo
    view_hi = spec.view_cos_high if spec.view_cos_high is not None else member_hi

    def cone_view(idx: int) -> np.ndarray:
        return cluster_sample(idx, view_lo, view_hi)

    # Interaction captures: one seed plus A views per personal object.
    personal_objects: list[PersonalObject] = []
    for j, ind in enumerate(indicators):
        seed_id = f"seed-{ind.id}"
        view_ids = [f"view-{ind.id}-{a}" for a in range(spec.views_per_object)]
        boxes = []
        seed_off = builder.add_embedding(cone_member(j))
        boxes.append(SceneBox(node_id=seed_id, box=_grid_box(0, rng), embedding_offset=seed_off))
        for a, vid in enumerate(view_ids):
            off = builder.add_embedding(cone_view(j))
            boxes.append(SceneBox(node_id=vid, box=_grid_box(a + 1, rng), embedding_offset=off))
        builder.scenes.append(
            Scene(
                scene_id=f"interaction-{ind.id}",
                image_ref=f"capture://interaction/{ind.id}",
                boxes=tuple(boxes),
            )
        )
        personal_objects.append(
            PersonalObject(indicator=ind, seed_node_id=seed_id, view_node_ids=tuple(view_ids))
        )

    # Reminiscence payload: clean members, everyday objects, then the two noise classes.
    payload: list[tuple[np.ndarray, str | None, str]] = []
    for j, ind in enumerate(indicators):
        for _ in range(spec.nodes_per_indicator):
            payload.append((cone_member(j), ind.id, NOISE_CLEAN))
    for e in range(everyday.shape[0]):
        for _ in range(spec.everyday_nodes_per_cluster):
            payload.append((cone_member(spec.n_indicators + e), None, NOISE_CLEAN))
    for _ in range(spec.n_ambiguous):
        a = int(rng.integers(0, spec.n_indicators))
        b = int(rng.integers(0, all_centers.shape[0]))
        while b == a:
            b = int(rng.integers(0, all_centers.shape[0]))
        w = float(rng.uniform(spec.ambiguous_weight_low, spec.ambiguous_weight_high))
        mix = _unit(w * personal[a] + (1.0 - w) * all_centers[b])
        payload.append((_unit(mix.astype(np.float32).astype(np.float64)), None, NOISE_AMBIGUOUS))
    for row in _push_invalid(all_centers, spec.n_invalid, spec.invalid_cos_max, rng, spec.dim):
        payload.append((row, None, NOISE_INVALID))

    order = rng.permutation(len(payload))
    scene_bins: list[list[SceneBox]] = [[] for _ in range(spec.n_scenes)]
    for seq, payload_idx in enumerate(order):
        vec, gt, noise = payload[payload_idx]
        node_id = f"rem-{seq:05d}"
        off = builder.add_embedding(vec)
        scene_idx = seq % spec.n_scenes
        cell = len(scene_bins[scene_idx])
        scene_bins[scene_idx].append(SceneBox(node_id=node_id, box=_grid_box(cell, rng), embedding_offset=off))
        if gt is not None or noise != NOISE_CLEAN:
            builder.annotations[node_id] = NodeAnnotation(gt_label=gt, noise_class=noise)
    for i, boxes in enumerate(scene_bins):
        builder.scenes.append(
            Scene(scene_id=f"scene-{i:04d}", image_ref=f"capture://scene/{i:04d}", boxes=tuple(boxes))
        )

    # Test scenes, held out of the reminiscence pool.
    test_queries: list[TestQuery] = []
    counter = {"n": 0}

    def new_node(vec: np.ndarray, scene_boxes: list[SceneBox], cell: int) -> SceneBox:
        counter["n"] += 1
        sb = SceneBox(
            node_id=f"test-{counter['n']:05d}",
            box=_grid_box(cell, rng),
            embedding_offset=builder.add_embedding(vec),
        )
        scene_boxes.append(sb)
        return sb

    def distractor_vec(queried: int, split: str) -> np.ndarray:
        if split == "homogeneous":
            mates = [m for m in group_of.get(queried, [queried]) if m != queried]
            if mates:
                return cone_member(int(rng.choice(mates)))
        total = all_centers.shape[0]
        pick = int(rng.integers(0, total))
        while pick == queried:
            pick = int(rng.integers(0, total))
        return cone_member(pick)

    def hard_negative_vec(queried: int) -> np.ndarray:
        # Mixing with a nearby center would land inside the queried cone and be
        # unresolvable for any method, so only well-separated partners qualify.
        mates = set(group_of.get(queried, [queried]))
        c_q = personal[queried]
        for _ in range(200):
            other = int(rng.integers(0, all_centers.shape[0]))
            if other in mates:
                continue
            if float(np.einsum("j,j->", c_q, all_centers[other])) <= 0.35:
                break
        w = float(rng.uniform(spec.hard_negative_weight_low, spec.hard_negative_weight_high))
        mix = _unit(w * c_q + (1.0 - w) * all_centers[other])
        return _unit(mix.astype(np.float32).astype(np.float64))

    def build_test_scene(split: str, index: int, n_queries: int, n_distractors: int) -> None:
        scene_id = f"test-{split}-{index:03d}"
        queried = rng.choice(spec.n_indicators, size=min(n_queries, spec.n_indicators), replace=False)
        boxes: list[SceneBox] = []
        cell = 0
        pending: list[tuple[str, BoundingBox]] = []
        for q in queried:
            q = int(q)
            gt_sb = new_node(cone_member(q), boxes, cell)
            cell += 1
            pending.append((indicators[q].id, gt_sb.box))
            for _ in range(n_distractors):
                new_node(distractor_vec(q, split), boxes, cell)
                cell += 1
            for _ in range(spec.hard_negatives_per_query):
                counter["n"] += 1
                boxes.append(
                    SceneBox(
                        node_id=f"test-{counter['n']:05d}",
                        box=_overlap_box(gt_sb.box),
                        embedding_offset=builder.add_embedding(hard_negative_vec(q)),
                    )
                )
        builder.scenes.append(
            Scene(scene_id=scene_id, image_ref=f"capture://test/{split}/{index:03d}", boxes=tuple(boxes))
        )
        for indicator_id, gt_box in pending:
            test_queries.append(
                TestQuery(scene_id=scene_id, indicator_id=indicator_id, gt_box=gt_box, split=split)
            )

    for i in range(spec.n_test_scenes_het):
        build_test_scene("heterogeneous", i, spec.queries_per_scene, spec.distractors_per_query)
    for i in range(spec.n_test_scenes_hom):
        build_test_scene("homogeneous", i, spec.queries_per_scene, spec.distractors_per_query)
    for i in range(spec.n_test_scenes_clut):
        build_test_scene("cluttered", i, 1, spec.clutter_candidates)

    manifest = DatasetManifest(
        dim=spec.dim,
        embedding_blob_ref="embeddings.bin",
        scenes=builder.scenes,
        personal_objects=personal_objects,
        test_queries=test_queries,
        embeddings=builder.table(),
        annotations=builder.annotations,
    )
    _validate_generated(manifest, spec, personal, all_centers)
    return manifest


def _validate_generated(
    manifest: DatasetManifest, spec: SyntheticSpec, personal: np.ndarray, all_centers: np.ndarray
) -> None:
    """Post-generation guarantee check: emitted nodes actually satisfy their cosine bounds."""
    cos = all_centers @ all_centers.T
    np.fill_diagonal(cos, 0.0)
    if np.any(cos > spec.inter_cluster_cos_max + 1e-9):
        raise InfeasibleSpec("generated centers violate the pairwise separation cap")
    view = EvaluationView(manifest)
    indicator_pos = {po.indicator.id: i for i, po in enumerate(manifest.personal_objects)}
    for scene in manifest.reminiscence_scenes():
        for sb in scene.boxes:
            gt = view.gt_label(sb.node_id)
            noise = view.noise_class(sb.node_id)
            emb = manifest.embeddings[sb.embedding_offset]
            emb = emb / float(np.sqrt(np.einsum("j,j->", emb, emb)))
            if noise == NOISE_CLEAN and gt is not None:
                c = personal[indicator_pos[gt]]
                if float(np.einsum("j,j->", emb, c)) < spec.intra_cluster_cos_min:
                    raise InfeasibleSpec(f"clean node {sb.node_id} fell outside its cluster cone")
            elif noise == NOISE_INVALID:
                if float(np.max(np.abs(all_centers @ emb))) > spec.invalid_cos_max + 1e-9:
                    raise InfeasibleSpec(f"invalid node {sb.node_id} is not near-orthogonal to all centers")


# ---------------------------------------------------------------------------
# Built-in profiles


def separable_spec(rng_seed: int = 0, **overrides) -> SyntheticSpec:
    """Well-separated clusters: the regime where propagation must recover cleanly."""
    params = dict(
        n_indicators=12,
        nodes_per_indicator=25,
        n_scenes=40,
        dim=64,
        intra_cluster_cos_min=0.90,
        inter_cluster_cos_max=0.30,
        n_ambiguous=120,
        n_invalid=150,
        views_per_object=4,
        view_cos_low=0.80,
        view_cos_high=0.90,
        n_everyday=0,
        n_test_scenes_het=10,
        rng_seed=rng_seed,
    )
    params.update(overrides)
    return SyntheticSpec(**params)


def fullscale_spec(rng_seed: int = 0, **overrides) -> SyntheticSpec:
    """Full-scale-shaped workload: 96 objects, 400 raw scenes, mixed box noise."""
    params = dict(
        n_indicators=96,
        nodes_per_indicator=10,
        n_scenes=400,
        dim=96,
        intra_cluster_cos_min=0.78,
        inter_cluster_cos_max=0.62,
        n_ambiguous=393,
        n_invalid=870,
        views_per_object=4,
        member_cos_max=0.98,
        n_everyday=12,
        everyday_nodes_per_cluster=10,
        group_size=4,
        group_cos=0.50,
        n_test_scenes_het=30,
        n_test_scenes_hom=30,
        n_test_scenes_clut=20,
        hard_negatives_per_query=2,
        rng_seed=rng_seed,
    )
    params.update(overrides)
    return SyntheticSpec(**params)


PROFILES = {
    "separable": separable_spec,
    "fullscale": fullscale_spec,
}


# ---------------------------------------------------------------------------
# Noise analysis


@dataclass
class NoiseReport:
    ambiguous_total: int
    ambiguous_labeled: int
    ambiguous_labeled_rate: float
    invalid_total: int
    invalid_labeled: int
    invalid_labeled_rate: float
    per_class: dict
    flags: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "ambiguous_total": self.ambiguous_total,
            "ambiguous_labeled": self.ambiguous_labeled,
            "ambiguous_labeled_rate": self.ambiguous_labeled_rate,
            "invalid_total": self.invalid_total,
            "invalid_labeled": self.invalid_labeled,
            "invalid_labeled_rate": self.invalid_labeled_rate,
            "per_class": self.per_class,
            "flags": self.flags,
        }


def propagation_noise_report(result: PropagationResult, manifest: DatasetManifest) -> NoiseReport:
    """How often propagation labeled ambiguous and invalid boxes, plus clean recall."""
    view = EvaluationView(manifest)
    labels = result.final_labels()
    totals = {NOISE_CLEAN: 0, NOISE_AMBIGUOUS: 0, NOISE_INVALID: 0}
    labeled = {NOISE_CLEAN: 0, NOISE_AMBIGUOUS: 0, NOISE_INVALID: 0}
    clean_with_gt = 0
    clean_correct = 0
    for scene in manifest.reminiscence_scenes():
        for sb in scene.boxes:
            noise = view.noise_class(sb.node_id)
            totals[noise] += 1
            assigned = labels.get(sb.node_id)
            if assigned is not None:
                labeled[noise] += 1
            gt = view.gt_label(sb.node_id)
            if noise == NOISE_CLEAN and gt is not None:
                clean_with_gt += 1
                if assigned == gt:
                    clean_correct += 1

    flags = []
    if totals[NOISE_AMBIGUOUS] == 0:
        flags.append("no_ambiguous_nodes")
    if totals[NOISE_INVALID] == 0:
        flags.append("no_invalid_nodes")

    def rate(cls: str) -> float:
        return 100.0 * labeled[cls] / totals[cls] if totals[cls] else 0.0

    per_class = {
        cls: {"total": totals[cls], "labeled": labeled[cls], "labeled_rate": rate(cls)}
        for cls in (NOISE_CLEAN, NOISE_AMBIGUOUS, NOISE_INVALID)
    }
    per_class[NOISE_CLEAN]["with_gt_total"] = clean_with_gt
    per_class[NOISE_CLEAN]["correctly_labeled"] = clean_correct
    per_class[NOISE_CLEAN]["recall_pct"] = (
        100.0 * clean_correct / clean_with_gt if clean_with_gt else 0.0
    )
    return NoiseReport(
        ambiguous_total=totals[NOISE_AMBIGUOUS],
        ambiguous_labeled=labeled[NOISE_AMBIGUOUS],
        ambiguous_labeled_rate=rate(NOISE_AMBIGUOUS),
        invalid_total=totals[NOISE_INVALID],
        invalid_labeled=labeled[NOISE_INVALID],
        invalid_labeled_rate=rate(NOISE_INVALID),
        per_class=per_class,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Reminiscence-size ablation


@dataclass(frozen=True)
class AblationRow:
    size: int
    trial: int
    method: str
    iou50: float
    iou80: float
    labeled_count: int


@dataclass
class AblationReport:
    rows: list[AblationRow]
    means: list[dict]
    sizes: list[int]
    trials: int
    overall_reports: dict[tuple[int, int, str], str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "trials": self.trials,
            "rows": [
                {
                    "size": r.size,
                    "trial": r.trial,
                    "method": r.method,
                    "iou50": r.iou50,
                    "iou80": r.iou80,
                    "labeled_count": r.labeled_count,
                }
                for r in self.rows
            ],
            "means": self.means,
        }


def subsample_manifest(manifest: DatasetManifest, keep_scene_ids: set[str]) -> DatasetManifest:
    """Manifest restricted to a subset of reminiscence scenes; interactions and tests are kept."""
    rem_ids = {s.scene_id for s in manifest.reminiscence_scenes()}
    scenes = [s for s in manifest.scenes if s.scene_id not in rem_ids or s.scene_id in keep_scene_ids]
    kept_nodes = {sb.node_id for s in scenes for sb in s.boxes}
    return DatasetManifest(
        dim=manifest.dim,
        embedding_blob_ref=manifest.embedding_blob_ref,
        scenes=scenes,
        personal_objects=list(manifest.personal_objects),
        test_queries=list(manifest.test_queries),
        embeddings=manifest.embeddings,
        annotations={nid: ann for nid, ann in manifest.annotations.items() if nid in kept_nodes},
    )


def reminiscence_ablation(
    manifest: DatasetManifest,
    sizes: list[int],
    trials: int,
    configs=None,
    *,
    prop_config: PropagationConfig | None = None,
    rng_seed: int = 0,
    workers: int = 1,
) -> AblationReport:
    """Grounding accuracy as a function of how many raw scenes feed propagation.

    Size 0 routes through the direct path (no reminiscence, no propagation);
    its rows are bitwise identical to an explicit direct-method run.
    """
    from .acquisition import build_method_config
    from .pipeline import run_method

    if trials < 1:
        raise InvalidConfig("trials must be >= 1")
    rem_scene_ids = [s.scene_id for s in manifest.reminiscence_scenes()]
    for size in sizes:
        if not (0 <= size <= len(rem_scene_ids)):
            raise SizeOutOfRange(f"size {size} outside [0, {len(rem_scene_ids)}]")
    if configs is None:
        configs = [build_method_config("pga")]
    prop_config = prop_config or PropagationConfig()

    rows: list[AblationRow] = []
    overall_reports: dict[tuple[int, int, str], str] = {}
    for size in sizes:
        for trial in range(1, trials + 1):
            if size == 0:
                runs = {cfg.name: run_method(manifest, "direct", prop_config, workers=workers) for cfg in configs}
            else:
                trial_rng = np.random.default_rng(np.random.SeedSequence([rng_seed, size, trial]))
                chosen = set(
                    str(s)
                    for s in trial_rng.choice(np.array(rem_scene_ids, dtype=object), size=size, replace=False)
                )
                sub = subsample_manifest(manifest, chosen)
                runs = {cfg.name: run_method(sub, cfg, prop_config, workers=workers) for cfg in configs}
            for cfg in configs:
                run = runs[cfg.name]
                rows.append(
                    AblationRow(
                        size=size,
                        trial=trial,
                        method=cfg.name,
                        iou50=run.overall.iou_at_50,
                        iou80=run.overall.iou_at_80,
                        labeled_count=run.labeled_count,
                    )
                )
                overall_reports[(size, trial, cfg.name)] = run.overall.to_json()

    means = []
    for cfg in configs:
        for size in sizes:
            sel = [r for r in rows if r.size == size and r.method == cfg.name]
            means.append(
                {
                    "size": size,
                    "method": cfg.name,
                    "iou50": sum(r.iou50 for r in sel) / len(sel),
                    "iou80": sum(r.iou80 for r in sel) / len(sel),
                    "labeled_count": sum(r.labeled_count for r in sel) / len(sel),
                }
            )
    return AblationReport(
        rows=rows, means=means, sizes=list(sizes), trials=trials, overall_reports=overall_reports
    )
