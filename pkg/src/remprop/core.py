"""Domain types, dataset manifest I/O, and the labeled/unlabeled node store.

No algorithmic logic lives here beyond vector norms and validation. All
embeddings are held in memory as read-only float64 arrays; the on-disk blob
format is float32, so values survive a write/read round trip bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateIndicator,
    DuplicateNodeId,
    InvalidConfig,
    InvalidEmbedding,
    ManifestError,
    MissingEmbedding,
)

BLOB_MAGIC = b"PGEM"
BLOB_VERSION = 1

ORIGIN_SEED_HUMAN = "seed_human"
ORIGIN_SEED_VIEW = "seed_view"
ORIGIN_REMINISCENCE = "reminiscence"
ORIGINS = (ORIGIN_SEED_HUMAN, ORIGIN_SEED_VIEW, ORIGIN_REMINISCENCE)

LABEL_FIXED = "fixed"
LABEL_PSEUDO = "pseudo"
LABEL_NONE = "none"

NOISE_CLEAN = "clean"
NOISE_AMBIGUOUS = "ambiguous"
NOISE_INVALID = "invalid"
NOISE_CLASSES = (NOISE_CLEAN, NOISE_AMBIGUOUS, NOISE_INVALID)


class EmbeddingVector:
    """Fixed-dimension dense real vector for one detected object crop."""

    __slots__ = ("values",)

    def __init__(self, values) -> None:
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidEmbedding(f"embedding must be a non-empty 1-D vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidEmbedding("embedding contains NaN or Inf")
        arr.flags.writeable = False
        self.values = arr

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"EmbeddingVector(dim={self.dim})"


def l2_norm(v: EmbeddingVector | np.ndarray) -> float:
    """Euclidean norm. A zero vector returns 0; rejection happens in cosine_similarity."""
    arr = v.values if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=np.float64)
    # einsum keeps the reduction bit-identical to the batched row kernel in the store.
    return float(np.sqrt(np.einsum("j,j->", arr, arr)))


@dataclass(frozen=True)
class Indicator:
    """User-chosen phrase naming one personal object."""

    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ManifestError("indicator id must be non-empty")
        if not self.text:
            raise ManifestError(f"indicator {self.id!r} has empty text")


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if min(self.x1, self.y1, self.x2, self.y2) < 0:
            raise ManifestError(f"box coordinates must be non-negative: {self}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ManifestError(f"box must satisfy x1 < x2 and y1 < y2: {self}")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class ObjectNode:
    """One detected object: embedding plus provenance and label state.

    Ground-truth annotations are *not* part of this type; they live behind
    EvaluationView so training paths cannot read them.
    """

    node_id: str
    embedding: EmbeddingVector
    scene_id: str
    box: BoundingBox
    origin: str
    label: str | None = None
    label_kind: str = LABEL_NONE

    def __post_init__(self) -> None:
        if self.origin not in ORIGINS:
            raise ManifestError(f"node {self.node_id}: unknown origin {self.origin!r}")
        if self.origin in (ORIGIN_SEED_HUMAN, ORIGIN_SEED_VIEW):
            if self.label is None or self.label_kind != LABEL_FIXED:
                raise ManifestError(f"node {self.node_id}: {self.origin} nodes must carry a fixed label")
        elif self.label_kind == LABEL_FIXED:
            raise ManifestError(f"node {self.node_id}: reminiscence nodes cannot have fixed labels")
        if (self.label is None) != (self.label_kind == LABEL_NONE):
            raise ManifestError(f"node {self.node_id}: label/label_kind disagree")


@dataclass(frozen=True)
class NodeAnnotation:
    """Evaluation-only ground truth for one node."""

    gt_label: str | None
    noise_class: str

    def __post_init__(self) -> None:
        if self.noise_class not in NOISE_CLASSES:
            raise ManifestError(f"unknown noise_class {self.noise_class!r}")


@dataclass(frozen=True)
class SceneBox:
    node_id: str
    box: BoundingBox
    embedding_offset: int


@dataclass(frozen=True)
class Scene:
    scene_id: str
    image_ref: str
    boxes: tuple[SceneBox, ...]


@dataclass(frozen=True)
class PersonalObject:
    indicator: Indicator
    seed_node_id: str
    view_node_ids: tuple[str, ...]


@dataclass(frozen=True)
class TestQuery:
    scene_id: str
    indicator_id: str
    gt_box: BoundingBox
    split: str


@dataclass
class DatasetManifest:
    """Scenes, boxes, embeddings, and held-out ground truth for one dataset.

    Scene roles are derived, never stored: scenes holding seed/view nodes are
    interaction scenes, scenes referenced by test queries are test scenes, and
    everything else is reminiscence.
    """

    dim: int
    embedding_blob_ref: str
    scenes: list[Scene]
    personal_objects: list[PersonalObject]
    test_queries: list[TestQuery]
    embeddings: np.ndarray
    annotations: dict[str, NodeAnnotation] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.dim <= 0:
            raise ManifestError(f"dim must be positive, got {self.dim}")
        emb = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != self.dim:
            raise ManifestError(f"embedding table must be (count, {self.dim}), got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ManifestError("embedding table contains NaN or Inf")
        self.embeddings = emb

        seen: set[str] = set()
        for scene in self.scenes:
            for sb in scene.boxes:
                if sb.node_id in seen:
                    raise DuplicateNodeId(f"duplicate node_id {sb.node_id!r}")
                seen.add(sb.node_id)
                if not (0 <= sb.embedding_offset < emb.shape[0]):
                    raise MissingEmbedding(
                        f"node {sb.node_id}: embedding_offset {sb.embedding_offset} "
                        f"outside blob of {emb.shape[0]} rows"
                    )

        indicator_ids: set[str] = set()
        for po in self.personal_objects:
            if po.indicator.id in indicator_ids:
                raise DuplicateIndicator(f"indicator {po.indicator.id!r} used by two personal objects")
            indicator_ids.add(po.indicator.id)
            for nid in (po.seed_node_id, *po.view_node_ids):
                if nid not in seen:
                    raise ManifestError(f"personal object {po.indicator.id}: unknown node {nid!r}")

        scene_ids = {s.scene_id for s in self.scenes}
        if len(scene_ids) != len(self.scenes):
            raise ManifestError("duplicate scene_id")
        for q in self.test_queries:
            if q.scene_id not in scene_ids:
                raise ManifestError(f"test query references unknown scene {q.scene_id!r}")
            if q.indicator_id not in indicator_ids:
                raise ManifestError(f"test query references unknown indicator {q.indicator_id!r}")

        interaction = self.interaction_node_ids()
        test_scenes = self.test_scene_ids()
        for scene in self.scenes:
            roles = set()
            for sb in scene.boxes:
                if sb.node_id in interaction:
                    roles.add("interaction")
                elif scene.scene_id in test_scenes:
                    roles.add("test")
                else:
                    roles.add("reminiscence")
            if len(roles) > 1:
                raise ManifestError(f"scene {scene.scene_id!r} mixes node roles {sorted(roles)}")

    def interaction_node_ids(self) -> dict[str, tuple[str, str]]:
        """node_id -> (indicator_id, origin) for every seed and view node."""
        out: dict[str, tuple[str, str]] = {}
        for po in self.personal_objects:
            out[po.seed_node_id] = (po.indicator.id, ORIGIN_SEED_HUMAN)
            for nid in po.view_node_ids:
                out[nid] = (po.indicator.id, ORIGIN_SEED_VIEW)
        return out

    def test_scene_ids(self) -> set[str]:
        return {q.scene_id for q in self.test_queries}

    def reminiscence_scenes(self) -> list[Scene]:
        """Raw-environment scenes: not interaction captures, not test scenes."""
        interaction = self.interaction_node_ids()
        test_scenes = self.test_scene_ids()
        out = []
        for scene in self.scenes:
            if scene.scene_id in test_scenes:
                continue
            if any(sb.node_id in interaction for sb in scene.boxes):
                continue
            out.append(scene)
        return out

    def embedding_for(self, offset: int) -> EmbeddingVector:
        return EmbeddingVector(self.embeddings[offset])

    def node_index(self) -> dict[str, SceneBox]:
        return {sb.node_id: sb for scene in self.scenes for sb in scene.boxes}

    def scene_by_id(self, scene_id: str) -> Scene:
        for scene in self.scenes:
            if scene.scene_id == scene_id:
                return scene
        raise ManifestError(f"unknown scene {scene_id!r}")


class EvaluationView:
    """Read access to ground-truth annotations, segregated from training paths."""

    def __init__(self, manifest: DatasetManifest) -> None:
        self._annotations = manifest.annotations

    def gt_label(self, node_id: str) -> str | None:
        ann = self._annotations.get(node_id)
        return ann.gt_label if ann else None

    def noise_class(self, node_id: str) -> str:
        ann = self._annotations.get(node_id)
        return ann.noise_class if ann else NOISE_CLEAN

    def annotated_node_ids(self) -> list[str]:
        return list(self._annotations)


# ---------------------------------------------------------------------------
# Manifest JSON serialization

_MANIFEST_KEYS = {"dim", "embedding_blob_ref", "scenes", "personal_objects", "test_queries"}
_SCENE_KEYS = {"scene_id", "image_ref", "boxes"}
_BOX_KEYS = {"node_id", "box", "embedding_offset", "gt_label", "noise_class"}
_PO_KEYS = {"indicator", "seed_node_id", "view_node_ids"}
_QUERY_KEYS = {"scene_id", "indicator_id", "gt_box", "split"}


def _check_keys(obj: dict, allowed: set[str], where: str, strict: bool, warnings: list[str]) -> None:
    unknown = set(obj) - allowed
    if not unknown:
        return
    msg = f"unknown keys {sorted(unknown)} in {where}"
    if strict:
        raise ManifestError(msg)
    warnings.append(msg)


def manifest_to_json(manifest: DatasetManifest) -> str:
    """Canonical UTF-8 JSON form: sorted keys, 2-space indent, trailing newline."""
    doc = {
        "dim": manifest.dim,
        "embedding_blob_ref": manifest.embedding_blob_ref,
        "scenes": [
            {
                "scene_id": s.scene_id,
                "image_ref": s.image_ref,
                "boxes": [
                    {
                        "node_id": sb.node_id,
                        "box": sb.box.as_list(),
                        "embedding_offset": sb.embedding_offset,
                        "gt_label": manifest.annotations[sb.node_id].gt_label
                        if sb.node_id in manifest.annotations
                        else None,
                        "noise_class": manifest.annotations[sb.node_id].noise_class
                        if sb.node_id in manifest.annotations
                        else NOISE_CLEAN,
                    }
                    for sb in s.boxes
                ],
            }
            for s in manifest.scenes
        ],
        "personal_objects": [
            {
                "indicator": {"id": po.indicator.id, "text": po.indicator.text},
                "seed_node_id": po.seed_node_id,
                "view_node_ids": list(po.view_node_ids),
            }
            for po in manifest.personal_objects
        ],
        "test_queries": [
            {
                "scene_id": q.scene_id,
                "indicator_id": q.indicator_id,
                "gt_box": q.gt_box.as_list(),
                "split": q.split,
            }
            for q in manifest.test_queries
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def manifest_from_json(
    text: str,
    embeddings: np.ndarray,
    *,
    strict: bool = True,
    warnings: list[str] | None = None,
) -> DatasetManifest:
    """Parse manifest JSON. Unknown keys raise in strict mode, else are collected."""
    warns: list[str] = [] if warnings is None else warnings
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be a JSON object")
    _check_keys(doc, _MANIFEST_KEYS, "manifest", strict, warns)

    try:
        dim = int(doc["dim"])
        blob_ref = str(doc["embedding_blob_ref"])
        scenes_raw = doc["scenes"]
        po_raw = doc["personal_objects"]
    except KeyError as exc:
        raise ManifestError(f"manifest missing required key {exc.args[0]!r}") from exc
    queries_raw = doc.get("test_queries", [])

    annotations: dict[str, NodeAnnotation] = {}
    scenes: list[Scene] = []
    for s in scenes_raw:
        _check_keys(s, _SCENE_KEYS, f"scene {s.get('scene_id')!r}", strict, warns)
        boxes = []
        for b in s["boxes"]:
            _check_keys(b, _BOX_KEYS, f"box {b.get('node_id')!r}", strict, warns)
            node_id = str(b["node_id"])
            boxes.append(
                SceneBox(
                    node_id=node_id,
                    box=BoundingBox(*[float(c) for c in b["box"]]),
                    embedding_offset=int(b["embedding_offset"]),
                )
            )
            gt = b.get("gt_label")
            noise = b.get("noise_class", NOISE_CLEAN)
            if gt is not None or noise != NOISE_CLEAN:
                annotations[node_id] = NodeAnnotation(gt_label=gt, noise_class=noise)
        scenes.append(Scene(scene_id=str(s["scene_id"]), image_ref=str(s["image_ref"]), boxes=tuple(boxes)))

    personal_objects = []
    for po in po_raw:
        _check_keys(po, _PO_KEYS, "personal_objects entry", strict, warns)
        ind = po["indicator"]
        personal_objects.append(
            PersonalObject(
                indicator=Indicator(id=str(ind["id"]), text=str(ind["text"])),
                seed_node_id=str(po["seed_node_id"]),
                view_node_ids=tuple(str(v) for v in po.get("view_node_ids", [])),
            )
        )

    test_queries = []
    for q in queries_raw:
        _check_keys(q, _QUERY_KEYS, "test_queries entry", strict, warns)
        test_queries.append(
            TestQuery(
                scene_id=str(q["scene_id"]),
                indicator_id=str(q["indicator_id"]),
                gt_box=BoundingBox(*[float(c) for c in q["gt_box"]]),
                split=str(q.get("split", "default")),
            )
        )

    return DatasetManifest(
        dim=dim,
        embedding_blob_ref=blob_ref,
        scenes=scenes,
        personal_objects=personal_objects,
        test_queries=test_queries,
        embeddings=embeddings,
        annotations=annotations,
    )


# ---------------------------------------------------------------------------
# Embedding blob (binary, little-endian, float32 rows)


def write_blob(path: Path, embeddings: np.ndarray) -> None:
    emb = np.ascontiguousarray(embeddings, dtype=np.float32)
    if emb.ndim != 2:
        raise ManifestError(f"blob expects a 2-D table, got shape {emb.shape}")
    count, dim = emb.shape
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<III", BLOB_VERSION, count, dim))
        fh.write(emb.tobytes(order="C"))


def read_blob(path: Path) -> np.ndarray:
    """Read an embedding blob; returns a float64 (count, dim) table."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ManifestError(f"blob {path} truncated: {len(raw)} bytes")
    if raw[:4] != BLOB_MAGIC:
        raise ManifestError(f"blob {path} has bad magic {raw[:4]!r}")
    version, count, dim = struct.unpack("<III", raw[4:16])
    if version != BLOB_VERSION:
        raise ManifestError(f"blob {path} has unsupported version {version}")
    expected = 16 + count * dim * 4
    if len(raw) != expected:
        raise ManifestError(f"blob {path}: expected {expected} bytes, found {len(raw)}")
    table = np.frombuffer(raw, dtype="<f4", offset=16).reshape(count, dim)
    return table.astype(np.float64)


def save_dataset(manifest: DatasetManifest, out_dir: Path) -> tuple[Path, Path]:
    """Write manifest.json plus the referenced embedding blob into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob_path = out_dir / manifest.embedding_blob_ref
    write_blob(blob_path, manifest.embeddings.astype(np.float32))
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(manifest_to_json(manifest), encoding="utf-8")
    return manifest_path, blob_path


def load_dataset(data_dir: Path, *, strict: bool = True, warnings: list[str] | None = None) -> DatasetManifest:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    text = manifest_path.read_text(encoding="utf-8")
    # Blob ref is read before full parsing so offsets can be validated against it.
    try:
        blob_ref = json.loads(text).get("embedding_blob_ref", "embeddings.bin")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    embeddings = read_blob(data_dir / blob_ref)
    return manifest_from_json(text, embeddings, strict=strict, warnings=warnings)


# ---------------------------------------------------------------------------
# Node store


class NodeStore:
    """The evolving labeled set and the unlabeled reminiscence pool.

    Embeddings are packed once into a contiguous float64 matrix with cached
    norms; label state is the only thing that mutates afterwards, and only
    through assign_label (the propagation module's contract).
    """

    def __init__(self, nodes: list[ObjectNode], indicators: list[Indicator]) -> None:
        ids = [ind.id for ind in indicators]
        if len(set(ids)) != len(ids):
            raise DuplicateIndicator("duplicate indicator id in store")
        self.indicators: dict[str, Indicator] = {ind.id: ind for ind in indicators}
        self._indicator_index: dict[str, int] = {ind.id: i for i, ind in enumerate(indicators)}

        self.nodes: list[ObjectNode] = list(nodes)
        seen: set[str] = set()
        dim: int | None = None
        for node in self.nodes:
            if node.node_id in seen:
                raise DuplicateNodeId(f"duplicate node_id {node.node_id!r} in store")
            seen.add(node.node_id)
            if dim is None:
                dim = node.embedding.dim
            elif node.embedding.dim != dim:
                raise DimensionMismatch(
                    f"node {node.node_id}: dim {node.embedding.dim} != {dim}"
                )
            if node.label is not None and node.label not in self.indicators:
                raise ManifestError(f"node {node.node_id}: label {node.label!r} not a known indicator")

        self.dim = dim if dim is not None else 0
        n = len(self.nodes)
        self._row: dict[str, int] = {node.node_id: i for i, node in enumerate(self.nodes)}
        self.matrix = np.empty((n, self.dim), dtype=np.float64)
        for i, node in enumerate(self.nodes):
            self.matrix[i] = node.embedding.values
        self.norms = np.sqrt(np.einsum("ij,ij->i", self.matrix, self.matrix)) if n else np.empty(0)

        # label_idx: indicator index per row, -1 when unlabeled.
        self.label_idx = np.full(n, -1, dtype=np.int64)
        self.fixed_mask = np.zeros(n, dtype=bool)
        self._labeled_rows: list[int] = []
        for i, node in enumerate(self.nodes):
            if node.label is not None:
                self.label_idx[i] = self._indicator_index[node.label]
                self._labeled_rows.append(i)
            if node.label_kind == LABEL_FIXED:
                self.fixed_mask[i] = True
        self.reminiscence_rows = np.array(
            [i for i, node in enumerate(self.nodes) if node.origin == ORIGIN_REMINISCENCE],
            dtype=np.int64,
        )

    # -- introspection ------------------------------------------------------

    @property
    def n_indicators(self) -> int:
        return len(self.indicators)

    def indicator_ids(self) -> list[str]:
        return list(self.indicators)

    def indicator_position(self, indicator_id: str) -> int:
        return self._indicator_index[indicator_id]

    def row_of(self, node_id: str) -> int:
        return self._row[node_id]

    def node(self, node_id: str) -> ObjectNode:
        return self.nodes[self._row[node_id]]

    def labeled_rows(self) -> list[int]:
        """Rows of the labeled set in insertion order: fixed nodes first, then pseudo-labeled in first-label order."""
        return list(self._labeled_rows)

    def labeled_count(self) -> int:
        return len(self._labeled_rows)

    def unlabeled_ids(self) -> list[str]:
        return [self.nodes[i].node_id for i in self.reminiscence_rows if self.label_idx[i] < 0]

    def label_of(self, node_id: str) -> str | None:
        return self.nodes[self._row[node_id]].label

    def labels_snapshot(self) -> np.ndarray:
        return self.label_idx.copy()

    def rows_for_indicator(self, indicator_id: str) -> list[int]:
        pos = self._indicator_index[indicator_id]
        return [r for r in self._labeled_rows if self.label_idx[r] == pos]

    # -- mutation (propagation contract) ------------------------------------

    def assign_label(self, row: int, indicator_id: str) -> None:
        """Pseudo-label one reminiscence node; a relabel replaces in place."""
        node = self.nodes[row]
        if self.fixed_mask[row]:
            raise InvalidConfig(f"node {node.node_id} has a fixed label; seeds are never reassigned")
        pos = self._indicator_index[indicator_id]
        if self.label_idx[row] < 0:
            self._labeled_rows.append(row)
        self.label_idx[row] = pos
        node.label = indicator_id
        node.label_kind = LABEL_PSEUDO

    def scaled(self, alpha: float) -> "NodeStore":
        """Copy of this store with every embedding multiplied by alpha (for invariance checks)."""
        nodes = [
            ObjectNode(
                node_id=n.node_id,
                embedding=EmbeddingVector(n.embedding.values * alpha),
                scene_id=n.scene_id,
                box=n.box,
                origin=n.origin,
                label=n.label if n.label_kind == LABEL_FIXED else None,
                label_kind=n.label_kind if n.label_kind == LABEL_FIXED else LABEL_NONE,
            )
            for n in self.nodes
        ]
        clone = NodeStore(nodes, list(self.indicators.values()))
        # Re-apply pseudo labels in first-label order so the labeled-set order survives.
        for row in self._labeled_rows:
            if not self.fixed_mask[row]:
                clone.assign_label(row, self.nodes[row].label)
        return clone
