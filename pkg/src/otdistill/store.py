"""On-disk model repository: canonical JSON artifacts with content hashes.

Every artifact is written through the same canonical serializer (sorted
keys, 17-significant-digit floats), so saving the same object twice yields
byte-identical files and SHA-256 hashes are meaningful.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .models import (
    Architecture,
    ClassCenters,
    Classifier,
    LabeledDataset,
    LinearEmbedding,
    MLPEmbedding,
)
from .tasks import ClassPool

__all__ = [
    "StoreError",
    "SchemaVersionError",
    "HashMismatchError",
    "MalformedFileError",
    "DatasetFormatError",
    "ManifestEntry",
    "RepositoryManifest",
    "Repository",
    "canonical_dumps",
    "canonical_bytes",
    "sha256_hex",
    "save_model",
    "load_model",
    "read_model_record",
    "save_pool",
    "load_pool",
    "export_feature_csv",
    "ingest_feature_csv",
    "build_manifest",
    "save_manifest",
    "load_manifest",
    "verify_manifest",
]

MODEL_SCHEMA = "model/v1"
POOL_SCHEMA = "pool/v1"
MANIFEST_SCHEMA = "manifest/v1"
MANIFEST_NAME = "manifest.json"


class StoreError(Exception):
    """Base class for persistence failures."""


class SchemaVersionError(StoreError):
    """File declares a schema this reader does not understand."""


class HashMismatchError(StoreError):
    """File content does not match its recorded hash."""


class MalformedFileError(StoreError):
    """File is not valid JSON or is missing required fields."""


class DatasetFormatError(ValueError):
    """CSV dataset is ragged, non-numeric, or otherwise unusable."""


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    return format(x, ".17g")


def canonical_dumps(obj) -> str:
    """Deterministic JSON: sorted keys, compact separators, 17-digit floats."""
    if obj is None or obj is True or obj is False:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        return canonical_dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canonical_dumps(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted(obj.items())
        return "{" + ",".join(f"{json.dumps(str(k))}:{canonical_dumps(v)}" for k, v in items) + "}"
    raise TypeError(f"cannot canonically serialize {type(obj).__name__}")


def canonical_bytes(obj) -> bytes:
    return (canonical_dumps(obj) + "\n").encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_canonical(doc: dict, path: Path) -> None:
    Path(path).write_bytes(canonical_bytes(doc))


def _read_json(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedFileError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise MalformedFileError(f"{path}: expected a JSON object at top level")
    return doc


def _require(doc: dict, key: str, path) -> object:
    if key not in doc:
        raise MalformedFileError(f"{path}: missing required field {key!r}")
    return doc[key]


def _check_schema(doc: dict, expected: str, path) -> None:
    schema = _require(doc, "schema", path)
    if schema != expected:
        raise SchemaVersionError(f"{path}: schema {schema!r} not supported (expected {expected!r})")


def _matrix(doc_value, shape, path, what) -> np.ndarray:
    arr = np.asarray(doc_value, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise MalformedFileError(f"{path}: {what} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


# ---------------------------------------------------------------- models


def _centers_doc(centers: ClassCenters) -> dict:
    return {
        "centers": centers.centers,
        "label_set": list(centers.label_set),
        "provenance": centers.provenance,
    }


def _model_doc(classifier: Classifier, model_id: str, training: dict | None) -> dict:
    arch = classifier.architecture
    doc = {
        "schema": MODEL_SCHEMA,
        "model_id": model_id,
        "architecture": arch.descriptor(),
        "label_set": list(classifier.label_set),
        "head": classifier.head,
        "embedding": {k: v for k, v in classifier.embedding.parameters().items()},
    }
    if classifier.stored_centers is not None:
        doc["stored_centers"] = _centers_doc(classifier.stored_centers)
    if training is not None:
        doc["training"] = training
    return doc


def save_model(classifier: Classifier, path, model_id: str = "", training: dict | None = None) -> str:
    """Write a classifier as canonical JSON; returns the content hash."""
    data = canonical_bytes(_model_doc(classifier, model_id, training))
    Path(path).write_bytes(data)
    return sha256_hex(data)


@dataclass
class ModelRecord:
    classifier: Classifier
    model_id: str
    training: dict | None
    content_hash: str


def read_model_record(path) -> ModelRecord:
    """Load a model file, validating schema and dimensions before building."""
    path = Path(path)
    raw = path.read_bytes()
    doc = _read_json(path)
    _check_schema(doc, MODEL_SCHEMA, path)

    arch_doc = _require(doc, "architecture", path)
    try:
        architecture = Architecture(
            kind=arch_doc["kind"],
            input_dim=int(arch_doc["input_dim"]),
            embed_dim=int(arch_doc["embed_dim"]),
            hidden_dim=int(arch_doc["hidden_dim"]) if "hidden_dim" in arch_doc else None,
            nonlinearity=arch_doc.get("nonlinearity", "tanh"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{path}: bad architecture block ({exc})") from exc

    label_set = tuple(int(c) for c in _require(doc, "label_set", path))
    emb_doc = _require(doc, "embedding", path)
    D, d = architecture.input_dim, architecture.embed_dim
    if architecture.kind == "linear":
        embedding = LinearEmbedding(_matrix(_require(emb_doc, "weight", path), (D, d), path, "embedding.weight"))
    else:
        h = architecture.hidden_dim
        embedding = MLPEmbedding(
            w1=_matrix(_require(emb_doc, "w1", path), (D, h), path, "embedding.w1"),
            b1=_matrix(_require(emb_doc, "b1", path), (h,), path, "embedding.b1"),
            w2=_matrix(_require(emb_doc, "w2", path), (h, d), path, "embedding.w2"),
            b2=_matrix(_require(emb_doc, "b2", path), (d,), path, "embedding.b2"),
        )
    head = _matrix(_require(doc, "head", path), (d, len(label_set)), path, "head")

    stored_centers = None
    if "stored_centers" in doc:
        c_doc = doc["stored_centers"]
        c_labels = tuple(int(c) for c in _require(c_doc, "label_set", path))
        stored_centers = ClassCenters(
            centers=_matrix(_require(c_doc, "centers", path), (len(c_labels), d), path, "stored_centers"),
            label_set=c_labels,
            provenance=_require(c_doc, "provenance", path),
        )

    classifier = Classifier(
        architecture=architecture,
        embedding=embedding,
        head=head,
        label_set=label_set,
        stored_centers=stored_centers,
    )
    return ModelRecord(
        classifier=classifier,
        model_id=str(doc.get("model_id", "")),
        training=doc.get("training"),
        content_hash=sha256_hex(raw),
    )


def load_model(path) -> Classifier:
    return read_model_record(path).classifier


# ---------------------------------------------------------------- pools


def save_pool(pool: ClassPool, path) -> str:
    doc = {
        "schema": POOL_SCHEMA,
        "prototypes": pool.prototypes,
        "covariance_scale": pool.covariance_scale,
        "class_order": list(pool.class_order),
        "spread": pool.spread,
        "seed": pool.seed,
    }
    data = canonical_bytes(doc)
    Path(path).write_bytes(data)
    return sha256_hex(data)


def load_pool(path) -> ClassPool:
    path = Path(path)
    doc = _read_json(path)
    _check_schema(doc, POOL_SCHEMA, path)
    prototypes = np.asarray(_require(doc, "prototypes", path), dtype=np.float64)
    if prototypes.ndim != 2:
        raise MalformedFileError(f"{path}: prototypes must be a matrix")
    return ClassPool(
        prototypes=prototypes,
        covariance_scale=float(_require(doc, "covariance_scale", path)),
        class_order=tuple(int(c) for c in _require(doc, "class_order", path)),
        spread=float(_require(doc, "spread", path)),
        seed=int(_require(doc, "seed", path)),
    )


# ---------------------------------------------------------------- datasets


def export_feature_csv(data: LabeledDataset, path) -> None:
    """Write instances as f0..f{D-1} columns plus a label column of global ids."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(data.instances.shape[1])] + ["label"])
        for x, y in zip(data.instances, data.labels):
            writer.writerow([_format_float(v) for v in x] + [str(data.label_set[y])])


def ingest_feature_csv(path, label_column: str = "label") -> tuple[LabeledDataset, list[str]]:
    """Parse a rectangular numeric CSV with a header into a dataset.

    Label ids are assigned by first appearance order; the returned mapping
    lists the original label values in id order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: file is empty") from None
        if label_column not in header:
            raise DatasetFormatError(f"{path}: no column named {label_column!r} in header {header}")
        label_idx = header.index(label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]

        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(row[i]) for i in feature_idx])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {lineno} has a non-numeric feature ({exc})") from exc
            raw_labels.append(row[label_idx])

    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    mapping: list[str] = []
    seen: dict[str, int] = {}
    labels = np.empty(len(raw_labels), dtype=np.int64)
    for i, value in enumerate(raw_labels):
        if value not in seen:
            seen[value] = len(mapping)
            mapping.append(value)
        labels[i] = seen[value]
    data = LabeledDataset(np.asarray(rows), labels, tuple(range(len(mapping))))
    return data, mapping


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    teacher_id: str
    path: str  # relative to the repository directory
    label_set: tuple[int, ...]
    architecture: dict
    training: dict | None
    seed: int | None
    content_hash: str


@dataclass
class RepositoryManifest:
    version: str
    pool_path: str | None
    pool_hash: str | None
    entries: list[ManifestEntry] = field(default_factory=list)

    def entry(self, teacher_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.teacher_id == teacher_id:
                return e
        raise KeyError(f"no teacher {teacher_id!r} in manifest")

    @property
    def teacher_ids(self) -> list[str]:
        return [e.teacher_id for e in self.entries]


def _is_model_file(path: Path) -> bool:
    if path.name == MANIFEST_NAME or path.suffix != ".json":
        return False
    try:
        return json.loads(path.read_text(encoding="utf-8")).get("schema") == MODEL_SCHEMA
    except (json.JSONDecodeError, UnicodeDecodeError, AttributeError):
        return False


def build_manifest(directory, pool_path=None) -> RepositoryManifest:
    """Scan a directory of saved models into a manifest with content hashes."""
    directory = Path(directory)
    entries = []
    seen: set[str] = set()
    for path in sorted(directory.glob("*.json")):
        if not _is_model_file(path):
            continue
        record = read_model_record(path)
        teacher_id = record.model_id or path.stem
        if teacher_id in seen:
            raise StoreError(f"duplicate teacher id {teacher_id!r} in {directory}")
        seen.add(teacher_id)
        training = record.training or {}
        entries.append(
            ManifestEntry(
                teacher_id=teacher_id,
                path=path.name,
                label_set=record.classifier.label_set,
                architecture=record.classifier.architecture.descriptor(),
                training=record.training,
                seed=training.get("seed"),
                content_hash=record.content_hash,
            )
        )
    pool_hash = None
    if pool_path is not None:
        pool_hash = sha256_hex(Path(pool_path).read_bytes())
        pool_path = str(pool_path)
    return RepositoryManifest(version=MANIFEST_SCHEMA, pool_path=pool_path, pool_hash=pool_hash, entries=entries)


def _manifest_doc(manifest: RepositoryManifest) -> dict:
    return {
        "schema": manifest.version,
        "pool_path": manifest.pool_path,
        "pool_hash": manifest.pool_hash,
        "entries": [
            {
                "teacher_id": e.teacher_id,
                "path": e.path,
                "label_set": list(e.label_set),
                "architecture": e.architecture,
                "training": e.training,
                "seed": e.seed,
                "content_hash": e.content_hash,
            }
            for e in manifest.entries
        ],
    }


def save_manifest(manifest: RepositoryManifest, directory) -> Path:
    """Write the manifest under an advisory lock (single writer per repo)."""
    directory = Path(directory)
    target = directory / MANIFEST_NAME
    with FileLock(str(directory / ".repo.lock")):
        _write_canonical(_manifest_doc(manifest), target)
    return target


def load_manifest(directory) -> RepositoryManifest:
    path = Path(directory) / MANIFEST_NAME
    doc = _read_json(path)
    _check_schema(doc, MANIFEST_SCHEMA, path)
    entries = []
    for e in _require(doc, "entries", path):
        entries.append(
            ManifestEntry(
                teacher_id=str(e["teacher_id"]),
                path=str(e["path"]),
                label_set=tuple(int(c) for c in e["label_set"]),
                architecture=dict(e["architecture"]),
                training=e.get("training"),
                seed=e.get("seed"),
                content_hash=str(e["content_hash"]),
            )
        )
    return RepositoryManifest(
        version=doc["schema"],
        pool_path=doc.get("pool_path"),
        pool_hash=doc.get("pool_hash"),
        entries=entries,
    )


@dataclass
class VerificationResult:
    ok: list[str] = field(default_factory=list)
    drifted: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.drifted and not self.missing


def verify_manifest(directory) -> VerificationResult:
    """Recompute hashes of every referenced file and report drift."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    result = VerificationResult()
    for e in manifest.entries:
        path = directory / e.path
        if not path.exists():
            result.missing.append(e.teacher_id)
        elif sha256_hex(path.read_bytes()) != e.content_hash:
            result.drifted.append(e.teacher_id)
        else:
            result.ok.append(e.teacher_id)
    return result


class Repository:
    """Read handle over a repository directory; hash-checks models at load."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.manifest = load_manifest(self.directory)

    @property
    def teacher_ids(self) -> list[str]:
        return self.manifest.teacher_ids

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def load(self, teacher_id: str) -> Classifier:
        entry = self.manifest.entry(teacher_id)
        path = self.directory / entry.path
        if not path.exists():
            raise StoreError(f"manifest references missing file {path}")
        record = read_model_record(path)
        if record.content_hash != entry.content_hash:
            raise HashMismatchError(f"{path}: content hash does not match manifest entry")
        return record.classifier
