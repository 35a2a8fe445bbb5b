"""On-disk and in-memory model for pre-computed multi-vector embeddings.

A collection directory holds two files:

``manifest.json``
    ``{"dim": int, "docs": [{"id": str, "num_vectors": int, "offset_floats": int}, ...]}``
    with optional ``"subset"`` and ``"split"`` tags per entry.
``vectors.bin``
    every entry's rows concatenated in manifest order, row-major,
    little-endian float32, no header.

Query collections and compressed single-vector indices use the same layout
(an index is a collection where every entry has exactly one vector).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    CorruptStoreError,
    DimensionMismatchError,
    DuplicateEntryError,
    EmptyInputError,
    ParseError,
    ShapeError,
    StorageError,
    ValidationError,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
VECTORS = "vectors.bin"
_DTYPE = np.dtype("<f4")


@dataclass(eq=False)
class MultiVectorDoc:
    doc_id: str
    vectors: np.ndarray
    subset: str | None = None
    split: str | None = None

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise ShapeError(f"{self.doc_id}: expected a non-empty 2-D matrix, got shape {vectors.shape}")
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if not np.isfinite(vectors).all():
            raise ValidationError(f"{self.doc_id}: non-finite embedding value")
        self.vectors = vectors

    @property
    def id(self) -> str:
        return self.doc_id

    @property
    def num_vectors(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.doc_id == other.doc_id
            and self.subset == other.subset
            and self.split == other.split
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


@dataclass(eq=False)
class MultiVectorQuery(MultiVectorDoc):
    """A query embedding; single-vector queries are the one-row case."""

    @property
    def query_id(self) -> str:
        return self.doc_id


@dataclass
class Qrels:
    """Graded relevance judgments keyed by ``(query_id, doc_id)``."""

    entries: dict[tuple[str, str], int] = field(default_factory=dict)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise ValidationError(f"negative grade {grade} for ({query_id}, {doc_id})")
        key = (query_id, doc_id)
        if key in self.entries:
            raise DuplicateEntryError(f"duplicate qrels entry ({query_id}, {doc_id})")
        self.entries[key] = int(grade)

    def __len__(self):
        return len(self.entries)

    def for_query(self, query_id: str) -> dict[str, int]:
        return {d: g for (q, d), g in self.entries.items() if q == query_id}

    def by_query(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (q, d), g in self.entries.items():
            out.setdefault(q, {})[d] = g
        return out

    def by_doc(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (q, d), g in self.entries.items():
            out.setdefault(d, {})[q] = g
        return out


@dataclass(eq=False)
class SingleVectorIndex:
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = list(self.ids)
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.ids):
            raise ShapeError(f"index has {len(self.ids)} ids but vectors of shape {vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateEntryError("index ids must be unique")
        if not np.isfinite(vectors).all():
            raise ValidationError("non-finite value in index")
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, SingleVectorIndex):
            return NotImplemented
        return self.ids == other.ids and self.vectors.tobytes() == other.vectors.tobytes() \
            and self.vectors.shape == other.vectors.shape


def _check_dims(items) -> int:
    if not items:
        raise EmptyInputError("collection is empty")
    dims = {item.dim for item in items}
    if len(dims) != 1:
        raise DimensionMismatchError(f"mixed dimensions in one collection: {sorted(dims)}")
    return dims.pop()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_collection(docs: list[MultiVectorDoc], path) -> None:
    """Write ``docs`` to the directory ``path`` (created if missing)."""
    dim = _check_dims(docs)
    path = Path(path)
    entries = []
    offset = 0
    for doc in docs:
        entry = {"id": doc.doc_id, "num_vectors": doc.num_vectors, "offset_floats": offset}
        if doc.subset is not None:
            entry["subset"] = doc.subset
        if doc.split is not None:
            entry["split"] = doc.split
        entries.append(entry)
        offset += doc.num_vectors * dim
    payload = b"".join(doc.vectors.astype(_DTYPE, copy=False).tobytes() for doc in docs)
    manifest = json.dumps({"dim": dim, "docs": entries}, indent=1) + "\n"
    try:
        path.mkdir(parents=True, exist_ok=True)
        _atomic_write(path / VECTORS, payload)
        _atomic_write(path / MANIFEST, manifest.encode("utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot write collection to {path}: {exc}") from exc


def _read_manifest(path: Path) -> dict:
    try:
        with open(path / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise StorageError(f"missing {MANIFEST} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptStoreError(f"unreadable manifest in {path}: {exc}") from exc
    if not isinstance(manifest, dict) or "dim" not in manifest or "docs" not in manifest:
        raise CorruptStoreError(f"manifest in {path} lacks 'dim' or 'docs'")
    return manifest


def load_collection(path, cls=MultiVectorDoc) -> list:
    """Load a collection directory; returns entries in manifest order."""
    path = Path(path)
    manifest = _read_manifest(path)
    dim = int(manifest["dim"])
    if dim < 1:
        raise CorruptStoreError(f"invalid dim {dim}")
    try:
        raw = (path / VECTORS).read_bytes()
    except FileNotFoundError as exc:
        raise StorageError(f"missing {VECTORS} in {path}") from exc

    total = sum(int(e["num_vectors"]) for e in manifest["docs"]) * dim
    if len(raw) != 4 * total:
        raise CorruptStoreError(
            f"{path / VECTORS}: expected {4 * total} bytes from manifest, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=_DTYPE)
    out = []
    expected_offset = 0
    for entry in manifest["docs"]:
        n = int(entry["num_vectors"])
        offset = int(entry["offset_floats"])
        if offset != expected_offset or n < 1:
            raise CorruptStoreError(f"entry {entry['id']!r}: inconsistent offset or count")
        rows = flat[offset:offset + n * dim].reshape(n, dim).astype(np.float32)
        if not np.isfinite(rows).all():
            raise ValidationError(f"entry {entry['id']!r}: non-finite value")
        out.append(cls(entry["id"], rows, entry.get("subset"), entry.get("split")))
        expected_offset += n * dim
    return out


def load_queries(path) -> list[MultiVectorQuery]:
    return load_collection(path, cls=MultiVectorQuery)


def save_index(index: SingleVectorIndex, path) -> None:
    save_collection([MultiVectorDoc(i, v[None, :]) for i, v in zip(index.ids, index.vectors)], path)


def load_index(path) -> SingleVectorIndex:
    docs = load_collection(path)
    if any(d.num_vectors != 1 for d in docs):
        raise CorruptStoreError(f"{path} is not a single-vector index")
    return SingleVectorIndex([d.doc_id for d in docs], np.vstack([d.vectors for d in docs]))


def load_qrels(path) -> Qrels:
    """Parse a ``query_id<TAB>doc_id<TAB>grade`` file."""
    qrels = Qrels()
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError as exc:
        raise StorageError(f"qrels file not found: {path}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[0] or not parts[1]:
            raise ParseError(f"expected 3 tab-separated fields, got {line!r}", lineno)
        try:
            grade = int(parts[2])
        except ValueError:
            raise ParseError(f"grade is not an integer: {parts[2]!r}", lineno) from None
        if grade < 0:
            raise ValidationError(f"line {lineno}: negative grade {grade}")
        try:
            qrels.add(parts[0], parts[1], grade)
        except DuplicateEntryError as exc:
            raise DuplicateEntryError(f"line {lineno}: {exc}") from None
    return qrels


def save_qrels(qrels: Qrels, path) -> None:
    lines = [f"{q}\t{d}\t{g}\n" for (q, d), g in qrels.entries.items()]
    try:
        _atomic_write(Path(path), "".join(lines).encode("utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot write qrels to {path}: {exc}") from exc


def embedding_cost(docs: Iterable[MultiVectorDoc]) -> tuple[float, int]:
    """Mean vectors per document and the shared dimension."""
    docs = list(docs)
    dim = _check_dims(docs)
    return float(np.mean([d.num_vectors for d in docs])), dim


def compression_ratio(docs) -> float:
    mean_vectors, _ = embedding_cost(docs)
    return mean_vectors / 1.0


def format_cost(mean_vectors: float, dim: int) -> str:
    n = f"{mean_vectors:.0f}" if float(mean_vectors).is_integer() else f"{mean_vectors:.1f}"
    return f"{n} x {dim}"
