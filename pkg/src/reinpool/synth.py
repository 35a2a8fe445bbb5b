"""Planted-signal corpora with known oracle masks.

Each topic has a unit centroid. Each document draws its own centroid near
the topic centroid, so topic-mates are hard negatives that can only be told
apart by the document-specific direction. A document holds ``signal_count``
rows clustered around its centroid, mixed with background rows that dilute
static pooling. Background rows are mostly isotropic noise plus a weak
corpus-wide "generic content" direction (``background_bias``), the kind of
shared filler a learned filter can recognise across documents. Every query
row is clustered around its document's centroid. All emitted vectors are
unit-norm.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptStoreError, ShapeError, StorageError
from .pooling import PoolKind, pool
from .rng import stream
from .store import (
    MultiVectorDoc,
    MultiVectorQuery,
    Qrels,
    load_collection,
    load_qrels,
    load_queries,
    save_collection,
    save_qrels,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthConfig:
    num_topics: int = 16
    docs_per_topic: int = 12
    vectors_per_doc: int = 64
    signal_count: int = 4
    dim: int = 32
    signal_noise: float = 0.1
    background_noise: float = 1.0
    queries_per_doc: int = 4
    query_tokens: int = 1
    query_noise: float = 0.1
    doc_spread: float = 0.15
    # weight of a corpus-wide direction shared by all background rows
    background_bias: float = 3.0
    # per-topic document counts for train / val / test; the remainder goes to test
    train_per_topic: int = 6
    val_per_topic: int = 3
    seed: int = 42

    def validate(self) -> None:
        if self.num_topics < 2:
            raise ConfigError("num_topics must be >= 2")
        if self.docs_per_topic < 1 or self.queries_per_doc < 1 or self.query_tokens < 1:
            raise ConfigError("docs_per_topic, queries_per_doc and query_tokens must be >= 1")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if not 1 <= self.signal_count < self.vectors_per_doc:
            raise ConfigError(
                f"signal_count must satisfy 1 <= n_s < N (got n_s={self.signal_count}, "
                f"N={self.vectors_per_doc})"
            )
        if self.background_noise <= 0:
            raise ConfigError("background_noise must be > 0")
        if min(self.signal_noise, self.query_noise, self.doc_spread, self.background_bias) < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.train_per_topic < 0 or self.val_per_topic < 0 \
                or self.train_per_topic + self.val_per_topic > self.docs_per_topic:
            raise ConfigError("train_per_topic + val_per_topic exceeds docs_per_topic")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SynthDataset:
    config: SynthConfig
    corpus: list[MultiVectorDoc]
    queries: list[MultiVectorQuery]
    qrels: Qrels
    oracle_masks: dict[str, np.ndarray]


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _split_of(j: int, cfg: SynthConfig) -> str:
    if j < cfg.train_per_topic:
        return "train"
    if j < cfg.train_per_topic + cfg.val_per_topic:
        return "val"
    return "test"


def generate(cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    cfg.validate()
    d, n, ns = cfg.dim, cfg.vectors_per_doc, cfg.signal_count
    centroids = _unit(stream(cfg.seed, "centroids").standard_normal((cfg.num_topics, d)))
    generic = _unit(stream(cfg.seed, "background").standard_normal(d))

    corpus, queries, masks = [], [], {}
    qrels = Qrels()
    for t in range(cfg.num_topics):
        for j in range(cfg.docs_per_topic):
            ordinal = t * cfg.docs_per_topic + j
            rng = stream(cfg.seed, "doc", ordinal)
            center = _unit(centroids[t] + cfg.doc_spread * rng.standard_normal(d))
            signal = _unit(center + cfg.signal_noise * rng.standard_normal((ns, d)))
            background = _unit(cfg.background_bias * generic
                               + cfg.background_noise * rng.standard_normal((n - ns, d)))
            perm = rng.permutation(n)
            rows = np.vstack([signal, background])[perm]
            is_signal = (perm < ns).astype(np.uint8)

            doc_id = f"t{t:02d}-d{j:02d}"
            split = _split_of(j, cfg)
            corpus.append(MultiVectorDoc(doc_id, rows.astype(np.float32), split=split))
            masks[doc_id] = is_signal

            qrng = stream(cfg.seed, "queries", ordinal)
            for k in range(cfg.queries_per_doc):
                q = _unit(center + cfg.query_noise * qrng.standard_normal((cfg.query_tokens, d)))
                query_id = f"{doc_id}-q{k}"
                queries.append(MultiVectorQuery(query_id, q.astype(np.float32), split=split))
                qrels.add(query_id, doc_id, 1)
    return SynthDataset(cfg, corpus, queries, qrels, masks)


def write_dataset(ds: SynthDataset, path) -> None:
    """Write corpus/, queries/, qrels.tsv, oracle_masks.json and synth_config.json."""
    path = Path(path)
    save_collection(ds.corpus, path / "corpus")
    save_collection(ds.queries, path / "queries")
    save_qrels(ds.qrels, path / "qrels.tsv")
    masks = {k: [int(b) for b in v] for k, v in ds.oracle_masks.items()}
    try:
        (path / "oracle_masks.json").write_text(json.dumps(masks) + "\n", encoding="utf-8")
        (path / "synth_config.json").write_text(
            json.dumps(asdict(ds.config), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {path}: {exc}") from exc


def load_oracle_masks(path) -> dict[str, np.ndarray]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StorageError(f"oracle masks not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptStoreError(f"unreadable oracle masks {path}") from exc
    return {k: np.asarray(v, dtype=np.uint8) for k, v in raw.items()}


def load_dataset(path) -> SynthDataset:
    path = Path(path)
    cfg_file = path / "synth_config.json"
    cfg = SynthConfig.from_dict(json.loads(cfg_file.read_text())) if cfg_file.exists() else None
    masks_file = path / "oracle_masks.json"
    return SynthDataset(
        cfg,
        load_collection(path / "corpus"),
        load_queries(path / "queries"),
        load_qrels(path / "qrels.tsv"),
        load_oracle_masks(masks_file) if masks_file.exists() else {},
    )


def oracle_eval(corpus, queries, qrels, oracle_masks, kind=PoolKind.MEAN, k: int = 3) -> float:
    """Forward-retrieval NDCG@k with each document pooled under its oracle mask."""
    from .evaluator import forward_retrieval_ndcg
    from .store import SingleVectorIndex

    rows = []
    for doc in corpus:
        mask = oracle_masks.get(doc.doc_id)
        if mask is None or len(mask) != doc.num_vectors:
            raise ShapeError(f"oracle mask missing or misaligned for {doc.doc_id}")
        rows.append(pool(doc.vectors, mask, kind))
    index = SingleVectorIndex([d.doc_id for d in corpus], np.vstack(rows))
    return forward_retrieval_ndcg(index, queries, qrels, kind, k)


def split(items, name: str) -> list:
    return [item for item in items if item.split == name]
