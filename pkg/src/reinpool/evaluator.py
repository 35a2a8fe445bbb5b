"""Retrieval evaluation of full multi-vector, static-pooled and ReinPool indices.

Produces a compact results table: NDCG@k per subset and on average,
embedding cost (mean vectors x dim) and compression ratio per method.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, StorageError
from .policy import PolicyParams, forward, greedy_mask, load_policy
from .pooling import PoolKind, pool, pool_all, pool_query
from .reward import ndcg_at_k, rank
from .store import SingleVectorIndex, embedding_cost, format_cost

logger = logging.getLogger(__name__)

DEFAULT_SUBSET = "all"


@dataclass(frozen=True)
class EvalMethod:
    """One evaluated configuration.

    ``family`` is ``full`` (pooled query against every document row),
    ``maxsim`` (every query row against every document row, summed),
    ``static`` (full-mask pooling) or ``reinpool`` (policy mask, then pooling).
    """

    family: str
    kind: PoolKind = PoolKind.MEAN
    checkpoint: str | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if self.family not in ("full", "maxsim", "static", "reinpool"):
            raise ConfigError(f"unknown method family {self.family!r}")
        object.__setattr__(self, "kind", PoolKind.parse(self.kind))
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.family == "reinpool" and self.checkpoint is None:
            raise ConfigError("reinpool method needs a checkpoint")

    @classmethod
    def parse(cls, name: str, checkpoint=None, threshold: float = 0.5) -> "EvalMethod":
        """Parse names like ``full-mean``, ``static-max``, ``reinpool-mean``, ``maxsim``."""
        if name == "maxsim":
            return cls("maxsim", PoolKind.MEAN)
        family, _, kind = name.partition("-")
        if family not in ("full", "static", "reinpool") or kind not in ("mean", "max"):
            raise ConfigError(f"unknown method {name!r}")
        ckpt = str(checkpoint) if checkpoint is not None else None
        return cls(family, PoolKind(kind), ckpt if family == "reinpool" else None, threshold)

    @property
    def name(self) -> str:
        return "maxsim" if self.family == "maxsim" else f"{self.family}-{self.kind.value}"

    @property
    def query_pooling(self) -> str:
        return "-" if self.family == "maxsim" else self.kind.value.capitalize()

    @property
    def corpus_pooling(self) -> str:
        if self.family in ("full", "maxsim"):
            return "-"
        if self.family == "static":
            return self.kind.value.capitalize()
        return f"ReinPool-{self.kind.value.capitalize()}"


@dataclass
class MethodResult:
    method: str
    query_pooling: str
    corpus_pooling: str
    mean_vectors: float
    dim: int
    subset_scores: dict[str, float]
    average: float
    compression_ratio: float
    num_queries: int
    excluded_queries: int = 0

    @property
    def cost(self) -> str:
        return format_cost(self.mean_vectors, self.dim)


@dataclass
class EvalReport:
    k: int
    subsets: list[str]
    results: list[MethodResult] = field(default_factory=list)

    def result(self, method: str) -> MethodResult:
        for r in self.results:
            if r.method == method:
                return r
        raise KeyError(method)


def _dot_rows_sequential(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Accumulate over dimensions in index order so each score equals a plain
    # left-to-right double loop bit for bit.
    acc = np.zeros(rows.shape[:-1] + q.shape[:-1], dtype=np.float64)
    for j in range(rows.shape[-1]):
        acc += np.multiply.outer(rows[..., j], q[..., j])
    return acc


def score_full_multivector(pooled_query, doc) -> float:
    """``max_i q . v_i`` over the document rows."""
    rows = np.asarray(getattr(doc, "vectors", doc), dtype=np.float64)
    q = np.asarray(pooled_query, dtype=np.float64)
    if q.shape != (rows.shape[1],):
        raise ShapeError(f"query dim {q.shape} != document dim {rows.shape[1]}")
    return float(_dot_rows_sequential(rows, q).max())


def score_maxsim(query_rows, doc) -> float:
    """Multi-token late interaction: sum over query rows of max over doc rows."""
    rows = np.asarray(getattr(doc, "vectors", doc), dtype=np.float64)
    q = np.asarray(getattr(query_rows, "vectors", query_rows), dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != rows.shape[1]:
        raise ShapeError(f"query shape {q.shape} incompatible with document dim {rows.shape[1]}")
    return float(_dot_rows_sequential(rows, q).max(axis=0).sum())


def compress_doc(vectors, kind: PoolKind, params: PolicyParams | None = None,
                 threshold: float = 0.5) -> np.ndarray:
    if params is None:
        return pool_all(vectors, kind)
    return pool(vectors, greedy_mask(forward(params, vectors), threshold), kind)


def compress_corpus(docs, method: EvalMethod | None = None, params: PolicyParams | None = None,
                    kind=PoolKind.MEAN, threshold: float = 0.5) -> SingleVectorIndex:
    """Compress every document to one vector, keeping corpus order.

    Either pass an ``EvalMethod`` (static or reinpool) or give ``params``
    directly; ``params=None`` without a method means static pooling.
    """
    if method is not None:
        if method.family in ("full", "maxsim"):
            raise ConfigError(f"{method.name} does not produce a compressed index")
        kind, threshold = method.kind, method.threshold
        params = load_policy(method.checkpoint) if method.family == "reinpool" else None
    kind = PoolKind.parse(kind)
    if params is not None and docs and params.dim != docs[0].dim:
        raise ConfigError(f"policy dim {params.dim} does not match corpus dim {docs[0].dim}")
    rows = [compress_doc(d.vectors, kind, params, threshold) for d in docs]
    return SingleVectorIndex([d.doc_id for d in docs], np.vstack(rows))


def _rank_and_score(doc_ids, scores, relevant, k) -> float:
    return ndcg_at_k(rank(doc_ids, scores), relevant, k)


def forward_retrieval_ndcg(index: SingleVectorIndex, queries, qrels, kind=PoolKind.MEAN,
                           k: int = 3) -> float:
    """Mean NDCG@k of pooled queries retrieving from a single-vector index.

    Queries without judgments are skipped.
    """
    by_query = qrels.by_query()
    kept = [q for q in queries if by_query.get(q.doc_id)]
    if not kept:
        raise ConfigError("no judged queries to evaluate")
    Q = np.vstack([pool_query(q, kind) for q in kept])
    S = Q @ index.vectors.astype(np.float64).T
    return float(np.mean([_rank_and_score(index.ids, S[i], by_query[q.doc_id], k)
                          for i, q in enumerate(kept)]))


def _score_matrix(method: EvalMethod, docs, queries) -> tuple[np.ndarray, float]:
    """Return (num_queries x num_docs scores, mean stored vectors per doc)."""
    if method.family in ("static", "reinpool"):
        index = compress_corpus(docs, method)
        Q = np.vstack([pool_query(q, method.kind) for q in queries])
        return Q @ index.vectors.astype(np.float64).T, 1.0
    mean_vectors, _ = embedding_cost(docs)
    S = np.empty((len(queries), len(docs)))
    if method.family == "full":
        Q = np.vstack([pool_query(q, method.kind) for q in queries])
        for j, doc in enumerate(docs):
            S[:, j] = _dot_rows_sequential(doc.vectors.astype(np.float64), Q).max(axis=0)
    else:
        for i, q in enumerate(queries):
            for j, doc in enumerate(docs):
                S[i, j] = score_maxsim(q.vectors, doc.vectors)
    return S, mean_vectors


def evaluate(methods, corpus, queries, qrels, k: int = 3) -> EvalReport:
    if not methods:
        raise ConfigError("no evaluation methods given")
    if not corpus:
        raise ConfigError("empty corpus")
    by_query = qrels.by_query()
    doc_ids = [d.doc_id for d in corpus]
    known = set(doc_ids)
    judged, excluded = [], 0
    for q in queries:
        rel = by_query.get(q.doc_id)
        if not rel:
            excluded += 1
            continue
        missing = [d for d in rel if d not in known]
        if missing:
            raise ConfigError(f"query {q.doc_id} judges documents not in the corpus: {missing[:3]}")
        judged.append(q)
    if not judged:
        raise ConfigError("no query has relevance judgments")
    if excluded:
        logger.warning("%d queries without judgments excluded", excluded)

    subsets = sorted({q.subset or DEFAULT_SUBSET for q in judged})
    mean_vectors, dim = embedding_cost(corpus)
    report = EvalReport(k=k, subsets=subsets)
    for method in methods:
        S, stored = _score_matrix(method, corpus, judged)
        per_query = [_rank_and_score(doc_ids, S[i], by_query[q.doc_id], k) for i, q in enumerate(judged)]
        subset_scores = {}
        for name in subsets:
            vals = [v for v, q in zip(per_query, judged) if (q.subset or DEFAULT_SUBSET) == name]
            subset_scores[name] = float(np.mean(vals))
        report.results.append(MethodResult(
            method=method.name,
            query_pooling=method.query_pooling,
            corpus_pooling=method.corpus_pooling,
            mean_vectors=stored,
            dim=dim,
            subset_scores=subset_scores,
            average=float(np.mean(list(subset_scores.values()))),
            compression_ratio=mean_vectors / stored,
            num_queries=len(judged),
            excluded_queries=excluded,
        ))
        logger.info("%s: NDCG@%d = %.4f", method.name, k, report.results[-1].average)
    return report


def _fmt_ratio(x: float) -> str:
    return f"{x:.0f}x" if float(x).is_integer() else f"{x:.1f}x"


def report_to_text(report: EvalReport) -> str:
    header = ["Method", "Query Pooling", "Corpus Pooling", "Cost", "Ratio"] \
        + [s.upper() for s in report.subsets] + ["AVG"]
    rows = [header]
    for r in report.results:
        rows.append([r.method, r.query_pooling, r.corpus_pooling, r.cost,
                     _fmt_ratio(r.compression_ratio)]
                    + [f"{100 * r.subset_scores[s]:.2f}" for s in report.subsets]
                    + [f"{100 * r.average:.2f}"])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [f"NDCG@{report.k} (x100)"]
    for n, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i < 3 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


_CSV_FIXED = ["method", "query_pooling", "corpus_pooling", "mean_vectors", "dim",
              "compression_ratio", "num_queries", "excluded_queries"]


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_CSV_FIXED + [f"ndcg@{report.k}:{s}" for s in report.subsets] + [f"ndcg@{report.k}:avg"])
    for r in report.results:
        w.writerow([r.method, r.query_pooling, r.corpus_pooling, repr(r.mean_vectors), r.dim,
                    repr(r.compression_ratio), r.num_queries, r.excluded_queries]
                   + [repr(r.subset_scores[s]) for s in report.subsets] + [repr(r.average)])
    return buf.getvalue()


def report_from_csv(text: str) -> EvalReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    k = int(header[len(_CSV_FIXED)].split(":")[0].split("@")[1])
    subsets = [h.split(":", 1)[1] for h in header[len(_CSV_FIXED):-1]]
    report = EvalReport(k=k, subsets=subsets)
    for row in reader:
        scores = [float(x) for x in row[len(_CSV_FIXED):]]
        report.results.append(MethodResult(
            method=row[0], query_pooling=row[1], corpus_pooling=row[2],
            mean_vectors=float(row[3]), dim=int(row[4]),
            subset_scores=dict(zip(subsets, scores[:-1])), average=scores[-1],
            compression_ratio=float(row[5]), num_queries=int(row[6]), excluded_queries=int(row[7]),
        ))
    return report


def report_to_json(report: EvalReport) -> str:
    return json.dumps(asdict(report), indent=1, sort_keys=True) + "\n"


def emit_report(report: EvalReport, path, fmt: str = "text") -> Path:
    """Serialize ``report`` to ``path`` as ``text``, ``csv`` or ``json``."""
    if not report.results:
        raise ConfigError("report has no methods")
    writers = {"text": report_to_text, "csv": report_to_csv, "json": report_to_json}
    if fmt not in writers:
        raise ConfigError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(writers[fmt](report), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write report {path}: {exc}") from exc
    return path
