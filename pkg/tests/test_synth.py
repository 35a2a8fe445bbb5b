import hashlib

import numpy as np
import pytest

from reinpool.errors import ConfigError, ShapeError
from reinpool.evaluator import compress_corpus, forward_retrieval_ndcg
from reinpool.pooling import pool
from reinpool.synth import SynthConfig, generate, load_dataset, oracle_eval, split, write_dataset


def digest_tree(path):
    return {p.relative_to(path).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def default_ds():
    return generate(SynthConfig())


def test_same_seed_same_bytes(tmp_path):
    cfg = SynthConfig(num_topics=3, docs_per_topic=4, vectors_per_doc=10, signal_count=2, dim=6,
                      train_per_topic=2, val_per_topic=1)
    write_dataset(generate(cfg), tmp_path / "a")
    write_dataset(generate(cfg), tmp_path / "b")
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")
    write_dataset(generate(SynthConfig(**{**cfg.__dict__, "seed": 43})), tmp_path / "c")
    assert digest_tree(tmp_path / "a") != digest_tree(tmp_path / "c")


def test_round_trip(tmp_path, default_ds):
    write_dataset(default_ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.config == default_ds.config
    assert back.corpus == default_ds.corpus and back.queries == default_ds.queries
    assert back.qrels.entries == default_ds.qrels.entries
    assert all((back.oracle_masks[k] == v).all() for k, v in default_ds.oracle_masks.items())


def test_shapes_and_norms(default_ds):
    cfg = default_ds.config
    assert len(default_ds.corpus) == cfg.num_topics * cfg.docs_per_topic
    assert len(default_ds.queries) == len(default_ds.corpus) * cfg.queries_per_doc
    for item in default_ds.corpus + default_ds.queries:
        np.testing.assert_allclose(np.linalg.norm(item.vectors, axis=1), 1.0, atol=1e-6)
    assert {d.split for d in default_ds.corpus} == {"train", "val", "test"}


def test_oracle_masks_mark_signal(default_ds):
    cfg = default_ds.config
    for doc in default_ds.corpus:
        mask = default_ds.oracle_masks[doc.doc_id]
        assert mask.sum() == cfg.signal_count and len(mask) == cfg.vectors_per_doc
        # planted rows cluster far more tightly than background rows
        sig = doc.vectors[mask == 1].astype(np.float64)
        bg = doc.vectors[mask == 0].astype(np.float64)
        assert (sig @ sig.T)[np.triu_indices(len(sig), 1)].mean() > 0.5
        assert (bg @ bg.T)[np.triu_indices(len(bg), 1)].mean() < 0.35


def test_qrels_only_own_queries(default_ds):
    by_query = default_ds.qrels.by_query()
    for q in default_ds.queries:
        assert by_query[q.doc_id] == {q.doc_id.rsplit("-", 1)[0]: 1}


def test_invalid_signal_count():
    with pytest.raises(ConfigError):
        generate(SynthConfig(vectors_per_doc=8, signal_count=8))
    with pytest.raises(ConfigError):
        SynthConfig(signal_count=0).validate()
    with pytest.raises(ConfigError):
        SynthConfig(background_noise=0.0).validate()
    with pytest.raises(ConfigError):
        SynthConfig(num_topics=1).validate()


def test_zero_noise_closed_form():
    cfg = SynthConfig(num_topics=4, docs_per_topic=3, vectors_per_doc=12, signal_count=3, dim=16,
                      signal_noise=0.0, query_noise=0.0, doc_spread=0.0, train_per_topic=1,
                      val_per_topic=1)
    ds = generate(cfg)
    pooled = {d.doc_id: pool(d.vectors, ds.oracle_masks[d.doc_id]) for d in ds.corpus}
    queries = {q.doc_id: q.vectors[0].astype(np.float64) for q in ds.queries}
    centroids = {d.doc_id[:3]: pooled[d.doc_id] for d in ds.corpus}
    for qid, q in queries.items():
        for did, v in pooled.items():
            expected = 1.0 if qid[:3] == did[:3] else float(centroids[qid[:3]] @ centroids[did[:3]])
            assert float(q @ v) == pytest.approx(expected, abs=1e-6)
    # topic-mates coincide exactly, so the id tie-break decides; the own doc is d00..d02
    assert oracle_eval(ds.corpus, ds.queries, ds.qrels, ds.oracle_masks) > 0.5


def test_zero_noise_single_doc_topics_reach_one():
    cfg = SynthConfig(num_topics=6, docs_per_topic=1, vectors_per_doc=12, signal_count=3, dim=16,
                      signal_noise=0.0, query_noise=0.0, train_per_topic=0, val_per_topic=0)
    ds = generate(cfg)
    assert oracle_eval(ds.corpus, ds.queries, ds.qrels, ds.oracle_masks) == 1.0


def test_full_mask_oracle_equals_static(default_ds):
    ones = {k: np.ones_like(v) for k, v in default_ds.oracle_masks.items()}
    full = oracle_eval(default_ds.corpus, default_ds.queries, default_ds.qrels, ones)
    static = forward_retrieval_ndcg(compress_corpus(default_ds.corpus), default_ds.queries, default_ds.qrels)
    assert full == static


def test_misaligned_mask(default_ds):
    masks = dict(default_ds.oracle_masks)
    masks[default_ds.corpus[0].doc_id] = np.ones(3, dtype=np.uint8)
    with pytest.raises(ShapeError):
        oracle_eval(default_ds.corpus, default_ds.queries, default_ds.qrels, masks)


def test_defaults_oracle_beats_static(default_ds):
    for name in ("test", "val"):
        corpus, queries = split(default_ds.corpus, name), split(default_ds.queries, name)
        oracle = oracle_eval(corpus, queries, default_ds.qrels, default_ds.oracle_masks)
        static = forward_retrieval_ndcg(compress_corpus(corpus), queries, default_ds.qrels)
        assert oracle >= 0.95
        assert oracle - static >= 0.05


def test_signal_fraction_sweep():
    # fewer planted rows dilute the static mean more; the oracle is unaffected
    gaps = []
    for ns in (2, 4, 8, 16):
        ds = generate(SynthConfig(signal_count=ns))
        corpus, queries = split(ds.corpus, "test"), split(ds.queries, "test")
        oracle = oracle_eval(corpus, queries, ds.qrels, ds.oracle_masks)
        static = forward_retrieval_ndcg(compress_corpus(corpus), queries, ds.qrels)
        gaps.append(oracle - static)
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[0] >= 0.5 and gaps[-1] < 0.05
