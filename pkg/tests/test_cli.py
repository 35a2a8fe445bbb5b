import hashlib
import json

import numpy as np
import pytest

from reinpool.cli import main
from reinpool.policy import PolicyParams, save_policy
from reinpool.store import load_collection, load_index

GEN = ["--num-topics", "4", "--docs-per-topic", "5", "--vectors-per-doc", "16", "--signal-count", "3",
       "--dim", "8", "--train-per-topic", "2", "--val-per-topic", "1"]
TRAIN = ["--steps", "4", "--group-size", "4", "--batch-docs", "3", "--heads", "2", "--val-every", "2",
         "--no-figures"]


def tree(path):
    return {p.relative_to(path).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen", "--out", str(out), *GEN]) == 0
    return out


def test_gen_writes_dataset(data):
    names = set(tree(data))
    assert {"corpus/manifest.json", "corpus/vectors.bin", "queries/manifest.json", "qrels.tsv",
            "oracle_masks.json", "synth_config.json"} <= names


def test_gen_is_deterministic(data, tmp_path):
    assert main(["gen", "--out", str(tmp_path / "again"), *GEN]) == 0
    assert tree(tmp_path / "again") == tree(data)


def test_gen_rejects_bad_signal_count(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "x"), "--vectors-per-doc", "8", "--signal-count", "8"]) == 1
    assert not (tmp_path / "x").exists()


def test_gen_config_file(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("synth:\n  num_topics: 2\n  docs_per_topic: 3\n  vectors_per_doc: 6\n"
                   "  signal_count: 2\n  dim: 4\n  train_per_topic: 1\n  val_per_topic: 1\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d"), "--dim", "6"]) == 0
    manifest = json.loads((tmp_path / "d" / "corpus" / "manifest.json").read_text())
    assert manifest["dim"] == 6 and len(manifest["docs"]) == 6
    cfg.write_text("synth:\n  bogus: 1\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 1


def test_unknown_flag_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--no-such-flag"])
    assert exc.value.code == 1


def test_train_and_resume(data, tmp_path, capsys):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "a"), *TRAIN]) == 0
    assert "final validation NDCG@3" in capsys.readouterr().out
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "b"), *TRAIN]) == 0
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "b"), "--resume", *TRAIN]) == 0
    for name in ("metrics.csv", "checkpoint/policy.bin", "checkpoint/optimizer.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,loss,mean_reward,kept_fraction,grad_norm,lr,val_ndcg3"


def test_train_writes_figure(data, tmp_path):
    args = [a for a in TRAIN if a != "--no-figures"]
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), *args]) == 0
    assert (tmp_path / "r" / "training.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_missing_qrels(data, tmp_path):
    code = main(["train", "--corpus", str(data / "corpus"), "--queries", str(data / "queries"),
                 "--qrels", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "r"), *TRAIN])
    assert code == 3


def test_train_bad_heads(data, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), *TRAIN, "--heads", "3"]) == 1


def test_compress_static_and_zero_weight(data, tmp_path):
    assert main(["compress", "--corpus", str(data / "corpus"), "--out", str(tmp_path / "static")]) == 0
    save_policy(PolicyParams.zeros(8, 2), tmp_path / "zero")
    assert main(["compress", "--corpus", str(data / "corpus"), "--checkpoint", str(tmp_path / "zero"),
                 "--out", str(tmp_path / "learned")]) == 0
    n = len(load_collection(data / "corpus"))
    assert (tmp_path / "static" / "vectors.bin").stat().st_size == n * 8 * 4
    a, b = load_index(tmp_path / "static"), load_index(tmp_path / "learned")
    assert a.vectors.tobytes() == b.vectors.tobytes() and a.ids == b.ids


def test_compress_dim_mismatch(data, tmp_path):
    save_policy(PolicyParams.zeros(16, 2), tmp_path / "wide")
    assert main(["compress", "--corpus", str(data / "corpus"), "--checkpoint", str(tmp_path / "wide"),
                 "--out", str(tmp_path / "x")]) == 1


def test_eval_report(data, tmp_path, capsys):
    save_policy(PolicyParams.zeros(8, 2), tmp_path / "zero")
    args = ["eval", "--data", str(data), "--checkpoint", str(tmp_path / "zero"),
            "--method", "full-mean", "--method", "static-mean", "--method", "static-max",
            "--method", "reinpool-mean", "--method", "reinpool-max"]
    assert main([*args, "--out", str(tmp_path / "r1")]) == 0
    text = capsys.readouterr().out
    for row in ("full-mean", "static-mean", "static-max", "reinpool-mean", "reinpool-max"):
        assert row in text
    assert main([*args, "--out", str(tmp_path / "r2")]) == 0
    assert tree(tmp_path / "r1") == tree(tmp_path / "r2")
    assert {"report.txt", "report.csv", "report.json", "report.png"} == set(tree(tmp_path / "r1"))
    rows = (tmp_path / "r1" / "report.csv").read_text().splitlines()
    static, learned = rows[2].split(",")[3:], rows[4].split(",")[3:]
    assert static == learned


def test_eval_unknown_method(data, tmp_path):
    assert main(["eval", "--data", str(data), "--method", "median-pool", "--out", str(tmp_path / "r")]) == 1


def test_eval_missing_data(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "r")]) == 1


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--corrupt"]) == 2
    assert main(["gradcheck", "--dim", "9", "--heads", "2"]) == 1


def test_eval_excludes_unjudged_queries(data, tmp_path, caplog):
    qrels = (data / "qrels.tsv").read_text().splitlines()
    (tmp_path / "q.tsv").write_text("\n".join(qrels[:-1]) + "\n")
    code = main(["eval", "--corpus", str(data / "corpus"), "--queries", str(data / "queries"),
                 "--qrels", str(tmp_path / "q.tsv"), "--split", "all", "--no-figures",
                 "--method", "static-mean", "--out", str(tmp_path / "r")])
    assert code == 0
    assert "1 queries without judgments excluded" in caplog.text
    assert np.isfinite(float((tmp_path / "r" / "report.csv").read_text().splitlines()[1].split(",")[-1]))


def test_train_without_split_tags(data, tmp_path):
    from reinpool.store import MultiVectorDoc, save_collection
    docs = [MultiVectorDoc(d.doc_id, d.vectors) for d in load_collection(data / "corpus")]
    save_collection(docs, tmp_path / "corpus")
    assert main(["train", "--corpus", str(tmp_path / "corpus"), "--queries", str(data / "queries"),
                 "--qrels", str(data / "qrels.tsv"), "--out", str(tmp_path / "r"), *TRAIN]) == 0


@pytest.mark.slow
def test_smoke_train_on_default_data_is_fast(tmp_path):
    import time
    assert main(["gen", "--out", str(tmp_path / "data")]) == 0
    start = time.perf_counter()
    assert main(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run"),
                 "--steps", "200", "--group-size", "16", "--lr", "3e-3", "--no-figures"]) == 0
    assert time.perf_counter() - start < 60
