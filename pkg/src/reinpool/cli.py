"""Command-line entry point: ``reinpool {gen,train,compress,eval,gradcheck,selftest}``.

Settings resolve as defaults < ``--config`` file < flags. The config file is
YAML with optional ``synth``, ``train`` and ``eval`` sections. Exit codes:
0 success, 1 validation/config error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import yaml

from . import synth
from .errors import ConfigError, ReinPoolError, StorageError
from .evaluator import EvalMethod, compress_corpus, emit_report, evaluate, forward_retrieval_ndcg, \
    report_to_text
from .policy import gradient_check, load_policy
from .rng import stream
from .store import load_collection, load_qrels, load_queries, save_index
from .trainer import TrainConfig, Trainer, build_training_data, read_metrics

logger = logging.getLogger("reinpool")

GRADCHECK_TOL = 1e-4
DEFAULT_METHODS = ("full-mean", "full-max", "static-mean", "static-max")
# short flags mapped onto TrainConfig fields
_TRAIN_ALIASES = {"lr": "learning_rate", "steps": "max_steps"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _setup_logging():
    level = os.environ.get("REINPOOL_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise StorageError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _section(cfg: dict, name: str) -> dict:
    section = cfg.get(name, {}) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return dict(section)


def _add_dataclass_flags(parser, cls, skip=()):
    group = parser.add_argument_group(f"{cls.__name__} overrides")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            group.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        else:
            group.add_argument(flag, dest=f.name, default=None, type=_field_parser(f))


def _field_parser(f):
    t = str(f.type)
    if "int" in t and "None" not in t:
        return int
    if "float" in t:
        return float
    if "int | None" in t:
        return lambda s: None if s.lower() in ("none", "all") else int(s)
    return str


def _overrides(args, cls) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(cls)
            if getattr(args, f.name, None) is not None}


def _log_resolved(name: str, values: dict):
    logger.info("resolved %s config: %s", name, yaml.safe_dump(values, sort_keys=True).strip().replace("\n", "; "))


def _synth_config(args) -> synth.SynthConfig:
    values = _section(_read_config(args.config), "synth")
    values.update(_overrides(args, synth.SynthConfig))
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = synth.SynthConfig.from_dict(values)
    cfg.validate()
    return cfg


def _train_config(args, file_cfg=None) -> TrainConfig:
    file_cfg = _read_config(args.config) if file_cfg is None else file_cfg
    values = _section(file_cfg, "train")
    values.update(_overrides(args, TrainConfig))
    if getattr(args, "lr", None) is not None:
        values["learning_rate"] = args.lr
    if getattr(args, "steps", None) is not None:
        values["max_steps"] = args.steps
    for key in ("seed", "threads", "group_size", "threshold", "pool"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    cfg = TrainConfig.from_dict(values)
    cfg.validate()
    return cfg


def _data_paths(args):
    if args.data is not None:
        base = Path(args.data)
        return (Path(args.corpus or base / "corpus"), Path(args.queries or base / "queries"),
                Path(args.qrels or base / "qrels.tsv"))
    if not (args.corpus and args.queries and args.qrels):
        raise ConfigError("give --data DIR or all of --corpus, --queries and --qrels")
    return Path(args.corpus), Path(args.queries), Path(args.qrels)


def _load_data(args):
    corpus_dir, queries_dir, qrels_file = _data_paths(args)
    return load_collection(corpus_dir), load_queries(queries_dir), load_qrels(qrels_file)


def _holdout(items, name, seed, fraction=0.2):
    """Seeded train/val split for collections without split tags."""
    order = stream(seed, "holdout").permutation(len(items))
    n_val = max(1, int(round(fraction * len(items))))
    val_ids = {items[i].doc_id for i in order[:n_val]}
    return [x for x in items if (x.doc_id in val_ids) == (name == "val")]


def _train_val(corpus, queries, qrels, seed):
    if any(d.split for d in corpus):
        train_docs, val_docs = synth.split(corpus, "train"), synth.split(corpus, "val")
    else:
        logger.warning("corpus has no split tags; holding out a seeded 20%% of documents for validation")
        train_docs, val_docs = _holdout(corpus, "train", seed), _holdout(corpus, "val", seed)
    by_doc = qrels.by_doc()

    def judging(docs):
        ids = {q for d in docs for q in by_doc.get(d.doc_id, {})}
        return [q for q in queries if q.doc_id in ids]

    # test-split queries never enter the training candidate pool
    train_queries, val_queries = judging(train_docs), judging(val_docs)
    if not train_docs or not val_docs:
        raise ConfigError("need both training and validation documents")
    return train_docs, train_queries, val_docs, val_queries


# --- subcommands ---------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _synth_config(args)
    _log_resolved("synth", dataclasses.asdict(cfg))
    ds = synth.generate(cfg)
    out = Path(args.out or "data")
    synth.write_dataset(ds, out)
    print(f"wrote {len(ds.corpus)} documents and {len(ds.queries)} queries to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _log_resolved("train", dataclasses.asdict(cfg))
    corpus, queries, qrels = _load_data(args)
    train_docs, train_queries, val_docs, val_queries = _train_val(corpus, queries, qrels, cfg.seed)
    data = build_training_data(train_docs, train_queries, qrels, cfg.pool)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.yaml").write_text(yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True))
    start = time.perf_counter()
    result = Trainer(cfg, data, val_docs, val_queries, qrels, out).fit(resume=args.resume)
    logger.info("trained %d steps in %.1f s", result.step, time.perf_counter() - start)
    if not args.no_figures and (out / "metrics.csv").exists():
        from .plotting import plot_training
        plot_training(read_metrics(out / "metrics.csv"), out / "training.png")
    final = result.val_history[-1] if result.val_history else float("nan")
    print(f"final validation NDCG@{cfg.ndcg_k}: {final:.4f} (best {result.best_val or float('nan'):.4f})")
    return 0


def cmd_compress(args) -> int:
    if args.corpus is None or args.out is None:
        raise ConfigError("compress needs --corpus and --out")
    _log_resolved("compress", {"corpus": str(args.corpus), "checkpoint": args.checkpoint,
                               "pool": args.pool or "mean", "threshold": args.threshold or 0.5})
    docs = load_collection(args.corpus)
    params = load_policy(args.checkpoint) if args.checkpoint else None
    index = compress_corpus(docs, params=params, kind=args.pool or "mean", threshold=args.threshold or 0.5)
    save_index(index, args.out)
    print(f"wrote {len(index)} x {index.dim} index to {args.out}")
    return 0


def _parse_methods(specs, checkpoint, threshold) -> list[EvalMethod]:
    methods = []
    for spec in specs:
        name, _, path = spec.partition("=")
        methods.append(EvalMethod.parse(name, path or checkpoint, threshold))
    return methods


def cmd_eval(args) -> int:
    file_cfg = _section(_read_config(args.config), "eval")
    threshold = args.threshold if args.threshold is not None else file_cfg.get("threshold", 0.5)
    specs = args.method or file_cfg.get("methods")
    if not specs:
        specs = list(DEFAULT_METHODS)
        if args.checkpoint:
            specs.append(f"reinpool-{args.pool or 'mean'}")
    methods = _parse_methods(specs, args.checkpoint, threshold)
    k = args.k or file_cfg.get("k", 3)
    corpus, queries, qrels = _load_data(args)
    split = args.split or file_cfg.get("split")
    if split is None and any(d.split for d in corpus):
        split = "test"
    if split and split != "all":
        corpus, queries = synth.split(corpus, split), synth.split(queries, split)
        if not corpus:
            raise ConfigError(f"no documents tagged with split {split!r}")
    _log_resolved("eval", {"methods": [m.name for m in methods], "checkpoint": args.checkpoint,
                           "threshold": threshold, "k": k, "split": split})
    report = evaluate(methods, corpus, queries, qrels, k)
    out = Path(args.out or "report")
    for fmt, suffix in (("text", ".txt"), ("csv", ".csv"), ("json", ".json")):
        emit_report(report, out / f"report{suffix}", fmt)
    if not args.no_figures:
        from .plotting import plot_report
        plot_report(report, out / "report.png")
    print(report_to_text(report), end="")
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradient_check(args.dim, args.heads, args.tokens, seed=args.seed or 0, corrupt=args.corrupt)
    for name, err in errors.items():
        print(f"{name:6s} max rel err {err:.3e}")
    worst = max(errors.values())
    ok = worst <= GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRADCHECK_TOL:g})")
    return 0 if ok else 2


def cmd_selftest(args) -> int:
    """gen -> train (short) -> compress -> eval, then check learned > static."""
    work = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="reinpool-selftest-"))
    seed = args.seed if args.seed is not None else 42
    ds = synth.generate(dataclasses.replace(synth.SynthConfig(), seed=seed))
    synth.write_dataset(ds, work / "data")
    cfg = TrainConfig(**{**SELFTEST_TRAIN, "seed": seed, "threads": args.threads or 1,
                         "max_steps": args.steps or SELFTEST_TRAIN["max_steps"]})
    train_docs, train_queries, val_docs, val_queries = _train_val(ds.corpus, ds.queries, ds.qrels, seed)
    data = build_training_data(train_docs, train_queries, ds.qrels, cfg.pool)
    result = Trainer(cfg, data, val_docs, val_queries, ds.qrels, work / "run").fit()

    test_docs, test_queries = synth.split(ds.corpus, "test"), synth.split(ds.queries, "test")
    index = compress_corpus(test_docs, params=result.params, kind=cfg.pool)
    save_index(index, work / "index")
    learned = forward_retrieval_ndcg(index, test_queries, ds.qrels)
    static = forward_retrieval_ndcg(compress_corpus(test_docs), test_queries, ds.qrels)
    ceiling = synth.oracle_eval(test_docs, test_queries, ds.qrels, ds.oracle_masks)
    checks = [
        ("ceiling - static >= 0.15", ceiling - static >= 0.15),
        ("learned - static >= 0.10", learned - static >= 0.10),
        ("learned >= 0.8 * ceiling", learned >= 0.8 * ceiling),
    ]
    print(f"oracle {ceiling:.4f}  static-mean {static:.4f}  reinpool-mean {learned:.4f}")
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if all(ok for _, ok in checks) else 1


# Training settings used by selftest and the acceptance run on the default
# planted benchmark.
SELFTEST_TRAIN = dict(group_size=16, batch_docs=8, learning_rate=3e-3, max_steps=300, val_every=50)


# --- argument parsing ----------------------------------------------------

def _common(p, *, data=False):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="output directory")
    if data:
        p.add_argument("--data", help="dataset directory with corpus/, queries/ and qrels.tsv")
        p.add_argument("--corpus")
        p.add_argument("--queries")
        p.add_argument("--qrels")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reinpool", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a planted-signal dataset")
    _common(p)
    _add_dataclass_flags(p, synth.SynthConfig, skip=("seed",))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the filtering policy with GRPO")
    _common(p, data=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    p.add_argument("--no-figures", action="store_true")
    _add_dataclass_flags(p, TrainConfig, skip=("seed", "threads", "learning_rate", "max_steps"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="write a single-vector index")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint", help="policy directory; omit for static pooling")
    p.add_argument("--pool", choices=("mean", "max"))
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="evaluate retrieval and write the report")
    _common(p, data=True)
    p.add_argument("--method", action="append",
                   help="full-{mean,max}, static-{mean,max}, reinpool-{mean,max}[=CKPT], maxsim")
    p.add_argument("--checkpoint")
    p.add_argument("--pool", choices=("mean", "max"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--split", help="evaluate one split tag (default: test when tags exist)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the policy gradient")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tokens", type=int, default=6)
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="gen -> train -> compress -> eval with threshold checks")
    _common(p)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ReinPoolError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
