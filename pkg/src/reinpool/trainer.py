"""GRPO training of the filtering policy over frozen pre-computed embeddings.

One step: for each document in the batch, sample ``group_size`` keep-masks,
pool each, reward it by how well the pooled document retrieves its own
queries (NDCG@k), centre the rewards within the group, and take one
AdamW step on the advantage-weighted log-likelihood. Gradients are clipped
to a global norm and the learning rate is halved when validation NDCG
plateaus.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigError, CorruptStoreError, IncompatibleCheckpointError, \
    NumericError, StorageError
from .evaluator import compress_corpus, forward_retrieval_ndcg
from .policy import DEFAULT_HEADS, PolicyParams, backward, entropy, forward, load_policy, \
    save_policy, sample_mask
from .pooling import PoolKind, pool, pool_query
from .reward import RewardSpec, inverse_retrieval_reward
from .rng import stream
from .store import SingleVectorIndex

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "mean_reward", "kept_fraction", "grad_norm", "lr", "val_ndcg3")
# fields that do not change the trajectory and may differ on resume
_UNHASHED = {"max_steps", "threads"}


@dataclass
class TrainConfig:
    group_size: int = 16
    batch_docs: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 1.0
    ndcg_k: int = 3
    max_steps: int = 1000
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    val_every: int = 50
    seed: int = 42
    advantage_std_normalize: bool = False
    entropy_coeff: float = 0.0
    pool: str = "mean"
    heads: int = DEFAULT_HEADS
    threshold: float = 0.5
    candidate_pool_size: int | None = None
    threads: int = 1

    def validate(self) -> None:
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.batch_docs < 1 or self.max_steps < 0 or self.val_every < 1:
            raise ConfigError("batch_docs and val_every must be >= 1, max_steps >= 0")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.learning_rate <= 0 or self.min_lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate, min_lr and clip_norm must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        PoolKind.parse(self.pool)
        RewardSpec(self.ndcg_k, self.candidate_pool_size)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        payload = {k: v for k, v in sorted(asdict(self).items()) if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Rollout:
    mask: np.ndarray
    log_prob: float
    v_pool: np.ndarray
    reward: float
    advantage: float = 0.0


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3

    @classmethod
    def fresh(cls, num_params: int, lr: float) -> "OptimizerState":
        return cls(np.zeros(num_params), np.zeros(num_params), 0, lr)


@dataclass
class TrainingData:
    """Frozen inputs for the reward: a pool of pooled query vectors and
    each training document's positive query ids."""

    docs: list
    query_pool: SingleVectorIndex
    positives: list[dict[str, int]]
    pool_matrix: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.pool_matrix is None:
            self.pool_matrix = self.query_pool.vectors.astype(np.float64)


def build_training_data(docs, queries, qrels, kind=PoolKind.MEAN) -> TrainingData:
    """Pool every query, drop documents without positives (with a warning)."""
    kind = PoolKind.parse(kind)
    by_doc = qrels.by_doc()
    query_ids = {q.doc_id for q in queries}
    pooled = SingleVectorIndex([q.doc_id for q in queries],
                               np.vstack([pool_query(q, kind) for q in queries]))
    kept, positives, skipped = [], [], 0
    for doc in docs:
        pos = {q: g for q, g in by_doc.get(doc.doc_id, {}).items() if g > 0 and q in query_ids}
        if not pos:
            skipped += 1
            continue
        kept.append(doc)
        positives.append(pos)
    if skipped:
        logger.warning("skipping %d training documents without positive queries", skipped)
    if not kept:
        raise ConfigError("no training document has a positive query")
    return TrainingData(kept, pooled, positives)


def compute_advantages(rewards, std_normalize: bool = False) -> np.ndarray:
    """Group-relative advantages: rewards minus the group mean.

    With ``std_normalize`` the centred rewards are divided by the population
    standard deviation plus 1e-8.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ConfigError("group size must be >= 2")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    adv = r - r.mean()
    if std_normalize:
        adv = adv / (r.std() + 1e-8)
    return adv


def rollout_group(params: PolicyParams, doc, data: TrainingData, doc_index: int, cfg: TrainConfig,
                  step: int, doc_ordinal: int, out=None):
    """Sample ``group_size`` masks for one document; returns (policy output, rollouts)."""
    kind = PoolKind.parse(cfg.pool)
    spec = RewardSpec(cfg.ndcg_k, cfg.candidate_pool_size)
    out = forward(params, doc.vectors) if out is None else out
    rollouts = []
    for g in range(cfg.group_size):
        rng = stream(cfg.seed, "rollout", step, doc_ordinal, g)
        mask, log_prob = sample_mask(out, rng)
        v_pool = pool(doc.vectors, mask, kind)
        reward = inverse_retrieval_reward(v_pool, data.positives[doc_index], data.query_pool, spec,
                                          rng=rng, pooled_matrix=data.pool_matrix)
        rollouts.append(Rollout(mask, log_prob, v_pool, reward))
    adv = compute_advantages([r.reward for r in rollouts], cfg.advantage_std_normalize)
    for r, a in zip(rollouts, adv):
        r.advantage = float(a)
    return out, rollouts


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(grad @ grad))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def adamw_step(theta, grad, m, v, t: int, lr: float, cfg: TrainConfig):
    """Array-level AdamW: returns ``(theta', m', v')`` for step number ``t`` (1-based)."""
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon) - lr * cfg.weight_decay * theta
    return theta, m, v


def apply_update(state: OptimizerState, params: PolicyParams, grad: np.ndarray,
                 cfg: TrainConfig) -> tuple[PolicyParams, OptimizerState]:
    """One AdamW step; weight decay is applied to the parameters, not folded into the gradient."""
    t = state.t + 1
    theta, m, v = adamw_step(params.flat(), np.asarray(grad, dtype=np.float64), state.m, state.v,
                             t, state.lr, cfg)
    if not np.isfinite(theta).all():
        raise NumericError("non-finite parameters after update")
    return params.with_flat(theta), OptimizerState(m, v, t, state.lr)


def batch_indices(step: int, num_docs: int, batch_docs: int, seed: int) -> list[int]:
    """Document indices for ``step``: consecutive slices of seeded per-epoch shuffles."""
    start = step * batch_docs
    out = []
    for pos in range(start, start + batch_docs):
        epoch, offset = divmod(pos, num_docs)
        perm = stream(seed, "shuffle", epoch).permutation(num_docs)
        out.append(int(perm[offset]))
    return out


def _doc_gradient(params, data, idx, cfg, step, ordinal):
    out, rollouts = rollout_group(params, data.docs[idx], data, idx, cfg, step, ordinal)
    masks = [r.mask for r in rollouts]
    adv = [r.advantage for r in rollouts]
    grad = backward(params, out, masks, adv, cfg.entropy_coeff).flat()
    loss = -float(np.dot(adv, [r.log_prob for r in rollouts])) / len(rollouts)
    if cfg.entropy_coeff:
        loss -= cfg.entropy_coeff * entropy(out)
    return grad, loss, rollouts


def train_step(params: PolicyParams, state: OptimizerState, data: TrainingData, cfg: TrainConfig,
               step: int, executor: ThreadPoolExecutor | None = None):
    """Returns ``(params', state', metrics)``."""
    idx = batch_indices(step, len(data.docs), cfg.batch_docs, cfg.seed)
    jobs = [(params, data, i, cfg, step, n) for n, i in enumerate(idx)]
    if executor is not None:
        results = list(executor.map(lambda a: _doc_gradient(*a), jobs))
    else:
        results = [_doc_gradient(*a) for a in jobs]

    # fixed-order reduction
    grad = np.zeros(params.num_params)
    loss = 0.0
    rewards, kept = [], []
    for g, l, rollouts in results:
        grad += g
        loss += l
        rewards.extend(r.reward for r in rollouts)
        kept.extend(float(r.mask.mean()) for r in rollouts)
    grad /= len(results)
    loss /= len(results)
    if not np.isfinite(grad).all():
        raise NumericError(f"non-finite gradient at step {step}")
    grad, norm = clip_by_global_norm(grad, cfg.clip_norm)
    new_params, new_state = apply_update(state, params, grad, cfg)
    metrics = {"step": step + 1, "loss": loss, "mean_reward": float(np.mean(rewards)),
               "kept_fraction": float(np.mean(kept)), "grad_norm": norm, "lr": state.lr}
    return new_params, new_state, metrics


def validate(params: PolicyParams, val_docs, val_queries, qrels, cfg: TrainConfig) -> float:
    """Forward-retrieval NDCG@k of greedily compressed held-out documents."""
    if not val_docs or not val_queries:
        raise ConfigError("empty validation set")
    kind = PoolKind.parse(cfg.pool)
    index = compress_corpus(val_docs, params=params, kind=kind, threshold=cfg.threshold)
    return forward_retrieval_ndcg(index, val_queries, qrels, kind, cfg.ndcg_k)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` validations
    without an improvement larger than ``threshold``."""

    patience: int = 5
    factor: float = 0.5
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float | None = None
    bad: int = 0

    def step(self, score: float, lr: float) -> float:
        if self.best is None or score > self.best + self.threshold:
            self.best = score
            self.bad = 0
            return lr
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return max(lr * self.factor, self.min_lr)
        return lr

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauScheduler":
        return cls(cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold, cfg.min_lr)


def plateau_scheduler(history, cfg: TrainConfig, lr: float | None = None) -> float:
    """Learning rate after replaying the validation ``history`` from ``lr``."""
    if not history:
        raise ConfigError("empty validation history")
    sched = PlateauScheduler.from_config(cfg)
    lr = cfg.learning_rate if lr is None else lr
    for score in history:
        lr = sched.step(score, lr)
    return lr


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(path, params: PolicyParams, state: OptimizerState, step: int, cfg: TrainConfig,
                    scheduler: PlateauScheduler | None = None, extra: dict | None = None) -> None:
    """Write ``policy.*``, ``optimizer.bin`` and ``run_state.json`` atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        save_policy(params, tmp)
        (tmp / "optimizer.bin").write_bytes(np.concatenate([state.m, state.v]).astype("<f8").tobytes())
        run_state = {
            "step": step,
            "optimizer_t": state.t,
            "lr": state.lr,
            "config_hash": cfg.digest(),
            # thread count changes nothing in the result, so it stays out of the file
            "config": {k: v for k, v in asdict(cfg).items() if k != "threads"},
            # streams are keyed by (seed, step, ...) so the step is the cursor
            "rng": {"scheme": "philox/seedsequence", "seed": cfg.seed, "next_step": step},
            "scheduler": asdict(scheduler) if scheduler is not None else None,
            "checksums": {name: _sha256(tmp / name) for name in ("policy.bin", "policy.json", "optimizer.bin")},
        }
        if extra:
            run_state.update(extra)
        (tmp / "run_state.json").write_text(json.dumps(run_state, indent=1, sort_keys=True) + "\n")
        old = path.with_name(path.name + ".old")
        if path.exists():
            os.replace(path, old)
        os.replace(tmp, path)
        if old.exists():
            shutil.rmtree(old)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, cfg: TrainConfig | None = None):
    """Returns ``(params, state, step, run_state)``; verifies checksums and config hash."""
    path = Path(path)
    try:
        run_state = json.loads((path / "run_state.json").read_text())
    except FileNotFoundError as exc:
        raise StorageError(f"no checkpoint at {path}") from exc
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"unreadable run_state.json in {path}") from exc
    for name, digest in run_state.get("checksums", {}).items():
        if not (path / name).exists() or _sha256(path / name) != digest:
            raise ChecksumError(f"checksum mismatch for {path / name}")
    if cfg is not None and run_state["config_hash"] != cfg.digest():
        raise IncompatibleCheckpointError(
            f"checkpoint {path} was written with a different training config")
    params = load_policy(path)
    raw = np.frombuffer((path / "optimizer.bin").read_bytes(), dtype="<f8")
    if raw.size != 2 * params.num_params:
        raise CorruptStoreError(f"optimizer state in {path} has the wrong size")
    m, v = raw[:params.num_params].copy(), raw[params.num_params:].copy()
    state = OptimizerState(m, v, int(run_state["optimizer_t"]), float(run_state["lr"]))
    return params, state, int(run_state["step"]), run_state


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


class MetricsLog:
    """Append-only CSV of per-step metrics."""

    def __init__(self, path):
        self.path = Path(path)

    def truncate_after(self, step: int) -> None:
        if not self.path.exists():
            return
        with open(self.path, newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [r for r in rows[1:] if int(r[0]) <= step]
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_FIELDS)
            w.writerows(keep)

    def append(self, metrics: dict) -> None:
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(METRIC_FIELDS)
            w.writerow([_fmt(metrics.get(k)) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class TrainResult:
    params: PolicyParams
    best_params: PolicyParams
    state: OptimizerState
    step: int
    val_history: list[float]
    best_val: float | None


class Trainer:
    """Runs the full loop with periodic validation and checkpointing.

    The output directory receives ``metrics.csv``, ``checkpoint/`` (latest)
    and ``best/`` (best validation NDCG so far).
    """

    def __init__(self, cfg: TrainConfig, data: TrainingData, val_docs, val_queries, qrels, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.data = data
        self.val_docs = val_docs
        self.val_queries = val_queries
        self.qrels = qrels
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def initial_params(self) -> PolicyParams:
        return PolicyParams.initialize(self.data.docs[0].dim, self.cfg.heads, stream(self.cfg.seed, "init"))

    def fit(self, resume: bool = False, checkpoint_every: int | None = None,
            stop_after: int | None = None) -> TrainResult:
        """Train to ``cfg.max_steps``; ``stop_after`` halts early as if interrupted."""
        cfg = self.cfg
        end = cfg.max_steps if stop_after is None else min(stop_after, cfg.max_steps)
        every = checkpoint_every or cfg.val_every
        log = MetricsLog(self.out_dir / "metrics.csv") if self.out_dir else None
        sched = PlateauScheduler.from_config(cfg)
        val_history: list[float] = []
        best_val = None

        ckpt_dir = self.out_dir / "checkpoint" if self.out_dir else None
        if resume and ckpt_dir is not None and ckpt_dir.exists():
            params, state, step, run_state = load_checkpoint(ckpt_dir, cfg)
            if run_state.get("scheduler"):
                sched = PlateauScheduler(**run_state["scheduler"])
            val_history = list(run_state.get("val_history", []))
            best_val = run_state.get("best_val")
            best_params = load_policy(self.out_dir / "best") if (self.out_dir / "best").exists() else params
            log.truncate_after(step)
            logger.info("resumed from %s at step %d", ckpt_dir, step)
        else:
            params = self.initial_params()
            state = OptimizerState.fresh(params.num_params, cfg.learning_rate)
            step = 0
            best_params = params
            if log is not None and log.path.exists():
                log.path.unlink()

        executor = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
        try:
            while step < end:
                params, state, metrics = train_step(params, state, self.data, cfg, step, executor)
                step += 1
                if step % cfg.val_every == 0 or step == cfg.max_steps:
                    score = validate(params, self.val_docs, self.val_queries, self.qrels, cfg)
                    metrics["val_ndcg3"] = score
                    val_history.append(score)
                    if best_val is None or score > best_val:
                        best_val, best_params = score, params
                        if self.out_dir is not None:
                            save_policy(params, self.out_dir / "best")
                    state.lr = sched.step(score, state.lr)
                    logger.info("step %d reward %.4f kept %.3f val %.4f lr %.2e", step,
                                metrics["mean_reward"], metrics["kept_fraction"], score, state.lr)
                if log is not None:
                    log.append(metrics)
                if ckpt_dir is not None and (step % every == 0 or step == cfg.max_steps):
                    save_checkpoint(ckpt_dir, params, state, step, cfg, sched,
                                    {"val_history": val_history, "best_val": best_val})
        finally:
            if executor is not None:
                executor.shutdown()
        return TrainResult(params, best_params, state, step, val_history, best_val)
