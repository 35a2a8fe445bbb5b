"""Reinforcement-learned filtering and pooling of multi-vector embeddings."""

from .errors import ReinPoolError
from .evaluator import EvalMethod, EvalReport, compress_corpus, evaluate, score_full_multivector
from .policy import PolicyParams, backward, forward, greedy_mask, sample_mask
from .pooling import PoolKind, pool, pool_query
from .reward import RewardSpec, inverse_retrieval_reward, ndcg_at_k, similarity
from .store import MultiVectorDoc, MultiVectorQuery, Qrels, SingleVectorIndex, embedding_cost, \
    load_collection, load_qrels, save_collection
from .synth import SynthConfig, generate, oracle_eval
from .trainer import TrainConfig, Trainer, compute_advantages, train_step

__all__ = [
    "ReinPoolError", "EvalMethod", "EvalReport", "compress_corpus", "evaluate", "score_full_multivector",
    "PolicyParams", "backward", "forward", "greedy_mask", "sample_mask", "PoolKind", "pool", "pool_query",
    "RewardSpec", "inverse_retrieval_reward", "ndcg_at_k", "similarity", "MultiVectorDoc",
    "MultiVectorQuery", "Qrels", "SingleVectorIndex", "embedding_cost", "load_collection", "load_qrels",
    "save_collection", "SynthConfig", "generate", "oracle_eval", "TrainConfig", "Trainer",
    "compute_advantages", "train_step",
]

__version__ = "0.1.0"
