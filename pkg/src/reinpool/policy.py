"""Filtering policy: one multi-head self-attention layer with a residual
connection, followed by a linear keep/discard head.

    Q, K, V = X W_Q + b_Q, X W_K + b_K, X W_V + b_V      (split into H heads)
    A_h     = softmax(Q_h K_h^T / sqrt(d / H))
    Hidden  = X + concat_h(A_h V_h) W_O + b_O
    logits  = Hidden w_cls + b_cls,   keep_probs = logistic(logits)

Everything runs in float64. Gradients are derived by hand; there is no
autodiff dependency. No positional encoding is used, so the policy is
equivariant to row permutations.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptStoreError, NumericError, ShapeError, StorageError

logger = logging.getLogger(__name__)

TENSOR_NAMES = ("W_Q", "b_Q", "W_K", "b_K", "W_V", "b_V", "W_O", "b_O", "w_cls", "b_cls")
DEFAULT_HEADS = 8
INIT_KEEP_BIAS = 1.0


@dataclass(eq=False)
class PolicyParams:
    W_Q: np.ndarray
    b_Q: np.ndarray
    W_K: np.ndarray
    b_K: np.ndarray
    W_V: np.ndarray
    b_V: np.ndarray
    W_O: np.ndarray
    b_O: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray
    num_heads: int = DEFAULT_HEADS

    def __post_init__(self):
        for name in TENSOR_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        d = self.dim
        if self.num_heads < 1 or d % self.num_heads:
            raise ConfigError(f"heads={self.num_heads} must divide dim={d}")
        for name, shape in self.shapes().items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dim(self) -> int:
        return self.W_Q.shape[0]

    def shapes(self) -> dict[str, tuple]:
        d = self.dim
        mat, vec = (d, d), (d,)
        return {"W_Q": mat, "b_Q": vec, "W_K": mat, "b_K": vec, "W_V": mat, "b_V": vec,
                "W_O": mat, "b_O": vec, "w_cls": vec, "b_cls": ()}

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.reshape(-1) for t in self.tensors().values()])

    def with_flat(self, flat) -> "PolicyParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ShapeError(f"flat vector of length {flat.shape} != {self.num_params}")
        out, pos = {}, 0
        for name, shape in self.shapes().items():
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        return PolicyParams(**out, num_heads=self.num_heads)

    def copy(self) -> "PolicyParams":
        return self.with_flat(self.flat())

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.num_heads == other.num_heads and self.dim == other.dim \
            and self.flat().tobytes() == other.flat().tobytes()

    @classmethod
    def zeros(cls, dim: int, num_heads: int = DEFAULT_HEADS) -> "PolicyParams":
        if dim < 1 or num_heads < 1 or dim % num_heads:
            raise ConfigError(f"heads={num_heads} must divide dim={dim}")
        mat, vec = np.zeros((dim, dim)), np.zeros(dim)
        return cls(mat, vec, mat, vec, mat, vec, mat, vec, vec, 0.0, num_heads=num_heads)

    @classmethod
    def initialize(cls, dim: int, num_heads: int, rng: np.random.Generator) -> "PolicyParams":
        """Uniform(-s, s) projections with s = sqrt(6 / 2d); zero head, keep bias +1."""
        p = cls.zeros(dim, num_heads)
        s = np.sqrt(6.0 / (2 * dim))
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            setattr(p, name, rng.uniform(-s, s, size=(dim, dim)))
        p.b_cls = np.array(INIT_KEEP_BIAS)
        return p


@dataclass
class PolicyOutput:
    keep_probs: np.ndarray
    logits: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _split_heads(m, heads):
    n, d = m.shape
    return m.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(m):
    h, n, dh = m.shape
    return m.transpose(1, 0, 2).reshape(n, h * dh)


def forward(params: PolicyParams, X) -> PolicyOutput:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError(f"expected a non-empty N x d matrix, got {X.shape}")
    if X.shape[1] != params.dim:
        raise ShapeError(f"input dim {X.shape[1]} != policy dim {params.dim}")
    H = params.num_heads
    scale = 1.0 / np.sqrt(params.dim // H)

    Qh = _split_heads(X @ params.W_Q + params.b_Q, H)
    Kh = _split_heads(X @ params.W_K + params.b_K, H)
    Vh = _split_heads(X @ params.W_V + params.b_V, H)
    S = (Qh @ Kh.transpose(0, 2, 1)) * scale
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    A = E / E.sum(axis=-1, keepdims=True)
    C = _merge_heads(A @ Vh)
    hidden = X + C @ params.W_O + params.b_O
    logits = hidden @ params.w_cls + params.b_cls
    if not np.isfinite(logits).all():
        raise NumericError("non-finite policy logits")
    cache = {"X": X, "Qh": Qh, "Kh": Kh, "Vh": Vh, "A": A, "C": C, "hidden": hidden, "scale": scale}
    return PolicyOutput(logistic(logits), logits, cache)


def mask_log_prob(out: PolicyOutput, mask) -> float:
    a = np.asarray(mask, dtype=bool)
    z = out.logits
    # log sigma(z) = -log(1 + e^-z); log(1 - sigma(z)) = -log(1 + e^z)
    return float(-np.where(a, np.logaddexp(0.0, -z), np.logaddexp(0.0, z)).sum())


def sample_mask(out: PolicyOutput, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Independent Bernoulli draw per row; returns (mask, log-probability)."""
    u = rng.random(out.keep_probs.shape[0])
    mask = u < out.keep_probs
    return mask, mask_log_prob(out, mask)


def greedy_mask(out: PolicyOutput, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return out.keep_probs >= threshold


def entropy(out: PolicyOutput) -> float:
    p, z = out.keep_probs, out.logits
    # H = log(1 + e^z) - p z, stable for large |z|
    return float((np.logaddexp(0.0, z) - p * z).sum())


def backward(params: PolicyParams, out: PolicyOutput, masks, coefficients,
             entropy_coeff: float = 0.0) -> PolicyParams:
    """Gradient of ``-(1/G) sum_g c_g log pi(a_g | X) - entropy_coeff * H``."""
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    coefficients = np.asarray(coefficients, dtype=np.float64)
    n = out.logits.shape[0]
    if len(masks) != coefficients.shape[0] or not masks:
        raise ShapeError(f"{len(masks)} masks but {coefficients.shape[0]} coefficients")
    if any(m.shape != (n,) for m in masks):
        raise ShapeError(f"every mask must have length {n}")
    p = out.keep_probs
    # d log pi(a) / d logit_t = a_t - p_t
    dz = -(coefficients @ (np.vstack(masks) - p)) / len(masks)
    if entropy_coeff:
        dz = dz + entropy_coeff * out.logits * p * (1.0 - p)
    return backward_logits(params, out, dz)


def backward_logits(params: PolicyParams, out: PolicyOutput, dz) -> PolicyParams:
    """Backpropagate an upstream gradient on the logits to every parameter."""
    c = out.cache
    X, Qh, Kh, Vh, A, C = c["X"], c["Qh"], c["Kh"], c["Vh"], c["A"], c["C"]
    H = params.num_heads
    dz = np.asarray(dz, dtype=np.float64)

    g_w_cls = c["hidden"].T @ dz
    g_b_cls = dz.sum()
    d_hidden = np.outer(dz, params.w_cls)
    g_W_O = C.T @ d_hidden
    g_b_O = d_hidden.sum(axis=0)
    dO = _split_heads(d_hidden @ params.W_O.T, H)

    dA = dO @ Vh.transpose(0, 2, 1)
    dVh = A.transpose(0, 2, 1) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * c["scale"]
    dQ = _merge_heads(dS @ Kh)
    dK = _merge_heads(dS.transpose(0, 2, 1) @ Qh)
    dV = _merge_heads(dVh)

    return PolicyParams(
        X.T @ dQ, dQ.sum(axis=0),
        X.T @ dK, dK.sum(axis=0),
        X.T @ dV, dV.sum(axis=0),
        g_W_O, g_b_O, g_w_cls, g_b_cls,
        num_heads=H,
    )


def surrogate_loss(params: PolicyParams, X, masks, coefficients, entropy_coeff: float = 0.0) -> float:
    out = forward(params, X)
    lp = np.array([mask_log_prob(out, m) for m in masks])
    return float(-(np.asarray(coefficients, dtype=np.float64) @ lp) / len(masks)
                 - entropy_coeff * entropy(out))


def gradient_check(dim: int = 8, heads: int = 2, n: int = 6, groups: int = 3, seed: int = 0,
                   eps: float = 1e-5, corrupt: bool = False) -> dict[str, float]:
    """Compare ``backward`` with central differences on every parameter entry.

    Returns the worst error per tensor, measured as
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-2)`` so that a
    1e-4 bound on it is a 1e-4 relative test with a 1e-6 absolute floor.
    ``corrupt`` perturbs the analytic gradient to prove the check can fail.
    """
    if dim < 1 or heads < 1 or dim % heads:
        raise ConfigError(f"heads={heads} must divide dim={dim}")
    rng = np.random.default_rng(seed)
    base = PolicyParams.zeros(dim, heads)
    params = base.with_flat(rng.normal(scale=0.5, size=base.num_params))
    X = rng.normal(size=(n, dim))
    masks = [rng.random(n) < 0.5 for _ in range(groups)]
    coefficients = rng.normal(size=groups)

    analytic = backward(params, forward(params, X), masks, coefficients).flat()
    if corrupt:
        analytic = analytic * 1.01 + 1e-3
    theta = params.flat()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        up = surrogate_loss(params.with_flat(theta + step), X, masks, coefficients)
        down = surrogate_loss(params.with_flat(theta - step), X, masks, coefficients)
        numeric[i] = (up - down) / (2 * eps)

    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-2)
    report, pos = {}, 0
    for name, shape in params.shapes().items():
        size = int(np.prod(shape, dtype=np.int64))
        report[name] = float(err[pos:pos + size].max())
        pos += size
    return report


def save_policy(params: PolicyParams, path) -> None:
    path = Path(path)
    tensors, offset = [], 0
    for name, t in params.tensors().items():
        tensors.append({"name": name, "shape": list(t.shape), "offset_floats": offset})
        offset += t.size
    header = {"dim": params.dim, "heads": params.num_heads, "tensors": tensors}
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "policy.bin").write_bytes(params.flat().astype("<f8").tobytes())
        (path / "policy.json").write_text(json.dumps(header, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write policy to {path}: {exc}") from exc


def load_policy(path) -> PolicyParams:
    path = Path(path)
    try:
        header = json.loads((path / "policy.json").read_text(encoding="utf-8"))
        raw = (path / "policy.bin").read_bytes()
    except FileNotFoundError as exc:
        raise StorageError(f"incomplete policy checkpoint in {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptStoreError(f"unreadable policy.json in {path}") from exc
    flat = np.frombuffer(raw, dtype="<f8")
    template = PolicyParams.zeros(int(header["dim"]), int(header["heads"]))
    expected = [(n, list(s)) for n, s in template.shapes().items()]
    found = [(t["name"], list(t["shape"])) for t in header["tensors"]]
    if found != expected or flat.size != template.num_params:
        raise CorruptStoreError(f"policy checkpoint in {path} does not match its header")
    return template.with_flat(flat)
