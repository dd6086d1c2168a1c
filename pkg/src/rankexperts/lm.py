"""Tiny byte-level decoder-only language model.

The block follows the LLaMA layout (pre-RMSNorm, rotary attention with
optional grouped K/V heads, gated MLP) so every block has the seven
projections ``q, k, v, o, up, gate, down``.  Inference runs in numpy and
routes every projection through a :class:`Projector`, which is the hook the
compressed, routed and fused execution paths plug into.  Training uses torch
on the same math and exports the weights back to numpy.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

PROJECTIONS = ("q", "k", "v", "o", "up", "gate", "down")
VOCAB = 256
_NORM_EPS = 1e-5
_ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ToyLMConfig:
    n_blocks: int = 3
    d_model: int = 96
    n_heads: int = 4
    n_kv_heads: int = 4
    d_ff: int = 256
    vocab: int = VOCAB
    max_seq: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be divisible by n_kv_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.vocab != VOCAB:
            raise ValueError("the tokenizer is byte-level; vocab must be 256")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def gqa(self) -> bool:
        return self.n_kv_heads < self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def projection_ids(cfg: ToyLMConfig) -> list[str]:
    return [f"blocks.{b}.{p}" for b in range(cfg.n_blocks) for p in PROJECTIONS]


def projection_shape(cfg: ToyLMConfig, tensor_id: str) -> tuple[int, int]:
    """``(m, n)`` = (output dim, input dim) of a projection."""
    name = tensor_id.rsplit(".", 1)[-1]
    d, f, kv = cfg.d_model, cfg.d_ff, cfg.kv_dim
    return {"q": (d, d), "k": (kv, d), "v": (kv, d), "o": (d, d),
            "up": (f, d), "gate": (f, d), "down": (d, f)}[name]


def block_of(tensor_id: str) -> int:
    return int(tensor_id.split(".")[1])


def rms_norm(x, w):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS) * w


def silu(x):
    return x / (1.0 + np.exp(-x))


def _rope_tables(positions, head_dim, dtype):
    inv = _ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(positions.astype(np.float64), inv)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _apply_rope(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


@dataclass
class KVCacheState:
    """Rotated keys and values per block, shape ``(batch, kv_heads, length, head_dim)``."""

    keys: list
    values: list
    length: int
    max_seq: int


@dataclass
class ForwardResult:
    logits: np.ndarray
    hidden: list = field(default_factory=list)
    kv: KVCacheState | None = None


class Projector:
    """Computes the projections of one block; subclasses decide how.

    Inputs are row-major activations ``(..., n)``; outputs ``(..., m)``.
    """

    def project(self, tensor_id: str, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def qkv(self, block, h):
        return tuple(self.project(f"blocks.{block}.{p}", h) for p in ("q", "k", "v"))

    def o(self, block, a):
        return self.project(f"blocks.{block}.o", a)

    def gate_up(self, block, h):
        return self.project(f"blocks.{block}.gate", h), self.project(f"blocks.{block}.up", h)

    def down(self, block, z):
        return self.project(f"blocks.{block}.down", z)


class DenseProjector(Projector):
    def __init__(self, weights: dict, dtype=np.float64):
        self._w = {k: np.asarray(v, dtype=dtype) for k, v in weights.items() if k.count(".") == 2}

    def project(self, tensor_id, x):
        return x @ self._w[tensor_id].T


class CapturingProjector(Projector):
    """Wraps another projector and hands every projection input to ``sink``."""

    def __init__(self, inner: Projector, sink):
        self.inner = inner
        self.sink = sink

    def project(self, tensor_id, x):
        self.sink(tensor_id, x)
        return self.inner.project(tensor_id, x)


class ToyLM:
    """Dense numpy model holding float64 copies of the trained weights."""

    def __init__(self, cfg: ToyLMConfig, weights: dict):
        self.cfg = cfg
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        self._dense = {np.float64: DenseProjector(self.weights)}

    def dense_projector(self, dtype=np.float64) -> Projector:
        dtype = np.dtype(dtype).type
        if dtype not in self._dense:
            self._dense[dtype] = DenseProjector(self.weights, dtype)
        return self._dense[dtype]

    def weight(self, tensor_id: str) -> np.ndarray:
        return self.weights[tensor_id]

    def forward(self, tokens, kv: KVCacheState | None = None, projector: Projector | None = None,
                dtype=np.float64) -> ForwardResult:
        cfg = self.cfg
        dtype = np.dtype(dtype).type
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        bsz, T = tokens.shape
        if T < 1:
            raise ValueError("empty token sequence")
        start = 0 if kv is None else kv.length
        if start + T > cfg.max_seq:
            raise ValueError(f"sequence length {start + T} exceeds max_seq {cfg.max_seq}")
        projector = projector or self.dense_projector(dtype)
        w = self.weights
        H, Hkv, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
        cos, sin = _rope_tables(np.arange(start, start + T), hd, dtype)
        # query i (absolute start+i) may attend keys 0..start+i
        allowed = np.arange(start + T)[None, :] <= (start + np.arange(T))[:, None]
        x = w["tok_emb"].astype(dtype)[tokens]
        hidden, keys, values = [], [], []
        for b in range(cfg.n_blocks):
            pre = f"blocks.{b}."
            h = rms_norm(x, w[pre + "attn_norm"].astype(dtype))
            q, k, v = projector.qkv(b, h)
            q = _apply_rope(q.reshape(bsz, T, H, hd).transpose(0, 2, 1, 3), cos, sin)
            k = _apply_rope(k.reshape(bsz, T, Hkv, hd).transpose(0, 2, 1, 3), cos, sin)
            v = v.reshape(bsz, T, Hkv, hd).transpose(0, 2, 1, 3)
            if kv is not None:
                k = np.concatenate([kv.keys[b], k], axis=2)
                v = np.concatenate([kv.values[b], v], axis=2)
            keys.append(k)
            values.append(v)
            rep = H // Hkv
            kk = np.repeat(k, rep, axis=1) if rep > 1 else k
            vv = np.repeat(v, rep, axis=1) if rep > 1 else v
            scores = (q @ kk.transpose(0, 1, 3, 2)) / dtype(math.sqrt(hd))
            scores = np.where(allowed, scores, -np.inf)
            scores = scores - scores.max(axis=-1, keepdims=True)
            p = np.exp(scores)
            p /= p.sum(axis=-1, keepdims=True)
            att = (p @ vv).transpose(0, 2, 1, 3).reshape(bsz, T, cfg.d_model)
            x = x + projector.o(b, att)
            h = rms_norm(x, w[pre + "mlp_norm"].astype(dtype))
            g, u = projector.gate_up(b, h)
            x = x + projector.down(b, silu(g) * u)
            hidden.append(x)
        logits = rms_norm(x, w["norm"].astype(dtype)) @ w["lm_head"].astype(dtype).T
        return ForwardResult(logits=logits, hidden=hidden,
                             kv=KVCacheState(keys, values, start + T, cfg.max_seq))

    def prefill(self, tokens, **kw) -> ForwardResult:
        return self.forward(tokens, kv=None, **kw)

    def decode_step(self, kv: KVCacheState, token, **kw) -> ForwardResult:
        if kv.length >= kv.max_seq:
            raise ValueError("kv cache overflow: max_seq reached")
        token = np.asarray(token, dtype=np.int64).reshape(-1, 1)
        return self.forward(token, kv=kv, **kw)


def init_weights(cfg: ToyLMConfig, rng: np.random.Generator | None = None, std: float = 0.02) -> dict:
    rng = rng or np.random.default_rng(cfg.seed)
    out_std = std / math.sqrt(2 * cfg.n_blocks)
    w = {"tok_emb": rng.normal(0, std, (cfg.vocab, cfg.d_model))}
    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}."
        w[pre + "attn_norm"] = np.ones(cfg.d_model)
        w[pre + "mlp_norm"] = np.ones(cfg.d_model)
        for p in PROJECTIONS:
            shape = projection_shape(cfg, pre + p)
            w[pre + p] = rng.normal(0, out_std if p in ("o", "down") else std, shape)
    w["norm"] = np.ones(cfg.d_model)
    w["lm_head"] = rng.normal(0, std, (cfg.vocab, cfg.d_model))
    return w


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_nll(logits, tokens) -> np.ndarray:
    """Per-position next-token negative log-likelihood, length ``T - 1``."""
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    tokens = np.asarray(tokens, dtype=np.int64)
    return -lp[np.arange(len(tokens) - 1), tokens[1:]]


def sequence_nll(model, tokens) -> np.ndarray:
    """NLL of one sequence under any object exposing ``forward(tokens)``."""
    res = model.forward(np.asarray(tokens)[None, :])
    return token_nll(res.logits[0], tokens)


def window_ppl(model, tokens, window: int = 256) -> np.ndarray:
    """Perplexity of each contiguous, non-overlapping window of ``tokens``.

    Each window is scored as an independent sequence; PPL is ``exp`` of the
    mean next-token cross-entropy over its ``window - 1`` predictions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if window < 2 or len(tokens) < window:
        raise ValueError("too few tokens for one window")
    n = len(tokens) // window
    return np.array([math.exp(sequence_nll(model, tokens[i * window:(i + 1) * window]).mean())
                     for i in range(n)])


def mean_cross_entropy(model, sequences) -> float:
    return float(np.mean(np.concatenate([sequence_nll(model, s) for s in sequences])))


def generate(model, prompt, steps: int, **forward_kw) -> np.ndarray:
    """Greedy continuation; returns only the new tokens."""
    res = model.forward(np.asarray(prompt)[None, :], **forward_kw)
    out = []
    kv = res.kv
    for _ in range(steps):
        nxt = int(np.argmax(res.logits[0, -1]))
        out.append(nxt)
        res = model.forward(np.array([[nxt]]), kv=kv, **forward_kw)
        kv = res.kv
    return np.array(out, dtype=np.int64)
