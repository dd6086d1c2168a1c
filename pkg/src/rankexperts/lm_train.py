"""Train the toy LM from scratch with torch, export numpy weights."""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
import torch
import torch.nn.functional as F

from .lm import ToyLM, ToyLMConfig, init_weights

_NORM_EPS = 1e-5


@contextmanager
def _single_threaded():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _rms(x, w):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + _NORM_EPS) * w


def _rope(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def torch_forward(cfg: ToyLMConfig, p: dict, tokens: torch.Tensor) -> torch.Tensor:
    """Same computation as :meth:`ToyLM.forward` (no KV cache)."""
    B, T = tokens.shape
    H, Hkv, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    inv = 10000.0 ** (-torch.arange(0, hd, 2, dtype=torch.float64) / hd)
    ang = torch.outer(torch.arange(T, dtype=torch.float64), inv)
    cos, sin = ang.cos().to(p["tok_emb"].dtype), ang.sin().to(p["tok_emb"].dtype)
    x = p["tok_emb"][tokens.long()]
    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}."
        h = _rms(x, p[pre + "attn_norm"])
        q = _rope((h @ p[pre + "q"].T).view(B, T, H, hd).transpose(1, 2), cos, sin)
        k = _rope((h @ p[pre + "k"].T).view(B, T, Hkv, hd).transpose(1, 2), cos, sin)
        v = (h @ p[pre + "v"].T).view(B, T, Hkv, hd).transpose(1, 2)
        if H != Hkv:
            k = k.repeat_interleave(H // Hkv, dim=1)
            v = v.repeat_interleave(H // Hkv, dim=1)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + att.transpose(1, 2).reshape(B, T, cfg.d_model) @ p[pre + "o"].T
        h = _rms(x, p[pre + "mlp_norm"])
        x = x + (F.silu(h @ p[pre + "gate"].T) * (h @ p[pre + "up"].T)) @ p[pre + "down"].T
    return _rms(x, p["norm"]) @ p["lm_head"].T


def _as_streams(corpus) -> list[np.ndarray]:
    if isinstance(corpus, np.ndarray) and corpus.ndim == 1:
        return [corpus.astype(np.int64)]
    return [np.asarray(s, dtype=np.int64) for s in corpus]


def train_lm(cfg: ToyLMConfig, corpus, steps: int, batch_size: int = 16, seq_len: int = 128,
             lr: float = 3e-3, weight_decay: float = 0.01, warmup: float = 0.05,
             log_every: int = 0) -> ToyLM:
    """Train from scratch and return the numpy model.

    ``corpus`` is a token array or a list of per-domain streams; each batch row
    is a window from one stream (streams drawn uniformly), so every training
    sequence stays within a single domain.
    """
    streams = _as_streams(corpus)
    if seq_len > cfg.max_seq:
        raise ValueError("seq_len exceeds max_seq")
    usable = [s for s in streams if len(s) > seq_len]
    if not usable or sum(len(s) for s in streams) < batch_size * seq_len:
        raise ValueError("insufficient data: corpus shorter than batch_size * seq_len")
    rng = np.random.default_rng([cfg.seed, 1])
    with _single_threaded():
        torch.manual_seed(cfg.seed)
        params = {k: torch.tensor(v, dtype=torch.float32, requires_grad=True)
                  for k, v in init_weights(cfg, np.random.default_rng(cfg.seed)).items()}
        decay = [v for k, v in params.items() if v.ndim == 2]
        no_decay = [v for k, v in params.items() if v.ndim == 1]
        opt = torch.optim.AdamW([{"params": decay, "weight_decay": weight_decay},
                                 {"params": no_decay, "weight_decay": 0.0}],
                                lr=lr, betas=(0.9, 0.95))
        n_warm = max(1, int(warmup * steps))
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda t: (t + 1) / n_warm if t < n_warm
            else 0.5 * (1 + math.cos(math.pi * (t - n_warm) / max(1, steps - n_warm))))
        for step in range(steps):
            which = rng.integers(0, len(usable), batch_size)
            rows = []
            for s_idx in which:
                s = usable[s_idx]
                o = rng.integers(0, len(s) - seq_len)
                rows.append(s[o:o + seq_len + 1])
            batch = torch.from_numpy(np.stack(rows))
            logits = torch_forward(cfg, params, batch[:, :-1])
            loss = F.cross_entropy(logits.reshape(-1, cfg.vocab), batch[:, 1:].reshape(-1))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params.values(), 1.0)
            opt.step()
            sched.step()
            if log_every and step % log_every == 0:
                print(f"step {step:5d} loss {loss.item():.4f}")
        weights = {k: v.detach().numpy().astype(np.float32) for k, v in params.items()}
    return ToyLM(cfg, weights)

