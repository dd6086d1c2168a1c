"""Linear top-K router over rank experts, trained with a straight-through estimator.

Forward uses the hard top-K mask.  Backward replaces it with the sigmoid
surrogate ``m_soft_i = K * sig(z_i / tau) / (sum_j sig(z_j / tau) + eps)``, so
the effective mask is ``m_hard - stopgrad(m_soft) + m_soft``: its value is
``m_hard`` and its gradient is that of ``m_soft``.

One selection is made per sequence per matrix from the mean-pooled input
activation; the loss is the squared error against the dense output summed
over that sequence's tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .experts import FactorizedProjector, RankSelection, Selector, masked_forward, top_k
from .lm import CapturingProjector, ToyLM, mean_cross_entropy


@dataclass
class RouterParams:
    theta: np.ndarray
    bias: np.ndarray
    tau: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.tau <= 0 or self.eps <= 0:
            raise ValueError("tau and eps must be positive")
        if self.bias.shape != (self.theta.shape[0],):
            raise ValueError("bias must have one entry per expert")
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.bias))):
            raise ValueError("router parameters must be finite")

    @classmethod
    def zeros(cls, n_experts: int, n_in: int, tau: float = 1.0, eps: float = 1e-8) -> "RouterParams":
        return cls(np.zeros((n_experts, n_in)), np.zeros(n_experts), tau, eps)


@dataclass
class RouterTrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-3
    warmup_fraction: float = 0.1
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    tau: float = 1.0
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    init: str = "regression"
    init_ridge: float = 0.1
    standardize: bool = True

    def __post_init__(self):
        if self.init not in ("zero", "energy", "regression"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init_ridge <= 0:
            raise ValueError("init_ridge must be positive")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if not 0 <= self.warmup_fraction < 1 or self.weight_decay < 0:
            raise ValueError("invalid warmup fraction or weight decay")

    def to_dict(self) -> dict:
        return asdict(self)


def score(r: RouterParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != r.theta.shape[1]:
        raise ValueError(f"router expects inputs of size {r.theta.shape[1]}, got {h.shape[-1]}")
    return h @ r.theta.T + r.bias


def select_topk(logits, K: int) -> RankSelection:
    return top_k(logits, K)


def soft_mask(logits, K: int, tau: float = 1.0, eps: float = 1e-8) -> np.ndarray:
    s = expit(np.asarray(logits, dtype=np.float64) / tau)
    return K * s / (s.sum(axis=-1, keepdims=True) + eps)


def soft_mask_vjp(logits, upstream, K: int, tau: float, eps: float) -> np.ndarray:
    """``upstream^T d m_soft / d z``, batched over leading axes.

    With ``s_i = sig(z_i/tau)``, ``s'_i = s_i (1 - s_i) / tau`` and
    ``D = sum_j s_j + eps``::

        dm_i/dz_j = K (delta_ij s'_i D - s_i s'_j) / D^2
    """
    s = expit(np.asarray(logits, dtype=np.float64) / tau)
    ds = s * (1.0 - s) / tau
    D = s.sum(axis=-1, keepdims=True) + eps
    g = np.asarray(upstream, dtype=np.float64)
    return K * ds / D * (g - (g * s).sum(axis=-1, keepdims=True) / D)


def hard_mask(sel: RankSelection, n_experts: int) -> np.ndarray:
    m = np.zeros(n_experts)
    m[sel.array] = 1.0
    return m


@dataclass
class Tape:
    layer_id: str
    X: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    selection: RankSelection
    m_hard: np.ndarray
    m_soft: np.ndarray
    K: int
    tau: float
    eps: float
    output: np.ndarray = field(repr=False, default=None)


def ste_forward(layer, r: RouterParams, X, K: int) -> tuple[np.ndarray, Tape]:
    """Hard top-K forward for one sequence ``X`` (``n x T``); records a tape."""
    X = np.asarray(X, dtype=np.float64)
    h = X.mean(axis=1)
    logits = score(r, h)
    if logits.shape[0] != layer.r_store:
        raise ValueError("router width does not match the layer's stored experts")
    sel = select_topk(logits, K)
    out = masked_forward(layer, sel, X)
    tape = Tape(layer.layer_id, X, h, logits, sel, hard_mask(sel, layer.r_store),
                soft_mask(logits, K, r.tau, r.eps), K, r.tau, r.eps, out)
    return out, tape


def mask_gradient(layer, m, X, dense_out) -> np.ndarray:
    """``dL/dm_i = 2 <A diag(m) Z - Y, a_i z_i^T>_F`` with ``Z = B^T X``."""
    Z = layer.B.T @ X
    resid = layer.A @ (m[:, None] * Z) - dense_out
    return 2.0 * np.einsum("it,it->i", layer.A.T @ resid, Z)


def router_backward(tape: Tape, layer, X, dense_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the reconstruction loss w.r.t. ``(theta, bias)`` via the STE."""
    X = np.asarray(X, dtype=np.float64)
    if tape.layer_id != layer.layer_id or tape.X.shape != X.shape or not np.array_equal(tape.X, X):
        raise ValueError("stale tape: recorded for a different layer or input")
    g_m = mask_gradient(layer, tape.m_hard, X, np.asarray(dense_out, dtype=np.float64))
    dz = soft_mask_vjp(tape.logits, g_m, tape.K, tape.tau, tape.eps)
    return np.outer(dz, tape.h), dz


def surrogate_loss(tape: Tape, layer, X, dense_out, theta, bias) -> float:
    """Loss of the straight-through mask as a differentiable function of the router.

    ``stopgrad(m_soft)`` is frozen at the tape's value, so the function equals
    the hard loss at the taped parameters and its gradient there is exactly
    what :func:`router_backward` returns.
    """
    logits = tape.h @ np.asarray(theta).T + np.asarray(bias)
    m = tape.m_hard - tape.m_soft + soft_mask(logits, tape.K, tape.tau, tape.eps)
    Z = layer.B.T @ X
    diff = layer.A @ (m[:, None] * Z) - dense_out
    return float(np.vdot(diff, diff))


class RouterSelector(Selector):
    """Online routing: one top-K per sequence from the mean-pooled input."""

    per_sequence = True

    def __init__(self, routers: dict):
        self.routers = routers
        self.chosen: dict = {}

    def select(self, tensor_id, layer, x):
        sel = select_topk(score(self.routers[tensor_id], x.mean(axis=0)), layer.K)
        self.chosen[tensor_id] = sel
        return sel


@dataclass
class SequenceStats:
    """Per-sequence sufficient statistics of one matrix's reconstruction loss.

    For a hard mask ``m`` the loss of sequence ``s`` is
    ``sum_i energy[s,i] m_i^2 - 2 cross[s,i] m_i + total[s]`` (exact when
    the columns of ``A`` are orthogonal, which SVD factors guarantee).
    """

    h: np.ndarray
    energy: np.ndarray
    cross: np.ndarray
    total: np.ndarray

    def loss(self, m) -> np.ndarray:
        return (self.energy * m * m - 2.0 * self.cross * m).sum(axis=-1) + self.total


def collect_stats(fm, dense: ToyLM, sequences, tensor_ids=None, batch: int = 16) -> dict:
    """Run the dense model over ``sequences`` and summarise every routed matrix."""
    from .factorizer import _chunks

    tensor_ids = list(tensor_ids or fm.layers)
    a_norm = {t: np.einsum("ij,ij->j", fm.layers[t].A, fm.layers[t].A) for t in tensor_ids}
    acc = {t: ([], [], [], []) for t in tensor_ids}
    wanted = set(tensor_ids)

    def sink(tid, x):
        if tid not in wanted:
            return
        layer = fm.layers[tid]
        Z = x @ layer.B                           # (b, T, r)
        Y = x @ dense.weight(tid).T               # (b, T, m)
        h, e, c, t = acc[tid]
        h.append(x.mean(axis=1))
        e.append(a_norm[tid] * np.einsum("btr,btr->br", Z, Z))
        c.append(np.einsum("btr,btr->br", Y @ layer.A, Z))
        t.append(np.einsum("btm,btm->b", Y, Y))

    proj = CapturingProjector(dense.dense_projector(), sink)
    for chunk in _chunks(sequences, batch):
        dense.forward(chunk, projector=proj)
    return {t: SequenceStats(*(np.concatenate(parts) for parts in acc[t])) for t in tensor_ids}


def _check_orthogonal(layer):
    G = layer.A.T @ layer.A
    off = G - np.diag(np.diag(G))
    if np.max(np.abs(off), initial=0.0) > 1e-8 * max(np.max(np.diag(G)), 1e-300):
        raise ValueError(f"{layer.layer_id}: columns of A are not orthogonal")


def _lr_at(step, total, cfg: RouterTrainConfig):
    warm = int(round(cfg.warmup_fraction * total))
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def _centre_on_boundary(scores, K: int) -> np.ndarray:
    if K >= scores.shape[0]:
        return scores - scores.min() + 1.0
    srt = np.sort(scores)[::-1]
    return scores - 0.5 * (srt[K - 1] + srt[K])


def energy_prior(energy, K: int) -> np.ndarray:
    """Log mean expert energy, shifted so the top-K/rest boundary sits at zero.

    As a bias this selects the K experts with the largest mean energy and keeps
    the boundary experts in the sigmoid's responsive range.
    """
    return _centre_on_boundary(np.log(np.asarray(energy).mean(axis=0) + 1e-300), K)


def regression_init(feats, energy, K: int, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    """Ridge fit of per-sequence log expert energy on the router features.

    At the mean feature vector the logits are the mean log energies, shifted
    so the top-K boundary sits at zero.  The penalty is ``ridge * N`` on
    (standardized) features.
    """
    N, n = feats.shape
    le = np.log(np.asarray(energy) + 1e-300)
    centre = feats.mean(axis=0)
    F = feats - centre
    theta = np.linalg.solve(F.T @ F + ridge * N * np.eye(n), F.T @ (le - le.mean(axis=0))).T
    return theta, _centre_on_boundary(le.mean(axis=0), K) - theta @ centre


def fit_router(layer, stats: SequenceStats, cfg: RouterTrainConfig, stream: int = 0):
    """Train one matrix's router; returns ``(RouterParams, per-epoch mean loss)``.

    Optimisation runs on standardized router inputs (``(h - mu) / sd``); the
    result is folded back so the returned router is linear in the raw input.
    """
    _check_orthogonal(layer)
    N, n = stats.h.shape
    r, K = layer.r_store, layer.K
    if N == 0:
        raise ValueError("empty corpus")
    if cfg.standardize:
        mu, sd = stats.h.mean(axis=0), stats.h.std(axis=0) + 1e-8
    else:
        mu, sd = np.zeros(n), np.ones(n)
    feats = (stats.h - mu) / sd
    if cfg.init == "regression":
        theta, bias = regression_init(feats, stats.energy, K, cfg.init_ridge)
    else:
        theta = np.zeros((r, n))
        bias = energy_prior(stats.energy, K) if cfg.init == "energy" else np.zeros(r)
    m_t, v_t = np.zeros_like(theta), np.zeros_like(theta)
    m_b, v_b = np.zeros_like(bias), np.zeros_like(bias)
    rng = np.random.default_rng([cfg.seed, stream])
    per_epoch = math.ceil(N / cfg.batch_size)
    total = cfg.epochs * per_epoch
    rows = np.arange(cfg.batch_size)[:, None]
    history, step = [], 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(N)
        epoch_loss = 0.0
        for b0 in range(0, N, cfg.batch_size):
            idx = perm[b0:b0 + cfg.batch_size]
            H, E, C = feats[idx], stats.energy[idx], stats.cross[idx]
            logits = H @ theta.T + bias
            chosen = np.argsort(-logits, axis=1, kind="stable")[:, :K]
            m = np.zeros_like(logits)
            m[rows[:len(idx)], chosen] = 1.0
            epoch_loss += float(((E * m - 2.0 * C * m).sum(axis=1) + stats.total[idx]).sum())
            # straight-through: residual at the hard mask, Jacobian of the soft one
            g_m = 2.0 * (E * m - C)
            dz = soft_mask_vjp(logits, g_m, K, cfg.tau, cfg.eps) / len(idx)
            g_theta, g_bias = dz.T @ H, dz.sum(axis=0)
            lr = _lr_at(step, total, cfg)
            step += 1
            c1, c2 = 1.0 - cfg.beta1 ** step, 1.0 - cfg.beta2 ** step
            m_t = cfg.beta1 * m_t + (1 - cfg.beta1) * g_theta
            v_t = cfg.beta2 * v_t + (1 - cfg.beta2) * g_theta ** 2
            m_b = cfg.beta1 * m_b + (1 - cfg.beta1) * g_bias
            v_b = cfg.beta2 * v_b + (1 - cfg.beta2) * g_bias ** 2
            theta *= 1.0 - lr * cfg.weight_decay
            theta -= lr * (m_t / c1) / (np.sqrt(v_t / c2) + 1e-8)
            bias -= lr * (m_b / c1) / (np.sqrt(v_b / c2) + 1e-8)
        history.append(epoch_loss / N)
    raw = theta / sd
    return RouterParams(raw, bias - raw @ mu, cfg.tau, cfg.eps), history


@dataclass
class RouterTraining:
    routers: dict
    history: dict


def train_router(fm, dense: ToyLM, corpus, cfg: RouterTrainConfig, tensor_ids=None,
                 stats: dict | None = None) -> RouterTraining:
    """Train every matrix's router against dense outputs; factors stay frozen."""
    if len(corpus) == 0 and stats is None:
        raise ValueError("empty corpus")
    tensor_ids = list(tensor_ids or fm.layers)
    stats = stats or collect_stats(fm, dense, corpus, tensor_ids)
    routers, history = {}, {}
    for k, tid in enumerate(tensor_ids):
        routers[tid], history[tid] = fit_router(fm.layers[tid], stats[tid], cfg, stream=k)
    return RouterTraining(routers, history)


def selection_losses(stats: SequenceStats, selections) -> np.ndarray:
    """Per-sequence loss for a list of selections (one per sequence)."""
    m = np.zeros_like(stats.energy)
    for s, sel in enumerate(selections):
        m[s, sel.array] = 1.0
    return stats.loss(m)


def routed_selections(router: RouterParams, stats: SequenceStats, K: int) -> list:
    logits = stats.h @ router.theta.T + router.bias
    return [select_topk(z, K) for z in logits]


def oracle_selections(stats: SequenceStats, K: int) -> list:
    # orthogonal experts: dropping i costs energy_i, so the best set keeps the top-K gains
    return [top_k(2.0 * c - e, K) for e, c in zip(stats.energy, stats.cross)]


def leave_one_out(n_experts: int, loss_without) -> np.ndarray:
    """``loss_without(i) - loss_without(None)`` for every expert ``i``."""
    base = loss_without(None)
    return np.array([loss_without(i) - base for i in range(n_experts)])


def connection_sensitivity(fm, eval_sequences, tensor_ids) -> dict:
    """Leave-one-out LM cross-entropy increase for each expert of each listed matrix.

    Intended for full-rank models (every stored expert active in the baseline).
    """
    out = {}
    for tid in tensor_ids:
        layer = fm.layers[tid]
        everyone = list(range(layer.r_store))

        def loss_without(i, tid=tid, everyone=everyone):
            keep = RankSelection(tuple(everyone if i is None else everyone[:i] + everyone[i + 1:]))
            model = _Overridden(fm, {tid: keep})
            return mean_cross_entropy(model, eval_sequences)

        out[tid] = leave_one_out(layer.r_store, loss_without)
    return out


class _Overridden:
    def __init__(self, fm, overrides):
        from .experts import AllSelector

        self.fm, self.overrides, self.selector = fm, overrides, AllSelector()

    def forward(self, tokens, kv=None):
        proj = FactorizedProjector(self.fm.layers, self.selector, overrides=self.overrides)
        return self.fm.base.forward(tokens, kv=kv, projector=proj)


def save_routers(directory, routers: dict, cfg: RouterTrainConfig, history: dict | None = None):
    from pathlib import Path

    from . import checkpoint

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for tid in sorted(routers):
        r = routers[tid]
        blob = np.concatenate([r.theta, r.bias[:, None]], axis=1)
        entries[tid] = {**checkpoint.write_blob(directory / f"router_{tid}.f64", blob, "f64"),
                        "tau": r.tau, "eps": r.eps}
    meta = {"format_version": checkpoint.FORMAT_VERSION, "routers": entries,
            "train_cfg": cfg.to_dict(), "seed": cfg.seed,
            "epoch_loss": {k: [float(v) for v in h] for k, h in (history or {}).items()}}
    (directory / "routers.json").write_text(checkpoint.dumps(meta), encoding="utf-8")
    return directory


def load_routers(directory) -> dict:
    import json
    from pathlib import Path

    from . import checkpoint

    directory = Path(directory)
    path = directory / "routers.json"
    if not path.exists():
        raise FileNotFoundError(f"no router manifest at {path}")
    meta = json.loads(path.read_text(encoding="utf-8"))
    out = {}
    for tid, e in meta["routers"].items():
        blob = checkpoint.read_blob(directory, e)
        out[tid] = RouterParams(blob[:, :-1], blob[:, -1], e["tau"], e["eps"])
    return out
