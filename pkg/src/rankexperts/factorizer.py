"""Whitened SVD compression of the toy LM's projections.

For a projection ``W`` (``m x n``) with calibration inputs ``X`` (``n x d``),
``S = chol(X X^T + jitter I)`` whitens the inputs, ``W S = U diag(sigma) V^T``
is decomposed, and the factors are absorbed as ``A = U diag(sigma)`` and
``B = S^{-T} V`` so that ``W x = A (B^T x)``.  Columns past the compute budget
``K`` are kept (up to ``r_store``) so a router can pick among them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import checkpoint
from .experts import FactorizedProjector, Selector, StaticSelector
from .lm import CapturingProjector, ToyLM, ToyLMConfig, projection_ids, projection_shape
from .numerics import NotPositiveDefiniteError, cholesky_lower, solve_lower_triangular, svd


@dataclass(frozen=True)
class WhiteningTransform:
    S: np.ndarray
    jitter: float

    def inverse_apply(self, X) -> np.ndarray:
        """``S^{-1} X`` by forward substitution."""
        return solve_lower_triangular(self.S, X)

    def whitened_gram(self, gram) -> np.ndarray:
        """``S^{-1} (gram + jitter I) S^{-T}``; the identity when ``gram`` is the calibration Gram."""
        C = np.asarray(gram, dtype=np.float64) + self.jitter * np.eye(self.S.shape[0])
        left = solve_lower_triangular(self.S, C)
        return solve_lower_triangular(self.S, left.T).T


@dataclass
class CompressionConfig:
    ratio: float = 0.2
    whitening: bool = True
    store_multiplier: float = 2.0
    jitter: float | None = None
    density: str = "energy"

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError("ratio must lie in [0, 1)")
        if self.store_multiplier < 1.0:
            raise ValueError("store_multiplier must be >= 1")
        if self.density not in ("energy", "effective_rank"):
            raise ValueError(f"unknown density mode {self.density!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FactorizedLayer:
    layer_id: str
    A: np.ndarray
    B: np.ndarray
    sigma: np.ndarray
    K: int
    whitened: bool = True

    def __post_init__(self):
        if self.A.shape[1] != self.B.shape[1] or self.sigma.shape[0] != self.A.shape[1]:
            raise ValueError("A, B and sigma disagree on r_store")
        if not 1 <= self.K <= self.r_store <= min(self.m, self.n):
            raise ValueError(f"need 1 <= K ({self.K}) <= r_store ({self.r_store}) <= min(m, n)")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def r_store(self) -> int:
        return self.A.shape[1]

    @property
    def rank_max(self) -> int:
        return min(self.m, self.n)

    def with_budget(self, K: int, r_store: int | None = None) -> "FactorizedLayer":
        r = self.r_store if r_store is None else r_store
        return FactorizedLayer(self.layer_id, self.A[:, :r].copy(), self.B[:, :r].copy(),
                               self.sigma[:r].copy(), K, self.whitened)


def default_jitter(gram) -> float:
    gram = np.asarray(gram)
    return 1e-6 * float(np.trace(gram)) / gram.shape[0]


def _whiten_gram(gram, jitter):
    n = gram.shape[0]
    ridge = default_jitter(gram) if jitter is None else float(jitter)
    for attempt in (ridge, max(10.0 * ridge, default_jitter(gram))):
        try:
            return WhiteningTransform(cholesky_lower(gram + attempt * np.eye(n)), attempt)
        except NotPositiveDefiniteError:
            continue
    raise np.linalg.LinAlgError("calibration covariance degenerate")


def whiten(W, X, jitter: float | None = None) -> tuple[WhiteningTransform, np.ndarray]:
    """Whitening factor for inputs ``X`` (``n x d``) and the product ``W S``.

    ``jitter=None`` uses ``1e-6 * trace(X X^T) / n``; on a Cholesky failure the
    ridge is raised tenfold once before giving up.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != W.shape[1]:
        raise ValueError(f"X has {X.shape[0]} rows, W has {W.shape[1]} columns")
    if X.shape[1] < X.shape[0] and jitter == 0:
        raise ValueError("X needs at least n columns when jitter is 0")
    wt = _whiten_gram(X @ X.T, jitter)
    return wt, W @ wt.S


def _layer_from_svd(layer_id, res, S, K, r_store, whitened):
    A = res.U[:, :r_store] * res.sigma[:r_store]
    V = res.V[:, :r_store]
    B = solve_lower_triangular(S, V, transpose=True) if S is not None else V.copy()
    return FactorizedLayer(layer_id, A, B, res.sigma[:r_store].copy(), K, whitened)


def store_rank(K: int, rank_max: int, store_multiplier: float) -> int:
    return min(rank_max, math.ceil(store_multiplier * K))


def factorize_layer(W, X, cfg: CompressionConfig, K: int, layer_id: str = "") -> FactorizedLayer:
    """Whiten (optionally), decompose, truncate to ``r_store`` and absorb the factors."""
    W = np.asarray(W, dtype=np.float64)
    if not 1 <= K <= min(W.shape):
        raise ValueError(f"K={K} out of range for a {W.shape} matrix")
    r_store = store_rank(K, min(W.shape), cfg.store_multiplier)
    if cfg.whitening:
        wt, WS = whiten(W, X, cfg.jitter)
        return _layer_from_svd(layer_id, svd(WS), wt.S, K, r_store, True)
    return _layer_from_svd(layer_id, svd(W), None, K, r_store, False)


def effective_rank(sigma) -> float:
    s = np.asarray(sigma, dtype=np.float64)
    p = s / s.sum()
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


@dataclass(frozen=True)
class BudgetAllocation:
    K: list
    threshold: float
    cost: int
    budget: float


def allocate_budgets_detailed(spectra, dims, ratio: float, density: str = "energy") -> BudgetAllocation:
    """Lagrangian rank allocation under a global parameter budget.

    Rank ``i`` of layer ``l`` costs ``m_l + n_l`` parameters and scores
    ``sigma_{l,i}^2 / (m_l + n_l)``.  Every layer keeps its first rank; the
    remaining ranks are admitted in order of decreasing score (ties: lower
    layer, then lower rank) while the total stays within
    ``(1 - ratio) * sum(m_l n_l)``.  The admitted set is exactly the set of
    ranks scoring at least the threshold, and the first refused rank would
    overflow the budget.  ``ratio == 0`` keeps every rank.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must lie in [0, 1)")
    spectra = [np.asarray(s, dtype=np.float64) for s in spectra]
    dims = [tuple(int(v) for v in d) for d in dims]
    for s in spectra:
        if np.any(np.diff(s) > 0):
            raise ValueError("spectra must be non-increasing")
    budget = (1.0 - ratio) * sum(m * n for m, n in dims)
    costs = np.array([m + n for m, n in dims], dtype=np.int64)
    if ratio == 0.0:
        K = [min(d) for d in dims]
        return BudgetAllocation(K, 0.0, int(sum(k * c for k, c in zip(K, costs))), budget)
    floor = int(costs.sum())
    if floor > budget:
        raise ValueError("ratio too aggressive for K>=1 floor")
    weight = np.ones(len(spectra))
    if density == "effective_rank":
        er = np.array([effective_rank(s) for s in spectra])
        weight = er / er.mean()
    layer_idx, rank_idx, scores = [], [], []
    for l, s in enumerate(spectra):
        r = min(dims[l])
        for i in range(1, min(r, len(s))):
            layer_idx.append(l)
            rank_idx.append(i)
            scores.append(weight[l] * s[i] ** 2 / costs[l])
    layer_idx = np.array(layer_idx, dtype=np.int64)
    rank_idx = np.array(rank_idx, dtype=np.int64)
    scores = np.array(scores, dtype=np.float64)
    # lexsort: last key is primary
    order = np.lexsort((rank_idx, layer_idx, -scores))
    cum = np.cumsum(costs[layer_idx[order]]) if len(order) else np.zeros(0)
    # largest prefix whose cumulative cost fits (bisection over the monotone cumsum)
    take = int(np.searchsorted(cum, budget - floor, side="right"))
    K = [1] * len(spectra)
    for j in order[:take]:
        K[layer_idx[j]] += 1
    threshold = float(scores[order[take - 1]]) if take else math.inf
    cost = int(sum(k * c for k, c in zip(K, costs)))
    return BudgetAllocation(K, threshold, cost, budget)


def allocate_budgets(spectra, dims, ratio: float, density: str = "energy") -> list:
    return allocate_budgets_detailed(spectra, dims, ratio, density).K


def collect_grams(model: ToyLM, sequences, batch: int = 16) -> tuple[dict, int]:
    """Input Gram matrices ``X X^T`` of every projection over ``sequences``."""
    grams: dict = {}
    seen = {}

    def sink(tid, x):
        x2 = x.reshape(-1, x.shape[-1])
        prev = seen.get(id(x))
        if prev is not None and prev[0] is x:
            grams[tid] = grams.get(tid, 0) + prev[1]
            return
        g = x2.T @ x2
        # holding x keeps its id from being recycled within this forward
        seen[id(x)] = (x, g)
        grams[tid] = grams.get(tid, 0) + g

    proj = CapturingProjector(model.dense_projector(), sink)
    tokens = 0
    for chunk in _chunks(sequences, batch):
        seen.clear()
        model.forward(chunk, projector=proj)
        tokens += chunk.size
    return grams, tokens


def _chunks(sequences, batch):
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    i = 0
    while i < len(seqs):
        j = i + 1
        while j < len(seqs) and j - i < batch and len(seqs[j]) == len(seqs[i]):
            j += 1
        yield np.stack(seqs[i:j])
        i = j


@dataclass
class FactorizedModel:
    """Dense base model whose projections are replaced by factorized layers."""

    base: ToyLM
    layers: dict
    cfg: CompressionConfig = field(default_factory=CompressionConfig)
    seeds: dict = field(default_factory=dict)
    selector: Selector = field(default_factory=StaticSelector)

    @property
    def lm_cfg(self) -> ToyLMConfig:
        return self.base.cfg

    def forward(self, tokens, kv=None, selector: Selector | None = None, dtype=np.float64,
                projector=None, overrides: dict | None = None):
        projector = projector or FactorizedProjector(self.layers, selector or self.selector,
                                                     dtype, overrides)
        return self.base.forward(tokens, kv=kv, projector=projector, dtype=dtype)

    def with_selector(self, selector: Selector) -> "FactorizedModel":
        return replace(self, selector=selector)

    def compute_ratio(self) -> float:
        """Fraction of dense projection parameters removed, counting ``K`` experts."""
        dense = sum(l.m * l.n for l in self.layers.values())
        return 1.0 - sum(l.K * (l.m + l.n) for l in self.layers.values()) / dense

    def storage_ratio(self) -> float:
        """Stored factor parameters relative to dense, counting ``r_store`` experts."""
        dense = sum(l.m * l.n for l in self.layers.values())
        return sum(l.r_store * (l.m + l.n) for l in self.layers.values()) / dense


def compress_model(model: ToyLM, calib_corpus, cfg: CompressionConfig, seeds: dict | None = None,
                   grams: dict | None = None) -> FactorizedModel:
    """Factorize all seven projections of every block.

    Calibration activations come from the dense model; budgets are allocated
    jointly over all projections from the (whitened) spectra.
    """
    if grams is None:
        if len(calib_corpus) == 0:
            raise ValueError("calibration corpus is empty")
        grams, _ = collect_grams(model, calib_corpus)
    ids = projection_ids(model.cfg)
    decomps, whiteners = {}, {}
    for tid in ids:
        W = model.weight(tid)
        if cfg.whitening:
            wt = _whiten_gram(grams[tid], cfg.jitter)
            whiteners[tid] = wt.S
            decomps[tid] = svd(W @ wt.S)
        else:
            whiteners[tid] = None
            decomps[tid] = svd(W)
    dims = [projection_shape(model.cfg, tid) for tid in ids]
    Ks = allocate_budgets([decomps[t].sigma for t in ids], dims, cfg.ratio, cfg.density)
    layers = {}
    for tid, K, (m, n) in zip(ids, Ks, dims):
        r_store = store_rank(K, min(m, n), cfg.store_multiplier)
        layers[tid] = _layer_from_svd(tid, decomps[tid], whiteners[tid], K, r_store, cfg.whitening)
    return FactorizedModel(model, layers, cfg, dict(seeds or {}))


def save_factorized(fm: FactorizedModel, directory):
    tensors, kinds = {}, {}
    for name, w in fm.base.weights.items():
        if name not in fm.layers:
            tensors[name], kinds[name] = w, "f32"
    for tid, layer in fm.layers.items():
        tensors[f"{tid}.A"], kinds[f"{tid}.A"] = layer.A, "f64"
        tensors[f"{tid}.B"], kinds[f"{tid}.B"] = layer.B, "f64"
    matrices = {tid: {"m": l.m, "n": l.n, "K": l.K, "r_store": l.r_store,
                      "sigma": [float(s) for s in l.sigma], "whitened": l.whitened}
                for tid, l in fm.layers.items()}
    meta = {"kind": "factorized", "dims": fm.base.cfg.to_dict(), "matrices": matrices,
            "cfg": fm.cfg.to_dict(), "seeds": fm.seeds,
            "compute_ratio": fm.compute_ratio(), "storage_ratio": fm.storage_ratio()}
    return checkpoint.save(directory, tensors, kinds, meta)


def load_factorized(directory) -> FactorizedModel:
    manifest, tensors = checkpoint.load(directory)
    if manifest.get("kind") != "factorized":
        raise ValueError(f"{directory} is not a factorized checkpoint")
    cfg = ToyLMConfig(**manifest["dims"])
    base_w = {k: v for k, v in tensors.items() if not k.endswith((".A", ".B"))}
    for tid in projection_ids(cfg):
        # projections live only as factors; keep shape-correct placeholders
        base_w[tid] = np.zeros(projection_shape(cfg, tid))
    layers = {}
    for tid, meta in manifest["matrices"].items():
        layers[tid] = FactorizedLayer(tid, tensors[f"{tid}.A"], tensors[f"{tid}.B"],
                                      np.asarray(meta["sigma"], dtype=np.float64), meta["K"],
                                      meta["whitened"])
    return FactorizedModel(ToyLM(cfg, base_w), layers, CompressionConfig(**manifest["cfg"]),
                           manifest.get("seeds", {}))
