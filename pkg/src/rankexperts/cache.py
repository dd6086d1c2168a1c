"""Prompt-embedding keyed cache of per-matrix rank selections."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import checkpoint
from .experts import FrozenSelector, RankSelection, StaticSelector
from .router import RouterSelector, score, select_topk


@dataclass(frozen=True)
class PromptEmbedding:
    vec: np.ndarray
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError("prompt embedding must have unit norm")
        object.__setattr__(self, "vec", v)


def embed_prompt(model, tokens, source: str = "") -> PromptEmbedding:
    """Mean over positions of the first block's output at prefill, L2-normalized.

    ``model`` is anything with ``forward``; for a factorized model the caller
    picks the selector used to produce the hidden state.
    """
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise ValueError("empty prompt")
    hidden = model.forward(tokens.reshape(1, -1)).hidden[0][0]
    v = hidden.mean(axis=0).astype(np.float64)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("degenerate embedding")
    return PromptEmbedding(v / norm, source)


def route_prompt(fm, routers: dict, tokens) -> dict:
    """Online routing of one prompt: one selection per matrix from its prefill."""
    sel = RouterSelector(routers)
    fm.forward(np.asarray(tokens).reshape(1, -1), selector=sel)
    return dict(sel.chosen)


def overlap(a: RankSelection, b: RankSelection) -> float:
    if a.K != b.K:
        raise ValueError(f"mismatched K: {a.K} vs {b.K}")
    return len(set(a.indices) & set(b.indices)) / a.K


def pattern_overlap(p: dict, q: dict) -> float:
    """Mean per-matrix overlap of two patterns over the same matrices."""
    if p.keys() != q.keys():
        raise ValueError("patterns cover different matrices")
    return float(np.mean([overlap(p[t], q[t]) for t in p]))


def spearman(xs, ys) -> float:
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("spearman needs two equal-length 1-d sequences")
    if len(xs) < 3:
        raise ValueError("spearman needs at least 3 pairs")
    return float(spearmanr(xs, ys).statistic)


@dataclass
class Retrieval:
    pattern: dict
    similarity: float
    hit: bool
    index: int


@dataclass
class PatternCache:
    """Embeddings (one row per entry) with the pattern built for each."""

    d_model: int
    tensor_ids: tuple
    Ks: dict
    min_similarity: float = 0.0
    capacity: int = 1024
    embeddings: np.ndarray = None
    patterns: list = field(default_factory=list)
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if not -1.0 <= self.min_similarity <= 1.0:
            raise ValueError("min_similarity must lie in [-1, 1]")
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        self.tensor_ids = tuple(self.tensor_ids)
        if self.embeddings is None:
            self.embeddings = np.zeros((0, self.d_model))

    def __len__(self) -> int:
        return len(self.patterns)

    def _check_pattern(self, pattern: dict):
        if set(pattern) != set(self.tensor_ids):
            raise ValueError("pattern must cover every routed matrix")
        for t in self.tensor_ids:
            if pattern[t].K != self.Ks[t]:
                raise ValueError(f"{t}: pattern has K={pattern[t].K}, expected {self.Ks[t]}")

    def insert(self, emb: PromptEmbedding, pattern: dict) -> bool:
        """Append an entry; returns ``False`` when full (no eviction)."""
        if len(self) >= self.capacity:
            return False
        self._check_pattern(pattern)
        self.embeddings = np.vstack([self.embeddings, emb.vec[None, :]])
        self.patterns.append(dict(pattern))
        self.sources.append(emb.source)
        return True

    def similarities(self, emb: PromptEmbedding) -> np.ndarray:
        return self.embeddings @ emb.vec

    def retrieve(self, emb: PromptEmbedding) -> Retrieval:
        if len(self) == 0:
            raise LookupError("empty cache")
        sims = self.similarities(emb)
        i = int(np.argmax(sims))
        s = float(sims[i])
        return Retrieval(self.patterns[i], s, s >= self.min_similarity, i)


def build_cache(fm, routers: dict, prompts, min_similarity: float = 0.0, capacity: int | None = None,
                sources=None, embed_model=None) -> PatternCache:
    """Route every prompt once and store ``(embedding, pattern)``.

    Embeddings come from ``embed_model`` (default: ``fm`` under its static
    prefix selection, which is what a serving path has before any lookup).
    """
    prompts = list(prompts)
    if not prompts:
        raise ValueError("no prompts")
    embed_model = embed_model or fm.with_selector(StaticSelector())
    sources = list(sources) if sources is not None else [str(i) for i in range(len(prompts))]
    cache = PatternCache(fm.lm_cfg.d_model, tuple(routers), {t: fm.layers[t].K for t in routers},
                         min_similarity, capacity or len(prompts))
    for p, src in zip(prompts, sources):
        cache.insert(embed_prompt(embed_model, p, src), route_prompt(fm, routers, p))
    return cache


def serve_pattern(cache: PatternCache, fm, routers: dict, tokens, embed_model=None,
                  insert_on_miss: bool = True) -> tuple[dict, Retrieval]:
    """Pattern for a new prompt: cached on a hit, freshly routed otherwise."""
    embed_model = embed_model or fm.with_selector(StaticSelector())
    emb = embed_prompt(embed_model, tokens)
    got = cache.retrieve(emb)
    if got.hit:
        return got.pattern, got
    fresh = route_prompt(fm, routers, tokens)
    if insert_on_miss:
        cache.insert(emb, fresh)
    return fresh, got


def decode_overlap_curve(fm, routers: dict, prompt, steps: int, measure: bool = True):
    """Greedy decode under the frozen prefill pattern.

    Returns ``(curve, tokens)``: ``curve[t]`` is the mean per-matrix overlap
    between the prefill pattern and what the routers would pick on the step-t
    activation.  Measurement never changes what is served.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    pattern = route_prompt(fm, routers, prompt)
    step_overlaps: list = []

    def observe(tid, layer, x):
        if measure:
            now = select_topk(score(routers[tid], x.mean(axis=0)), layer.K)
            step_overlaps[-1].append(overlap(pattern[tid], now))

    frozen = FrozenSelector(pattern, observe)
    res = fm.forward(np.asarray(prompt).reshape(1, -1), selector=FrozenSelector(pattern))
    kv, out, curve = res.kv, [], []
    for _ in range(steps):
        nxt = int(np.argmax(res.logits[0, -1]))
        out.append(nxt)
        step_overlaps.append([])
        res = fm.forward(np.array([[nxt]]), kv=kv, selector=frozen)
        kv = res.kv
        if measure:
            curve.append(float(np.mean(step_overlaps[-1])))
    return np.array(curve), np.array(out, dtype=np.int64)


def pairwise_similarity_overlap(embeddings, patterns) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and pattern overlap for every unordered pair ``i < j``."""
    E = np.asarray(embeddings)
    iu, ju = np.triu_indices(len(patterns), k=1)
    cos = np.einsum("ij,ij->i", E[iu], E[ju])
    ov = np.array([pattern_overlap(patterns[i], patterns[j]) for i, j in zip(iu, ju)])
    return cos, ov


def save_cache(cache: PatternCache, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    emb = checkpoint.write_blob(directory / "embeddings.f64", cache.embeddings, "f64")
    flat = np.array([i for p in cache.patterns for t in cache.tensor_ids for i in p[t].indices],
                    dtype=np.uint32).reshape(len(cache), -1)
    sel = checkpoint.write_blob(directory / "selections.u32", flat, "u32")
    meta = {"format_version": checkpoint.FORMAT_VERSION, "entries": len(cache),
            "d_model": cache.d_model, "min_similarity": cache.min_similarity,
            "capacity": cache.capacity, "tensor_ids": list(cache.tensor_ids),
            "K": {t: cache.Ks[t] for t in cache.tensor_ids}, "sources": cache.sources,
            "embeddings": emb, "selections": sel}
    (directory / "cache.json").write_text(checkpoint.dumps(meta), encoding="utf-8")
    return directory


def load_cache(directory) -> PatternCache:
    directory = Path(directory)
    path = directory / "cache.json"
    if not path.exists():
        raise FileNotFoundError(f"no cache manifest at {path}")
    meta = json.loads(path.read_text(encoding="utf-8"))
    emb = checkpoint.read_blob(directory, meta["embeddings"]).reshape(-1, meta["d_model"])
    flat = checkpoint.read_blob(directory, meta["selections"]).reshape(meta["entries"], -1)
    tids, Ks = meta["tensor_ids"], meta["K"]
    patterns = []
    for row in flat:
        p, o = {}, 0
        for t in tids:
            p[t] = RankSelection(tuple(int(i) for i in row[o:o + Ks[t]]))
            o += Ks[t]
        patterns.append(p)
    return PatternCache(meta["d_model"], tuple(tids), Ks, meta["min_similarity"], meta["capacity"],
                        emb, patterns, list(meta["sources"]))
