"""Serving factorized projections: contiguous expert layouts and fused launch plans.

A "launch" is one planned matrix multiply.  Counts are exact; wall-clock
numbers from :func:`bench` are only meaningful relative to each other.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .experts import RankSelection
from .lm import Projector

VARIANTS = ("scattered-unfused", "aggregated-only", "fused-only", "aggregated+fused")
BENCH_COLUMNS = ("variant", "ratio", "batch", "seq_len", "phase", "median_ms",
                 "launches_per_block", "storage_ratio")


def count_runs(columns) -> int:
    """Number of maximal runs of consecutive integers in ``columns`` (order kept)."""
    cols = list(columns)
    return sum(1 for i, c in enumerate(cols) if i == 0 or c != cols[i - 1] + 1)


@dataclass
class AggregatedLayer:
    """One factor buffer per side: shared experts first, then one residual block per pattern.

    Columns ``[0, n_shared)`` hold the shared experts; pattern ``p`` owns
    ``[offset[p], offset[p] + len(residual_ids[p]))``.  A pattern lacking
    some shared expert keeps its whole selection in its own block and skips
    the shared range.
    """

    layer_id: str
    psi: float
    shared_ids: tuple
    residual_ids: dict
    offsets: dict
    A_buf: np.ndarray
    B_buf: np.ndarray
    order: dict = field(repr=False, default_factory=dict)
    uses_shared: dict = field(default_factory=dict)

    @property
    def n_shared(self) -> int:
        return len(self.shared_ids)

    @property
    def shared_A(self) -> np.ndarray:
        return self.A_buf[:, :self.n_shared]

    @property
    def shared_B(self) -> np.ndarray:
        return self.B_buf[:, :self.n_shared]

    def residual_block(self, pattern_id) -> tuple[np.ndarray, np.ndarray]:
        o, k = self.offsets[pattern_id], len(self.residual_ids[pattern_id])
        return self.A_buf[:, o:o + k], self.B_buf[:, o:o + k]

    def _shared_for(self, pattern_id) -> tuple:
        return self.shared_ids if self.uses_shared.get(pattern_id, True) else ()

    def selection(self, pattern_id) -> RankSelection:
        return RankSelection.of(self._shared_for(pattern_id) + self.residual_ids[pattern_id])

    def columns(self, pattern_id) -> list:
        """Buffer columns read to serve ``pattern_id``, in read order."""
        if pattern_id not in self.offsets:
            raise KeyError(f"unknown pattern {pattern_id!r}")
        o, k = self.offsets[pattern_id], len(self.residual_ids[pattern_id])
        return list(range(len(self._shared_for(pattern_id)))) + list(range(o, o + k))

    def read(self, pattern_id, trace: list | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Selected ``(A, B)`` columns in ascending expert order, via two slices."""
        if pattern_id not in self.offsets:
            raise KeyError(f"unknown pattern {pattern_id!r}")
        n = len(self._shared_for(pattern_id))
        sA, sB = self.A_buf[:, :n], self.B_buf[:, :n]
        rA, rB = self.residual_block(pattern_id)
        if trace is not None:
            trace.append(("A", self.columns(pattern_id)))
            trace.append(("B", self.columns(pattern_id)))
        perm = self.order[pattern_id]
        return np.concatenate([sA, rA], axis=1)[:, perm], np.concatenate([sB, rB], axis=1)[:, perm]

    def stored_columns(self) -> int:
        return self.A_buf.shape[1]


def aggregate_layout(layer, patterns, psi: float = 0.9) -> AggregatedLayer:
    """Build the shared/residual layout for ``patterns`` (list or ``{id: RankSelection}``)."""
    if not 0 < psi <= 1:
        raise ValueError("psi must lie in (0, 1]")
    if not isinstance(patterns, dict):
        patterns = dict(enumerate(patterns))
    if not patterns:
        raise ValueError("no patterns to aggregate")
    for sel in patterns.values():
        sel.check(layer)
    counts = np.zeros(layer.r_store)
    for sel in patterns.values():
        counts[sel.array] += 1
    # ascending index is descending sigma
    shared = tuple(int(i) for i in np.flatnonzero(counts >= psi * len(patterns) - 1e-12))
    shared_set = set(shared)
    residual, offsets, uses, blocks = {}, {}, {}, [np.asarray(shared, dtype=np.int64)]
    pos = len(shared)
    for pid, sel in patterns.items():
        uses[pid] = shared_set <= set(sel.indices)
        res = tuple(i for i in sel.indices if not uses[pid] or i not in shared_set)
        residual[pid], offsets[pid] = res, pos
        blocks.append(np.asarray(res, dtype=np.int64))
        pos += len(res)
    cols = np.concatenate(blocks)
    order = {pid: np.argsort(np.asarray((shared if uses[pid] else ()) + residual[pid]), kind="stable")
             for pid in patterns}
    return AggregatedLayer(layer.layer_id, psi, shared, residual, offsets,
                           np.ascontiguousarray(layer.A[:, cols]), np.ascontiguousarray(layer.B[:, cols]),
                           order, uses)


def aggregated_forward(agg: AggregatedLayer, pattern_id, X, trace: list | None = None) -> np.ndarray:
    """Column-convention forward (``X`` is ``n x T``) through the aggregated layout."""
    A, B = agg.read(pattern_id, trace)
    return A @ (B.T @ np.asarray(X))


def aggregate_model(fm, cache_patterns: list, psi: float = 0.9, tensor_ids=None) -> dict:
    """Aggregated layout per matrix from a list of cached patterns (ids = list positions)."""
    tensor_ids = tensor_ids or list(fm.layers)
    return {t: aggregate_layout(fm.layers[t], [p[t] for p in cache_patterns], psi) for t in tensor_ids}


def aggregated_storage_ratio(fm, aggs: dict) -> float:
    dense = sum(l.m * l.n for l in fm.layers.values())
    return sum(aggs[t].stored_columns() * (l.m + l.n) for t, l in fm.layers.items()) / dense


@dataclass(frozen=True)
class LaunchDescriptor:
    kind: str
    block: int
    tensor_ids: tuple
    shapes: tuple


@dataclass
class ExecPlan:
    launches: list
    n_blocks: int
    gqa: bool
    fused: bool

    def per_block(self) -> list:
        return [sum(1 for d in self.launches if d.block == b) for b in range(self.n_blocks)]


_GROUPS = (("q", "k", "v"), ("o",), ("up", "gate"), ("down",))


def build_plan(fm, pattern: dict, gqa: bool | None = None, fused: bool = True) -> ExecPlan:
    """Launch descriptors for one forward under ``pattern``.

    Fused: inputs shared by several projections get one ``fused_B`` over the
    concatenated selected ``B`` columns; their ``A`` sides are one
    ``batched_A`` per distinct output width (so grouped-query attention, whose
    q is wider than k/v, needs two).  Unfused: a ``single`` B and A per matrix.
    """
    cfg = fm.lm_cfg
    if gqa is None:
        gqa = cfg.gqa
    if gqa != cfg.gqa:
        raise ValueError(f"gqa={gqa} does not match the model (n_kv_heads={cfg.n_kv_heads})")
    launches = []
    for b in range(cfg.n_blocks):
        for group in _GROUPS:
            tids = tuple(f"blocks.{b}.{p}" for p in group)
            layers = [fm.layers[t] for t in tids]
            Ks = [pattern[t].K for t in tids]
            if fused and len(group) > 1:
                launches.append(LaunchDescriptor("fused_B", b, tids, ((layers[0].n, sum(Ks)),)))
                by_m: dict = {}
                for t, l, k in zip(tids, layers, Ks):
                    by_m.setdefault(l.m, []).append((t, k))
                for m, members in by_m.items():
                    launches.append(LaunchDescriptor("batched_A", b, tuple(t for t, _ in members),
                                                     tuple((m, k) for _, k in members)))
            else:
                for t, l, k in zip(tids, layers, Ks):
                    launches.append(LaunchDescriptor("single", b, (t,), ((l.n, k),)))
                    launches.append(LaunchDescriptor("single", b, (t,), ((l.m, k),)))
    return ExecPlan(launches, cfg.n_blocks, gqa, fused)


class PlanProjector(Projector):
    """Replays an :class:`ExecPlan`, fetching factors scattered or from an aggregated layout."""

    def __init__(self, fm, pattern: dict, plan: ExecPlan, aggs: dict | None = None, pattern_id=None,
                 dtype=np.float64):
        self.fm, self.plan, self.dtype = fm, plan, np.dtype(dtype).type
        self.launches = 0
        self.trace: list = []
        self._factors = {}
        for t in fm.layers:
            if aggs is not None:
                A, B = aggs[t].read(pattern_id, self.trace)
            else:
                idx = pattern[t].array
                A, B = fm.layers[t].A[:, idx], fm.layers[t].B[:, idx]
            self._factors[t] = (A.astype(self.dtype), B.astype(self.dtype))
        self._fused = {}
        for d in plan.launches:
            if d.kind == "fused_B":
                Bs = [self._factors[t][1] for t in d.tensor_ids]
                self._fused["B", d.tensor_ids] = (np.concatenate(Bs, axis=1),
                                             np.cumsum([B.shape[1] for B in Bs])[:-1])
            elif d.kind == "batched_A":
                kmax = max(k for _, k in d.shapes)
                stack = np.zeros((len(d.tensor_ids), kmax, d.shapes[0][0]), dtype=self.dtype)
                for g, t in enumerate(d.tensor_ids):
                    A = self._factors[t][0]
                    stack[g, :A.shape[1]] = A.T
                self._fused["A", d.tensor_ids] = stack
        self._batched = {}
        for d in plan.launches:
            if d.kind == "batched_A":
                for t in d.tensor_ids:
                    self._batched[t] = d

    def _check(self, t, x):
        if x.shape[-1] != self.fm.layers[t].n:
            raise ValueError(f"{t}: input width {x.shape[-1]} does not match plan ({self.fm.layers[t].n})")

    def project(self, tensor_id, x):
        self._check(tensor_id, x)
        A, B = self._factors[tensor_id]
        self.launches += 2
        return (x @ B) @ A.T

    def _group(self, block, names, x):
        tids = tuple(f"blocks.{block}.{p}" for p in names)
        if not self.plan.fused:
            return [self.project(t, x) for t in tids]
        self._check(tids[0], x)
        Bcat, splits = self._fused["B", tids]
        self.launches += 1
        zs = np.split(x @ Bcat, splits, axis=-1)
        z_of = dict(zip(tids, zs))
        out = {}
        lead = x.shape[:-1]
        for d in dict.fromkeys(self._batched[t] for t in tids):
            stack = self._fused["A", d.tensor_ids]
            kmax = stack.shape[1]
            Z = np.zeros((len(d.tensor_ids), int(np.prod(lead)), kmax), dtype=self.dtype)
            for g, t in enumerate(d.tensor_ids):
                z = z_of[t].reshape(-1, z_of[t].shape[-1])
                Z[g, :, :z.shape[1]] = z
            self.launches += 1
            Y = np.matmul(Z, stack)
            for g, t in enumerate(d.tensor_ids):
                out[t] = Y[g].reshape(*lead, -1)
        return [out[t] for t in tids]

    def qkv(self, block, h):
        return self._group(block, ("q", "k", "v"), h)

    def gate_up(self, block, h):
        u, g = self._group(block, ("up", "gate"), h)
        return g, u


def make_projector(fm, variant: str, pattern: dict, aggs: dict | None = None, pattern_id=None,
                   dtype=np.float64) -> PlanProjector:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    fused = variant in ("fused-only", "aggregated+fused")
    aggregated = variant in ("aggregated-only", "aggregated+fused")
    if aggregated and (aggs is None or pattern_id is None):
        raise ValueError("aggregated variants need layouts and a pattern id")
    plan = build_plan(fm, pattern, fused=fused)
    return PlanProjector(fm, pattern, plan, aggs if aggregated else None, pattern_id, dtype)


def fused_forward(fm, projector: PlanProjector, tokens, kv=None, phase: str = "prefill"):
    """Run the language model through ``projector``; decode consumes/extends ``kv``."""
    if phase not in ("prefill", "decode"):
        raise ValueError(f"unknown phase {phase!r}")
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if phase == "decode":
        if kv is None:
            raise ValueError("decode needs a KV cache")
        if tokens.shape[1] != 1:
            raise ValueError("decode consumes one token per row")
    elif kv is not None:
        raise ValueError("prefill starts from an empty KV cache")
    return fm.base.forward(tokens, kv=kv, projector=projector, dtype=projector.dtype)


def launches_per_block(fm, variant: str, pattern: dict, aggs=None, pattern_id=None) -> float:
    proj = make_projector(fm, variant, pattern, aggs, pattern_id)
    fm.base.forward(np.zeros((1, 1), dtype=np.int64), projector=proj)
    return proj.launches / fm.lm_cfg.n_blocks


def _median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench(fm, cache_patterns: list, batch_sizes=(1, 8), seq_len: int = 64, repeats: int = 5,
          psi: float = 0.9, variants=VARIANTS, ratio: float | None = None, seed: int = 0) -> list:
    """Median wall-clock for prefill and one decode step per variant; returns CSV rows."""
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    aggs = aggregate_model(fm, cache_patterns, psi)
    pattern, pid = cache_patterns[0], 0
    ratio = fm.cfg.ratio if ratio is None else ratio
    rng = np.random.default_rng(seed)
    rows = []
    for variant in variants:
        aggregated = variant in ("aggregated-only", "aggregated+fused")
        storage = aggregated_storage_ratio(fm, aggs) if aggregated else fm.storage_ratio()
        for bsz in batch_sizes:
            tokens = rng.integers(0, fm.lm_cfg.vocab, (bsz, seq_len))
            # layouts are built offline; timing covers the forward only
            proj = make_projector(fm, variant, pattern, aggs, pid)
            pre = fused_forward(fm, proj, tokens)
            nxt = np.argmax(pre.logits[:, -1], axis=-1)[:, None]
            proj.launches = 0
            fused_forward(fm, proj, nxt, kv=pre.kv, phase="decode")
            lpb = proj.launches / fm.lm_cfg.n_blocks
            t_pre = _median_ms(lambda: fused_forward(fm, proj, tokens), repeats)
            t_dec = _median_ms(lambda: fused_forward(fm, proj, nxt, kv=pre.kv, phase="decode"), repeats)
            for phase, ms in (("prefill", t_pre), ("decode", t_dec)):
                rows.append({"variant": variant, "ratio": ratio, "batch": bsz, "seq_len": seq_len,
                             "phase": phase, "median_ms": round(ms, 4), "launches_per_block": lpb,
                             "storage_ratio": round(storage, 6)})
    return rows
