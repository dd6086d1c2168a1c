"""Pipeline stages shared by the command line and the acceptance suite.

Every stage reads its prerequisites from the output directory and writes its
own artifacts there; re-running a stage with the same config rewrites the same
bytes (the benchmark's wall-clock column excepted).
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import cache as cache_mod
from . import checkpoint, corpus, engine, factorizer, router
from .config import RunConfig, compression_config, lm_config, router_config
from .experts import FrozenSelector, StaticSelector
from .lm import token_nll, window_ppl
from .lm_train import train_lm

FORMAT_VERSION = 1
FIGURES = ("ppl_windows", "calib_grid", "sensitivity", "similarity_overlap", "decode_overlap")
REFERENCE_SPEARMAN = 0.78
REFERENCE_DECODE_OVERLAP = 0.86

# sampling purposes, mixed into the global seed
_CALIB, _ROUTER_TRAIN, _HELDOUT, _STREAM, _STREAM_ORDER, _PROMPTS, _PAIRS, _DECODE = range(1, 9)


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing prerequisite: run '{stage}' first (expected {path})")
        self.stage = stage


def paths(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    return {"dense": out / "dense", "compressed": out / "compressed", "cache": out / "cache",
            "eval": out / "eval.csv", "bench": out / "bench.csv", "observe": out / "observe",
            "index": out / "outputs.json"}


def _seed(cfg, purpose):
    return [cfg.seed, purpose]


def _spec(cfg, kind):
    return corpus.DomainSpec(kind, cfg.seed, cfg.corpus.size)


def write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})
    return path


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _record(cfg, stage, files):
    idx_path = paths(cfg)["index"]
    idx = json.loads(idx_path.read_text()) if idx_path.exists() else {"format_version": FORMAT_VERSION,
                                                                        "stages": {}}
    idx["stages"][stage] = sorted(str(Path(f).relative_to(cfg.out)) for f in files)
    idx_path.parent.mkdir(parents=True, exist_ok=True)
    idx_path.write_text(checkpoint.dumps(idx), encoding="utf-8")


# ---- data ---------------------------------------------------------------

def training_streams(cfg):
    return [corpus.generate(_spec(cfg, k))[:corpus.split_point(cfg.corpus.size, cfg.corpus.holdout)]
            for k in cfg.corpus.domains]


def calibration_set(cfg, domain=None):
    c = cfg.compress
    return corpus.sample_calibration(_spec(cfg, domain or c.calib_domain), c.calib_sequences,
                                     c.calib_seq_len, _seed(cfg, _CALIB), cfg.corpus.holdout)


def router_training_set(cfg):
    r = cfg.router
    return [s for k in cfg.corpus.domains
            for s in corpus.sample_calibration(_spec(cfg, k), r.sequences_per_domain, r.seq_len,
                                               _seed(cfg, _ROUTER_TRAIN), cfg.corpus.holdout)]


def heldout_set(cfg, domain, n=None, seq_len=None, purpose=_HELDOUT):
    e = cfg.eval
    return corpus.sample_heldout(_spec(cfg, domain), n or e.sequences_per_domain, seq_len or e.seq_len,
                                 _seed(cfg, purpose), cfg.corpus.holdout)


def mixed_stream(cfg):
    """Held-out windows from several domains in a seeded order; returns ``(tokens, labels)``."""
    w = cfg.eval.window
    pieces = [(k, s) for k, n in cfg.eval.stream_windows.items() if n > 0
              for s in heldout_set(cfg, k, n, w, _STREAM)]
    order = np.random.default_rng(_seed(cfg, _STREAM_ORDER)).permutation(len(pieces))
    return np.concatenate([pieces[i][1] for i in order]), [pieces[i][0] for i in order]


def prompt_set(cfg, per_domain, length, purpose):
    prompts, labels = [], []
    for k in cfg.corpus.domains:
        ps = heldout_set(cfg, k, per_domain, length, purpose)
        prompts += ps
        labels += [k] * len(ps)
    return prompts, labels


# ---- models -------------------------------------------------------------

def load_dense(cfg):
    p = paths(cfg)["dense"]
    if not (p / "manifest.json").exists():
        raise MissingPrerequisite("train-dense", p)
    return checkpoint.load_dense(p)


def load_compressed(cfg):
    p = paths(cfg)["compressed"]
    if not (p / "manifest.json").exists():
        raise MissingPrerequisite("compress", p)
    return factorizer.load_factorized(p)


def load_trained_routers(cfg):
    p = paths(cfg)["compressed"]
    if not (p / "routers.json").exists():
        raise MissingPrerequisite("train-router", p / "routers.json")
    return router.load_routers(p)


def load_built_cache(cfg):
    p = paths(cfg)["cache"]
    if not (p / "cache.json").exists():
        raise MissingPrerequisite("build-cache", p)
    return cache_mod.load_cache(p)


class CachedModel:
    """Serves each sequence with the cache's pattern (online routing on a miss)."""

    def __init__(self, fm, routers, cache):
        self.fm, self.routers, self.cache = fm, routers, cache
        self.embed_model = fm.with_selector(StaticSelector())

    def forward(self, tokens, kv=None):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        outs = []
        for row in tokens:
            pattern, _ = cache_mod.serve_pattern(self.cache, self.fm, self.routers, row,
                                                 self.embed_model, insert_on_miss=False)
            outs.append(self.fm.forward(row[None, :], kv=kv, selector=FrozenSelector(pattern)))
        outs[0].logits = np.concatenate([o.logits for o in outs])
        return outs[0]


def batch_ppl(model, sequences) -> float:
    """``exp`` of the mean next-token cross-entropy over equal-length sequences."""
    toks = np.stack(sequences)
    logits = model.forward(toks).logits
    nll = np.concatenate([token_nll(l, t) for l, t in zip(logits, toks)])
    return math.exp(float(nll.mean()))


def train_routers_for(cfg, fm, dense, stats=None):
    return router.train_router(fm, dense, router_training_set(cfg), router_config(cfg), stats=stats)


# ---- stages -------------------------------------------------------------

def cmd_train_dense(cfg: RunConfig):
    t = cfg.lm_train
    model = train_lm(lm_config(cfg), training_streams(cfg), steps=t.steps, batch_size=t.batch_size,
                     seq_len=t.seq_len, lr=t.lr, weight_decay=t.weight_decay)
    p = checkpoint.save_dense(model, paths(cfg)["dense"], seeds={"global": cfg.seed})
    _record(cfg, "train-dense", sorted(p.iterdir()))
    return model


def cmd_compress(cfg: RunConfig, ratio: float | None = None):
    dense = load_dense(cfg)
    fm = factorizer.compress_model(dense, calibration_set(cfg), compression_config(cfg, ratio),
                                   seeds={"global": cfg.seed, "calib_domain": cfg.compress.calib_domain})
    p = paths(cfg)["compressed"]
    if p.exists():
        # a new factorization invalidates routers trained on the old one
        for f in list(p.glob("router_*.f64")) + list(p.glob("routers.json")):
            f.unlink()
    factorizer.save_factorized(fm, p)
    _record(cfg, "compress", sorted(p.iterdir()))
    return fm


def cmd_train_router(cfg: RunConfig):
    fm, dense = load_compressed(cfg), load_dense(cfg)
    trained = train_routers_for(cfg, fm, dense)
    p = router.save_routers(paths(cfg)["compressed"], trained.routers, router_config(cfg), trained.history)
    _record(cfg, "train-router", sorted(p.glob("router*")))
    return trained


def cmd_build_cache(cfg: RunConfig):
    fm, routers = load_compressed(cfg), load_trained_routers(cfg)
    c = cfg.cache
    prompts, labels = prompt_set(cfg, c.prompts_per_domain, c.prompt_len, _PROMPTS)
    built = cache_mod.build_cache(fm, routers, prompts, c.min_similarity, len(prompts), labels)
    p = cache_mod.save_cache(built, paths(cfg)["cache"])
    _record(cfg, "build-cache", sorted(p.iterdir()))
    return built


def cmd_eval(cfg: RunConfig):
    dense, fm = load_dense(cfg), load_compressed(cfg)
    pa = paths(cfg)
    models = {"static": fm.with_selector(StaticSelector())}
    if (pa["compressed"] / "routers.json").exists():
        routers = load_trained_routers(cfg)
        models["routed"] = fm.with_selector(router.RouterSelector(routers))
        if (pa["cache"] / "cache.json").exists():
            models["cached"] = CachedModel(fm, routers, load_built_cache(cfg))
    rows = []
    for k in cfg.corpus.domains:
        seqs = heldout_set(cfg, k)
        base = batch_ppl(dense, seqs)
        rows.append({"domain": k, "variant": "dense", "ratio": fm.cfg.ratio, "ppl": base, "delta_ppl": 0.0})
        for name, m in models.items():
            ppl = batch_ppl(m, seqs)
            rows.append({"domain": k, "variant": name, "ratio": fm.cfg.ratio, "ppl": ppl,
                         "delta_ppl": ppl - base})
    write_csv(pa["eval"], ("domain", "variant", "ratio", "ppl", "delta_ppl"), rows)
    _record(cfg, "eval", [pa["eval"]])
    return rows


def cmd_bench(cfg: RunConfig):
    fm = load_compressed(cfg)
    built = load_built_cache(cfg)
    b = cfg.bench
    rows = engine.bench(fm, built.patterns, tuple(b.batch_sizes), b.seq_len, b.repeats, cfg.cache.psi,
                        seed=cfg.seed)
    write_csv(paths(cfg)["bench"], engine.BENCH_COLUMNS, rows)
    _record(cfg, "bench", [paths(cfg)["bench"]])
    return rows


def cmd_observe(cfg: RunConfig, figure: str):
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
    files = globals()[f"observe_{figure}"](cfg)
    _record(cfg, f"observe:{figure}", files)
    return files


def _summary_path(cfg, figure):
    return paths(cfg)["observe"] / f"{figure}_summary.csv"


def _data_path(cfg, figure):
    return paths(cfg)["observe"] / f"{figure}.csv"


def spike_ratio(ppls) -> float:
    ppls = np.asarray(ppls)
    return float(ppls.max() / np.median(ppls))


def observe_ppl_windows(cfg):
    """Per-window PPL on a stream dominated by the calibration domain.

    Uses the stage checkpoints when they were calibrated on
    ``eval.stream_calib_domain``; otherwise compresses and trains routers here.
    """
    dense = load_dense(cfg)
    calib = cfg.eval.stream_calib_domain
    if calib == cfg.compress.calib_domain:
        fm, routers = load_compressed(cfg), load_trained_routers(cfg)
    else:
        fm = factorizer.compress_model(dense, calibration_set(cfg, calib), compression_config(cfg))
        routers = train_routers_for(cfg, fm, dense).routers
    models = {"dense": dense, "static": fm.with_selector(StaticSelector()),
              "routed": fm.with_selector(router.RouterSelector(routers))}
    tokens, labels = mixed_stream(cfg)
    curves = {n: window_ppl(m, tokens, cfg.eval.window) for n, m in models.items()}
    rows = [{"window": i, "domain": labels[i], **{f"{n}_ppl": c[i] for n, c in curves.items()}}
            for i in range(len(labels))]
    data = write_csv(_data_path(cfg, "ppl_windows"), ["window", "domain"] + [f"{n}_ppl" for n in curves],
                     rows)
    summ = [{"model": n, "max_ppl": float(c.max()), "median_ppl": float(np.median(c)),
             "max_over_median": spike_ratio(c)} for n, c in curves.items()]
    s = write_csv(_summary_path(cfg, "ppl_windows"), ("model", "max_ppl", "median_ppl", "max_over_median"),
                  summ)
    return [data, s]


def observe_calib_grid(cfg):
    dense = load_dense(cfg)
    domains = cfg.corpus.domains
    evals = {k: heldout_set(cfg, k) for k in domains}
    base = {k: batch_ppl(dense, s) for k, s in evals.items()}
    train_set = router_training_set(cfg)
    rows, summ = [], []
    for c in domains:
        fm = factorizer.compress_model(dense, calibration_set(cfg, c), compression_config(cfg))
        trained = router.train_router(fm, dense, train_set, router_config(cfg))
        routed = fm.with_selector(router.RouterSelector(trained.routers))
        static = fm.with_selector(StaticSelector())
        for k in domains:
            sp, rp = batch_ppl(static, evals[k]), batch_ppl(routed, evals[k])
            rows.append({"calib": c, "eval": k, "dense_ppl": base[k], "static_ppl": sp,
                         "static_delta": sp - base[k], "routed_ppl": rp, "routed_delta": rp - base[k]})
        mine = [r for r in rows if r["calib"] == c]
        off = [r for r in mine if r["eval"] != c]
        diag = next(r for r in mine if r["eval"] == c)
        summ.append({"calib": c, "static_diag": diag["static_delta"],
                     "static_offdiag_mean": float(np.mean([r["static_delta"] for r in off])),
                     "static_offdiag_worst": max(r["static_delta"] for r in off),
                     "routed_diag": diag["routed_delta"],
                     "routed_offdiag_mean": float(np.mean([r["routed_delta"] for r in off])),
                     "routed_offdiag_worst": max(r["routed_delta"] for r in off)})
    data = write_csv(_data_path(cfg, "calib_grid"), list(rows[0]), rows)
    s = write_csv(_summary_path(cfg, "calib_grid"), list(summ[0]), summ)
    return [data, s]


def observe_sensitivity(cfg):
    dense = load_dense(cfg)
    full = factorizer.compress_model(dense, calibration_set(cfg), compression_config(cfg, ratio=0.0))
    o = cfg.observe
    for t in o.sensitivity_matrices:
        if t not in full.layers:
            raise ValueError(f"unknown matrix {t!r}")
    imp = {d: router.connection_sensitivity(full, heldout_set(cfg, d, o.sensitivity_sequences),
                                            o.sensitivity_matrices)
           for d in o.sensitivity_domains}
    rows, summ = [], []
    for t in o.sensitivity_matrices:
        sigma = full.layers[t].sigma
        for d in o.sensitivity_domains:
            for i, v in enumerate(imp[d][t]):
                rows.append({"tensor": t, "rank": i, "sigma": float(sigma[i]), "domain": d, "importance": v})
        ds = o.sensitivity_domains
        for a in range(len(ds)):
            for b in range(a + 1, len(ds)):
                summ.append({"tensor": t, "domain_a": ds[a], "domain_b": ds[b],
                             "spearman": cache_mod.spearman(imp[ds[a]][t], imp[ds[b]][t])})
    data = write_csv(_data_path(cfg, "sensitivity"), ("tensor", "rank", "sigma", "domain", "importance"), rows)
    s = write_csv(_summary_path(cfg, "sensitivity"), ("tensor", "domain_a", "domain_b", "spearman"), summ)
    return [data, s]


def observe_similarity_overlap(cfg):
    fm, routers = load_compressed(cfg), load_trained_routers(cfg)
    prompts, labels = prompt_set(cfg, cfg.observe.pair_prompts_per_domain, cfg.cache.prompt_len, _PAIRS)
    embed_model = fm.with_selector(StaticSelector())
    embs = np.stack([cache_mod.embed_prompt(embed_model, p).vec for p in prompts])
    pats = [cache_mod.route_prompt(fm, routers, p) for p in prompts]
    cos, ov = cache_mod.pairwise_similarity_overlap(embs, pats)
    iu, ju = np.triu_indices(len(prompts), k=1)
    rows = [{"i": int(i), "j": int(j), "domain_i": labels[i], "domain_j": labels[j],
             "cosine": float(c), "overlap": float(o)} for i, j, c, o in zip(iu, ju, cos, ov)]
    same = np.array([labels[i] == labels[j] for i, j in zip(iu, ju)])
    data = write_csv(_data_path(cfg, "similarity_overlap"), list(rows[0]), rows)
    s = write_csv(_summary_path(cfg, "similarity_overlap"),
                  ("pairs", "spearman", "reference_spearman", "within_domain_overlap", "cross_domain_overlap"),
                  [{"pairs": len(rows), "spearman": cache_mod.spearman(cos, ov),
                    "reference_spearman": REFERENCE_SPEARMAN, "within_domain_overlap": float(ov[same].mean()),
                    "cross_domain_overlap": float(ov[~same].mean())}])
    return [data, s]


def observe_decode_overlap(cfg):
    fm, routers = load_compressed(cfg), load_trained_routers(cfg)
    o = cfg.observe
    prompt = heldout_set(cfg, cfg.compress.calib_domain, 1, o.decode_prompt_len, _DECODE)[0]
    curve, _ = cache_mod.decode_overlap_curve(fm, routers, prompt, o.decode_steps)
    data = write_csv(_data_path(cfg, "decode_overlap"), ("step", "overlap"),
                     [{"step": i + 1, "overlap": float(v)} for i, v in enumerate(curve)])
    s = write_csv(_summary_path(cfg, "decode_overlap"), ("steps", "mean_overlap", "min_overlap",
                                                        "reference_overlap"),
                  [{"steps": len(curve), "mean_overlap": float(curve.mean()) if len(curve) else float("nan"),
                    "min_overlap": float(curve.min()) if len(curve) else float("nan"),
                    "reference_overlap": REFERENCE_DECODE_OVERLAP}])
    return [data, s]


def run_all(cfg: RunConfig, figures=FIGURES, bench: bool = True):
    cmd_train_dense(cfg)
    cmd_compress(cfg)
    cmd_train_router(cfg)
    cmd_build_cache(cfg)
    cmd_eval(cfg)
    if bench:
        cmd_bench(cfg)
    for f in figures:
        cmd_observe(cfg, f)
