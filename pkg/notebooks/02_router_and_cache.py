"""
Routing and pattern reuse on a tiny model
=========================================

Runs the small pipeline configuration used by the tests, then compares static,
routed and oracle selections on held-out text from each domain and shows how a
cached pattern is served to a new prompt.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from rankexperts import cache, pipeline, router
from rankexperts.config import load_config
from rankexperts.experts import RankSelection

root = Path(__file__).resolve().parent.parent
cfg = load_config(root / "tests" / "data" / "tiny.json")
cfg.out = Path(tempfile.mkdtemp()) / "run"
pipeline.run_all(cfg, figures=[], bench=False)

# %%
fm, dense = pipeline.load_compressed(cfg), pipeline.load_dense(cfg)
routers = pipeline.load_trained_routers(cfg)
held = [s for k in cfg.corpus.domains for s in pipeline.heldout_set(cfg, k, n=8)]
stats = router.collect_stats(fm, dense, held)
for tid, st in stats.items():
    K = fm.layers[tid].K
    losses = [router.selection_losses(st, sel).mean() for sel in (
        [RankSelection.prefix(K)] * len(st.h),
        router.routed_selections(routers[tid], st, K),
        router.oracle_selections(st, K))]
    print(f"{tid:14s} static {losses[0]:9.3f} routed {losses[1]:9.3f} oracle {losses[2]:9.3f}")

# %% [markdown]
# A prompt from the arithmetic domain retrieves its nearest cached pattern.

# %%
built = pipeline.load_built_cache(cfg)
prompt = pipeline.heldout_set(cfg, "arithmetic", 1, 32)[0]
pattern, got = cache.serve_pattern(built, fm, routers, prompt, insert_on_miss=False)
print(f"hit={got.hit} cosine={got.similarity:.4f} entry={got.index}")
fresh = cache.route_prompt(fm, routers, prompt)
print("overlap with freshly routed pattern:", cache.pattern_overlap(fresh, pattern))
