"""
Window perplexity and calibration mismatch
==========================================

Reads the figure tables written by ``rankexperts all`` and prints the headline
numbers.  Pass the run directory as the first argument.
"""

# %%
import sys
from pathlib import Path

from rankexperts.pipeline import read_csv

out = Path(sys.argv[1] if len(sys.argv) > 1 else "run") / "observe"

# %%
for fig in ("ppl_windows", "calib_grid", "similarity_overlap", "decode_overlap", "sensitivity"):
    path = out / f"{fig}_summary.csv"
    if not path.exists():
        print(fig, "missing")
        continue
    print(f"== {fig}")
    for row in read_csv(path):
        print("  ", ", ".join(f"{k}={v}" for k, v in row.items()))
