"""
Whitened factorization of one projection
========================================

A single random layer, calibrated on correlated inputs.  Whitening makes each
stored rank-one term's contribution to the activation error equal to its
singular value, which is what lets a cheap energy score stand in for the loss.
"""

# %%
import numpy as np

from rankexperts.experts import RankSelection, expert_energies, oracle_select, reconstruction_loss
from rankexperts.factorizer import CompressionConfig, factorize_layer

rng = np.random.default_rng(0)
n, m, T = 24, 32, 400
mix = rng.normal(size=(n, n)) * np.linspace(3.0, 0.1, n)
X = mix @ rng.normal(size=(n, T))
W = rng.normal(size=(m, n))

# %% [markdown]
# Keep every term (``store_multiplier`` large) with a budget of 8 experts.

# %%
layer = factorize_layer(W, X, CompressionConfig(jitter=0.0, store_multiplier=10.0), K=8)
loss = np.linalg.norm(layer.A, axis=0) * np.linalg.norm(layer.B.T @ X, axis=1)
print("max |loss_i - sigma_i| / sigma_i:", np.max(np.abs(loss - layer.sigma) / layer.sigma))

# %% [markdown]
# On a new batch the best 8 experts are no longer the first 8.

# %%
Xn = mix @ (rng.normal(size=(n, 60)) + rng.normal(size=(n, 1)) * 2.0)
Y = W @ Xn
static = RankSelection.prefix(8)
best = oracle_select(layer, Xn, 8)
print("energies:", np.round(expert_energies(layer, Xn)[:12], 1))
print("static loss", reconstruction_loss(layer, static, Xn, Y))
print("oracle loss", reconstruction_loss(layer, best, Xn, Y), best.indices)
