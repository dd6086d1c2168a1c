"""Rank experts: each column pair ``(a_i, b_i)`` of a factorized layer is one
rank-1 term ``a_i b_i^T`` that can be switched on or off independently.

Layer-level functions use the column convention ``X`` of shape ``(n, tokens)``
and return ``(m, tokens)``.  :class:`FactorizedProjector` adapts them to the
row-major activations used inside the language model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .lm import Projector


@dataclass(frozen=True)
class RankSelection:
    """Strictly increasing expert indices, ``K = len(indices)``."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("selection indices must be strictly increasing")
        if idx and idx[0] < 0:
            raise ValueError("negative expert index")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices: Iterable[int]) -> "RankSelection":
        idx = sorted(int(i) for i in indices)
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate expert index")
        return cls(tuple(idx))

    @classmethod
    def prefix(cls, K: int) -> "RankSelection":
        return cls(tuple(range(K)))

    @property
    def K(self) -> int:
        return len(self.indices)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)

    def check(self, layer) -> "RankSelection":
        if self.K < 1:
            raise ValueError("a selection needs K >= 1")
        if self.indices[-1] >= layer.r_store:
            raise IndexError(f"expert {self.indices[-1]} out of range for r_store={layer.r_store}")
        return self

    def __or__(self, other: "RankSelection") -> "RankSelection":
        return RankSelection.of(set(self.indices) | set(other.indices))


def top_k(scores, K: int) -> RankSelection:
    """Indices of the ``K`` largest scores, ties toward the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= K <= scores.shape[0]:
        raise ValueError(f"K={K} out of range for {scores.shape[0]} scores")
    order = np.argsort(-scores, kind="stable")[:K]
    return RankSelection(tuple(np.sort(order).tolist()))


def expert_output(layer, i: int, x) -> np.ndarray:
    """``a_i (b_i^T x)`` for a vector or a column matrix ``x``."""
    if not 0 <= i < layer.r_store:
        raise IndexError(f"expert {i} out of range for r_store={layer.r_store}")
    x = np.asarray(x, dtype=np.float64)
    coef = layer.B[:, i] @ x
    return np.multiply.outer(layer.A[:, i], coef) if x.ndim == 2 else layer.A[:, i] * coef


def masked_forward(layer, sel: RankSelection, X) -> np.ndarray:
    """Sum of the selected experts applied to ``X``, in ascending expert order."""
    sel.check(layer)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != layer.n:
        raise ValueError(f"X has {X.shape[0]} rows, layer expects {layer.n}")
    idx = sel.array
    return layer.A[:, idx] @ (layer.B[:, idx].T @ X)


def reconstruction_loss(layer, sel: RankSelection, X, dense_out) -> float:
    """``||masked_forward - dense_out||_F^2``."""
    out = masked_forward(layer, sel, X)
    dense_out = np.asarray(dense_out, dtype=np.float64)
    if dense_out.shape != out.shape:
        raise ValueError(f"dense_out shape {dense_out.shape} != {out.shape}")
    diff = out - dense_out
    return float(np.vdot(diff, diff))


def expert_energies(layer, X) -> np.ndarray:
    """``c_i = ||a_i||^2 * sum_t (b_i^T x_t)^2`` for every stored expert.

    Because the columns of ``A`` are mutually orthogonal, the experts' outputs
    are orthogonal too, so dropping a set of experts costs exactly the sum of
    their energies.
    """
    Z = layer.B.T @ np.asarray(X, dtype=np.float64)
    return np.einsum("ij,ij->j", layer.A, layer.A) * np.einsum("it,it->i", Z, Z)


def oracle_select(layer, X, K: int) -> RankSelection:
    """Loss-minimising K-subset for inputs ``X`` (top-K energies)."""
    return top_k(expert_energies(layer, X), K)


class Selector:
    """Decides which experts a projection uses for a given input."""

    per_sequence = False

    def select(self, tensor_id: str, layer, x: np.ndarray) -> RankSelection:
        """``x`` holds the rows (tokens) of a single sequence, shape ``(T, n)``."""
        raise NotImplementedError


class StaticSelector(Selector):
    """Fixed prefix ``{0..K-1}``: plain truncated SVD."""

    def __init__(self):
        self._cache = {}

    def select(self, tensor_id, layer, x):
        sel = self._cache.get(tensor_id)
        if sel is None or sel.K != layer.K:
            sel = self._cache[tensor_id] = RankSelection.prefix(layer.K)
        return sel


class FrozenSelector(Selector):
    """Serves a fixed per-matrix pattern; ``observer`` sees every input untouched."""

    def __init__(self, pattern: dict, observer=None):
        self.pattern = pattern
        self.observer = observer

    def select(self, tensor_id, layer, x):
        if self.observer is not None:
            self.observer(tensor_id, layer, x)
        return self.pattern[tensor_id]


class AllSelector(Selector):
    """Every stored expert."""

    def select(self, tensor_id, layer, x):
        return RankSelection.prefix(layer.r_store)


class FactorizedProjector(Projector):
    """Scattered-read execution: gather the selected columns, then two matmuls."""

    def __init__(self, layers: dict, selector: Selector, dtype=np.float64, overrides: dict | None = None):
        self.layers = layers
        self.selector = selector
        self.dtype = np.dtype(dtype).type
        self.overrides = overrides or {}
        self._factors = {}

    def _ab(self, tensor_id):
        f = self._factors.get(tensor_id)
        if f is None:
            layer = self.layers[tensor_id]
            f = self._factors[tensor_id] = (layer.A.astype(self.dtype), layer.B.astype(self.dtype))
        return f

    def _apply(self, tensor_id, sel, x):
        A, B = self._ab(tensor_id)
        idx = sel.array
        return (x @ B[:, idx]) @ A[:, idx].T

    def project(self, tensor_id, x):
        layer = self.layers[tensor_id]
        if tensor_id in self.overrides:
            return self._apply(tensor_id, self.overrides[tensor_id], x)
        if self.selector.per_sequence and x.ndim == 3 and x.shape[0] > 1:
            return np.stack([self._apply(tensor_id, self.selector.select(tensor_id, layer, xi), xi)
                             for xi in x])
        sel = self.selector.select(tensor_id, layer, x.reshape(-1, x.shape[-1]))
        return self._apply(tensor_id, sel, x)
