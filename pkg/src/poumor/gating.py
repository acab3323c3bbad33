"""Spatial gating: softmax partitions of unity over torus coordinates."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import diffcore as dc
from .experts import mlp_apply, mlp_init
from .spectral import GridSpec


def embed_coords(theta) -> np.ndarray:
    """[sin th_1..sin th_d, cos th_1..cos th_d] along a new last axis."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        theta = theta[None]
    return np.concatenate([np.sin(theta), np.cos(theta)], axis=-1)


def grid_embedding(grid: GridSpec) -> np.ndarray:
    """(n_1, ..., n_d, 2d) embedding of every grid point's torus angles."""
    return embed_coords(np.stack(grid.angles(), axis=-1))


class GatingNetwork:
    """MLP from the 2d-dim coordinate embedding to I softmax gates.

    The logits head starts at zero, so the initial partition is uniform.
    Gates depend on position only.
    """

    kind = "mlp"

    def __init__(self, grid: GridSpec, n_experts: int, hidden=(64, 64), name: str = "gate"):
        if n_experts < 1:
            raise ValueError("need at least one expert")
        self.grid = grid
        self.n_experts = n_experts
        self.hidden = tuple(hidden)
        self.name = name
        self.features = grid_embedding(grid)

    @property
    def sizes(self):
        return [2 * self.grid.d, *self.hidden, self.n_experts]

    def init(self, rng) -> dict[str, np.ndarray]:
        return mlp_init(rng, self.sizes, self.name, zero_last=True)

    def logits(self, params: Mapping):
        return mlp_apply(params, self.features, self.name, len(self.sizes) - 1)

    def __call__(self, params: Mapping, batch: int | None = None):
        return dc.softmax(self.logits(params), axis=-1)

    def to_dict(self):
        return {"kind": "mlp", "n_experts": self.n_experts, "hidden": list(self.hidden)}


class FixedGates:
    """Predefined gates: nonnegative weights that sum to one at every point.

    ``weights`` has shape (n_1..n_d, I).  Per-sample gates (B, n_1..n_d, I)
    are supplied at call time instead (see :meth:`POUModel.apply_pou`).
    """

    kind = "fixed"

    def __init__(self, grid: GridSpec, n_experts: int, weights: np.ndarray | None = None):
        self.grid = grid
        self.n_experts = n_experts
        self.weights = None if weights is None else check_partition(weights, n_experts)

    def init(self, rng) -> dict[str, np.ndarray]:
        return {}

    def __call__(self, params: Mapping, batch: int | None = None):
        if self.weights is None:
            raise ValueError("fixed gates need per-sample weights at call time")
        return self.weights

    def to_dict(self):
        return {"kind": "fixed", "n_experts": self.n_experts}


def check_partition(weights, n_experts: int | None = None, tol: float = 1e-9) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if n_experts is not None and w.shape[-1] != n_experts:
        raise ValueError(f"gate weights have {w.shape[-1]} experts, expected {n_experts}")
    if np.any(w < 0):
        raise ValueError("gate weights must be nonnegative")
    dev = np.max(np.abs(w.sum(axis=-1) - 1.0))
    if dev > tol:
        raise ValueError(f"gate weights do not sum to one (max deviation {dev:.3e})")
    return w


def fixed_gates(masks, grid: GridSpec | None = None) -> FixedGates:
    """Gate evaluator from a list of masks/weights that partition the grid."""
    w = np.stack([np.asarray(m, dtype=float) for m in masks], axis=-1)
    if grid is None:
        grid = GridSpec(w.shape[:-1])
    return FixedGates(grid, w.shape[-1], w)


def gate_weights(gating, params: Mapping) -> np.ndarray:
    return np.asarray(dc.value(gating(params)))
