"""Model-combination rules.

All operators are pure functions over flattened parameter vectors; the
simulator decides when and with whose models they are called. Weighted
averages use dataset-size weights p_ij = |D_j| / sum_k |D_k| scaled by
the edge weight omega_ij.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGY_KINDS = (
    "centralized",
    "isolation",
    "fedavg",
    "decavg_coord",
    "dec_hetero",
    "decdiff",
    "decdiff_vt",
    "cfa",
    "cfa_ge",
)

# strategies whose nodes draw independent initial models
HETERO_INIT = {"isolation", "dec_hetero", "decdiff", "decdiff_vt", "cfa", "cfa_ge"}


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    s: float = 1.0  # distance damping constant for decdiff
    epsilon: float | None = None  # cfa step; None means 1/degree
    beta: float = 0.9  # virtual-teacher confidence
    ge_eta: float | None = None  # cfa_ge gradient step; None means the SGD eta

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.s < 1.0:
            raise ValueError("s must be >= 1")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def neighborhood_weights(sizes, omegas) -> np.ndarray:
    """Normalized per-neighbor weights, proportional to omega_ij * |D_j|."""
    sizes = np.asarray(sizes, dtype=np.float64)
    omegas = np.asarray(omegas, dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("empty neighbor set")
    if np.any(sizes <= 0) or np.any(omegas <= 0):
        raise ValueError("sizes and omegas must be positive")
    raw = omegas * sizes
    return raw / raw.sum()


def decavg_aggregate(own, own_size, neighbor_params, neighbor_sizes, omegas) -> np.ndarray:
    """Neighborhood average including the local model (omega_ii = 1);
    the result replaces the local model."""
    vecs = [np.asarray(own)] + [np.asarray(v) for v in neighbor_params]
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ValueError("parameter length mismatch")
    w = neighborhood_weights([own_size] + list(neighbor_sizes), [1.0] + list(omegas))
    return np.einsum("i,ij->j", w, np.stack(vecs))


def decdiff_average(neighbor_params, neighbor_sizes, omegas) -> np.ndarray:
    """Weighted average of neighbor models only; the local model is
    excluded because it serves as the reference point, not a term."""
    if len(neighbor_params) == 0:
        raise ValueError("isolated node: no neighbors to average")
    vecs = [np.asarray(v) for v in neighbor_params]
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ValueError("parameter length mismatch")
    w = neighborhood_weights(neighbor_sizes, omegas)
    return np.einsum("i,ij->j", w, np.stack(vecs))


def decdiff_update(own, avg, s: float) -> np.ndarray:
    """Move toward the neighborhood average, damped by L2 distance:
    w' = w + (avg - w) / (||avg - w||_2 + s). The step length is
    d / (d + s) < 1 where d is the distance."""
    own = np.asarray(own)
    avg = np.asarray(avg)
    if own.shape != avg.shape:
        raise ValueError("parameter length mismatch")
    if s < 1.0:
        raise ValueError("s must be >= 1")
    diff = avg - own
    return own + diff / (np.linalg.norm(diff) + s)


def cfa_update(own, neighbor_params, neighbor_sizes, epsilon: float) -> np.ndarray:
    """Consensus step: w' = w + eps * sum_j p_ij (w_j - w), with p_ij
    the size weights over neighbors only."""
    if len(neighbor_params) == 0:
        raise ValueError("isolated node: no neighbors")
    own = np.asarray(own)
    vecs = [np.asarray(v) for v in neighbor_params]
    if any(v.shape != own.shape for v in vecs):
        raise ValueError("parameter length mismatch")
    sizes = np.asarray(neighbor_sizes, dtype=np.float64)
    p = sizes / sizes.sum()
    drift = np.einsum("i,ij->j", p, np.stack([v - own for v in vecs]))
    return own + epsilon * drift


def fedavg_aggregate(all_params, sizes) -> np.ndarray:
    """Size-weighted mean over every node (full participation)."""
    if len(all_params) == 0:
        raise ValueError("empty input")
    vecs = [np.asarray(v) for v in all_params]
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ValueError("parameter length mismatch")
    w = np.asarray(sizes, dtype=np.float64)
    w = w / w.sum()
    return np.einsum("i,ij->j", w, np.stack(vecs))


def apply_neighbor_gradients(own, neighbor_grads, eta: float) -> np.ndarray:
    """Second half of the gradient-exchange round: apply the mean of
    the gradients neighbors computed on their local data."""
    own = np.asarray(own)
    grads = [np.asarray(g) for g in neighbor_grads if g is not None]
    if not grads:
        return own.copy()
    return own - eta * np.mean(np.stack(grads), axis=0)
