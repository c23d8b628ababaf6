"""Distances between clients, similarity weights and parameter averaging.

Every aggregation reads a snapshot of the round's parameters, and all sums
run in an order that does not depend on how clients are numbered.
"""
import math
from typing import TYPE_CHECKING, List, Optional, Sequence, Union

import numpy as np

from adapters.utils import as_matrix, frob_distance, stable_sum
from federation.models import ClientState, SimilarityMatrix
from lorafed.exceptions import ConfigurationError, StructuralError

if TYPE_CHECKING:
    from adapters.models import LoraMlp

Members = Sequence[Union[ClientState, "LoraMlp"]]


def _models(members: Members) -> List["LoraMlp"]:
    return [m.model if isinstance(m, ClientState) else m for m in members]


def adapter_names(model: "LoraMlp", factor: str) -> List[str]:
    """Tensor names of every layer's ``A`` or ``B`` factor."""
    return [f"layers.{i}.{factor}" for i in range(len(model.layers))]


HEAD_NAMES = ["head.weight", "head.bias"]


def fedavg_weights(sizes: Sequence[int], weighting: str = "size") -> np.ndarray:
    """FedAvg client weights: proportional to train-split size, or uniform."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if weighting == "uniform" or sizes.sum() == 0:
        return np.full(sizes.size, 1.0 / sizes.size)
    return sizes / sizes.sum()


def pairwise_b_distance(
    members: Members, psi: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Mean over psi-selected layers of the Frobenius distance between B's.

    Layers with psi = 0 are never read.
    """
    models = _models(members)
    psi = list(models[0].psi if psi is None else psi)
    if len(psi) != len(models[0].layers):
        raise ConfigurationError(f"psi has {len(psi)} flags for {len(models[0].layers)} layers")
    if sum(psi) == 0:
        raise ConfigurationError("psi selects no layer for the distance")

    n = len(models)
    dist = np.zeros((n, n))
    for layer, flag in enumerate(psi):
        if not flag:
            continue
        shapes = {m.layers[layer].b.shape for m in models}
        if len(shapes) != 1:
            raise StructuralError(f"layer {layer}: clients disagree on B shape {shapes}")
        for i in range(n):
            for j in range(i + 1, n):
                dist[i, j] += frob_distance(models[i].layers[layer].b, models[j].layers[layer].b)
    dist /= sum(psi)
    return dist + dist.T


def similarity_weights(
    distances: np.ndarray, lam: float, epsilon: float = 1e-8
) -> SimilarityMatrix:
    """Inverse-distance weights, row-normalised, with ``lam`` on the diagonal.

    Off-diagonal weights are ``(1 - lam) / (d_ij + eps)`` normalised over the
    row; a row whose distances are all zero falls back to uniform.
    """
    dist = as_matrix(distances, "distance matrix")
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise StructuralError(f"distance matrix must be square, got {dist.shape}")
    if n < 2:
        raise ConfigurationError("similarity weights need at least two clients")
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be > 0, got {epsilon}")
    if np.any(dist < 0):
        raise StructuralError("distances must be non-negative")

    s = np.zeros((n, n))
    for i in range(n):
        others = np.arange(n) != i
        row = dist[i, others]
        if np.all(row == 0):
            share = np.full(n - 1, 1.0 / (n - 1))
        else:
            inverse = 1.0 / (row + epsilon)
            # fsum is exactly rounded, so the total ignores client order
            share = inverse / math.fsum(inverse)
        s[i, others] = (1.0 - lam) * share
        s[i, i] = lam
    return SimilarityMatrix(s, lam)


def aggregate_epfl(weights: SimilarityMatrix, members: Members) -> Members:
    """``A_i <- sum_j s_ij A_j`` per layer; B's and heads are untouched."""
    models = _models(members)
    s = weights.s
    if s.shape != (len(models), len(models)):
        raise StructuralError(f"weights {s.shape} do not match {len(models)} clients")

    updated = []
    for layer in range(len(models[0].layers)):
        snapshot = np.stack([m.layers[layer].a for m in models])
        low, high = snapshot.min(axis=0), snapshot.max(axis=0)
        rows = []
        for i in range(len(models)):
            mixed = stable_sum(s[i][:, None, None] * snapshot)
            # A convex combination stays in the hull; clip rounding overshoot
            rows.append(np.clip(mixed, low, high))
        updated.append(rows)
    for layer, rows in enumerate(updated):
        for model, a in zip(models, rows):
            model.layers[layer].a[...] = a
    return members


def aggregate_fedavg(
    members: Members, p: Sequence[float], names: Optional[Sequence[str]] = None
) -> "LoraMlp":
    """``sum_i p_i x_i`` for every trainable tensor (or only ``names``).

    Returns a copy of the first model carrying the averaged tensors.
    """
    models = _models(members)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (len(models),):
        raise ConfigurationError(f"{p.size} weights for {len(models)} models")
    if np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-9:
        raise ConfigurationError(f"weights must be non-negative and sum to 1, got {p}")

    result = models[0].copy()
    target = result.trainable()
    for name in names if names is not None else list(target):
        stacked = np.stack([m.trainable()[name] for m in models])
        target[name][...] = stable_sum(p.reshape((-1,) + (1,) * (stacked.ndim - 1)) * stacked)
    return result


def affinity(weights: SimilarityMatrix, clusters: Sequence[int]) -> dict:
    """Mean off-diagonal weight within and across client clusters."""
    clusters = np.asarray(clusters)
    same = clusters[:, None] == clusters[None, :]
    off = ~np.eye(clusters.size, dtype=bool)
    within = weights.s[same & off]
    cross = weights.s[~same]
    return {
        "within": float(within.mean()) if within.size else None,
        "cross": float(cross.mean()) if cross.size else None,
    }
