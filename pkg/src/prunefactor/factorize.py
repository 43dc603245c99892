"""Sparsity-aware truncated SVD of pruned weight matrices.

A plain truncated SVD treats every entry of W equally, wasting rank budget
on rows the pruning step already wrote off. Instead we scale each row by an
importance weight s_i, factorize diag(s) W, and fold the scaling back into
the left factor:

    U S V' = svd(diag(s) W),   A = diag(s)^-1 U_k S_k,   B = V_k'

so A B approximates W with row-weighted error |diag(s)(W - AB)|_F minimal.
Row importance comes from the pruning scores (or the mask as a cruder
stand-in), shifted to be positive, normalized to sum 1, and floored so no
row is scaled by exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .linalg import FactorPair, as_matrix, svd, truncate
from .nn import MlpModel

SCORE = "score"
MASK = "mask"
NONE = "none"

SHIFT_DELTA = 1e-12
IMPORTANCE_FLOOR = 1e-6


def row_importance(score, epsilon_floor=IMPORTANCE_FLOOR):
    """Per-row importance from a score matrix: positive, sums to ~1.

    Scores are shifted by their global minimum (plus a tiny delta so rows
    of all-minimal scores stay positive), summed per row, normalized by the
    total, then floored at `epsilon_floor`.
    """
    s = as_matrix(score, "score")
    if epsilon_floor <= 0:
        raise ValueError("epsilon_floor must be positive")
    shifted = s - s.min() + SHIFT_DELTA
    raw = shifted.sum(axis=1)
    out = raw / raw.sum()
    return np.maximum(out, epsilon_floor)


def rank_for_budget(n, m, budget):
    """Largest rank whose factor pair stays within budget * n * m params."""
    if not 0.0 < budget <= 1.0:
        raise ValueError("budget must lie in (0, 1]")
    k = int(round(budget * n * m / (n + m)))
    return max(1, min(k, min(n, m)))


def sparsity_aware_factorize(weight, k, importance=None):
    """Rank-k factor pair for `weight`, biased toward important rows.

    With `importance` None every row gets equal weight and the result is the
    ordinary truncated SVD. Returns a FactorPair (A: n x k, B: k x m).
    """
    w = as_matrix(weight, "weight")
    n, m = w.shape
    if not 1 <= k <= min(n, m):
        raise ValueError(f"rank {k} outside [1, {min(n, m)}]")
    if importance is None:
        imp = np.full(n, 1.0 / n)
    else:
        imp = np.asarray(importance, dtype=np.float64).reshape(-1)
        if imp.shape[0] != n:
            raise ValueError("importance length must equal row count")
        if np.any(imp <= 0):
            raise ValueError("importance entries must be positive")
    scaled = svd(imp[:, None] * w)
    pair = truncate(scaled, k)
    return FactorPair(pair.a / imp[:, None], pair.b, k)


@dataclass
class FactorizeReport:
    layer_ranks: dict        # layer index -> chosen rank
    errors: dict             # layer index -> |W - AB|_F on the shadow matrix


def _resolve_ranks(model: MlpModel, targets, rank):
    ranks = {}
    for pos, i in enumerate(targets):
        lay = model.layers[i]
        n, m = lay.weight.shape
        if isinstance(rank, (list, tuple)):
            if len(rank) != len(targets):
                raise ValueError("per-layer rank list length mismatch")
            k = int(rank[pos])
        elif isinstance(rank, float):
            k = rank_for_budget(n, m, rank)
        else:
            k = int(rank)
        if not 1 <= k <= min(n, m):
            raise ValueError(f"rank {k} invalid for layer {i} of shape {n}x{m}")
        ranks[i] = k
    return ranks


def factorize_model(model: MlpModel, rank, weighting=SCORE, layers=None):
    """Replace sparse layers with factorized ones; returns a FactorizeReport.

    rank: int (same k everywhere), float in (0, 1] (per-layer parameter
    budget as a fraction of n * m), or a list of ints, one per target layer.

    weighting: "score" uses pruning-score row importance, "mask" uses the
    mask's row sums under the same convention, "none" is a plain truncated
    SVD. By default every sparse layer except the final classifier layer is
    factorized; pass explicit `layers` to override. The original sparse
    weight is retained on the layer as its shadow matrix.
    """
    if weighting not in (SCORE, MASK, NONE):
        raise ValueError(f"unknown weighting {weighting!r}")
    if layers is None:
        layers = [
            i
            for i, lay in enumerate(model.layers[:-1])
            if lay.kind == nn.SPARSE
        ]
    if not layers:
        raise ValueError("no layers to factorize")
    for i in layers:
        lay = model.layers[i]
        if lay.kind != nn.SPARSE:
            raise ValueError(f"layer {i} is not sparse")
        if weighting == SCORE and lay.score is None:
            raise ValueError(f"layer {i} has no scores for score weighting")
    ranks = _resolve_ranks(model, layers, rank)
    errors = {}
    for i in layers:
        lay = model.layers[i]
        if weighting == SCORE:
            imp = row_importance(lay.score)
        elif weighting == MASK:
            imp = row_importance(lay.mask)
        else:
            imp = None
        masked = lay.weight * lay.mask
        pair = sparsity_aware_factorize(masked, ranks[i], imp)
        errors[i] = float(np.linalg.norm(masked - pair.product()))
        lay.to_factorized(pair)
    return FactorizeReport(ranks, errors)
