"""Rank, parameter, FLOPs, and sparsity-pattern diagnostics.

Conventions:

* FLOPs count 2 ops per multiply-accumulate. A dense or sparse n x m layer
  costs 2nm + 2n per sample (matmul, bias, activation); a rank-k factorized
  layer costs 2k(n+m) + 2n. Unstructured sparsity does not reduce FLOPs:
  zeros are stored and multiplied explicitly, which is exactly why pruned
  matrices get factorized.
* "kept" parameter counts drop pruned weight entries (sparse: mask nonzeros;
  factorized: k(n+m) dense factor entries); biases always count.
* Sparsity patterns export as ASCII PGM (P2, maxval 1, kept = white) plus a
  per-row nonzero-count CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .linalg import (
    DEFAULT_RANK_TOL,
    as_matrix,
    frobenius_error,
    numerical_rank,
    svd,
    truncate,
)
from .nn import MlpModel


def layer_flops(layer) -> int:
    n = layer.out_dim
    if layer.kind == nn.FACTORIZED:
        m = layer.factors.b.shape[1]
        return 2 * layer.factors.k * (n + m) + 2 * n
    return 2 * n * layer.weight.shape[1] + 2 * n


def flops_per_sample(model: MlpModel) -> int:
    """Total per-sample FLOPs over all layers."""
    return sum(layer_flops(lay) for lay in model.layers)


def _weight_params(layer) -> int:
    n = layer.out_dim
    if layer.kind == nn.FACTORIZED:
        m = layer.factors.b.shape[1]
        return layer.factors.k * (n + m)
    if layer.kind == nn.SPARSE:
        return int(np.count_nonzero(layer.mask))
    return int(np.count_nonzero(layer.weight))


def layer_stats(layer, name, rank_tol=DEFAULT_RANK_TOL) -> dict:
    n = layer.out_dim
    m = layer.in_dim
    eff = layer.effective_weight()
    kept = _weight_params(layer)
    return {
        "name": name,
        "kind": layer.kind,
        "shape": (n, m),
        "k": layer.factors.k if layer.kind == nn.FACTORIZED else None,
        "nonzeros": kept,
        "kept_fraction": kept / (n * m),
        "numerical_rank": numerical_rank(eff, rank_tol),
        "zero_row_fraction": float(np.mean(~np.any(eff != 0.0, axis=1))),
        "weight_params": kept,
        "param_count": kept + n,
        "dense_params": n * m + n,
        "flops": layer_flops(layer),
    }


@dataclass
class ModelStats:
    layers: list = field(default_factory=list)
    total_params: int = 0        # dense-equivalent storage, sum of nm + n
    kept_params: int = 0         # pruned zeros excluded, factors counted dense
    flops_per_sample: int = 0
    average_rank: float = 0.0    # mean numerical rank over factorizable layers
    rank_tol: float = DEFAULT_RANK_TOL   # tolerance every rank figure used

    def as_dict(self):
        return {
            "layers": [dict(entry) for entry in self.layers],
            "total_params": self.total_params,
            "kept_params": self.kept_params,
            "flops_per_sample": self.flops_per_sample,
            "average_rank": self.average_rank,
            "rank_tol": self.rank_tol,
        }


def model_stats(model: MlpModel, rank_tol=DEFAULT_RANK_TOL) -> ModelStats:
    """Per-layer and total size/rank statistics.

    Factorizable layers (every layer except the final classifier) define
    average_rank; a single-layer model averages over that one layer.
    """
    entries = [
        layer_stats(lay, f"layer{i}", rank_tol) for i, lay in enumerate(model.layers)
    ]
    factorizable = entries[:-1] if len(entries) > 1 else entries
    return ModelStats(
        layers=entries,
        total_params=sum(e["dense_params"] for e in entries),
        kept_params=sum(e["param_count"] for e in entries),
        flops_per_sample=sum(e["flops"] for e in entries),
        average_rank=float(np.mean([e["numerical_rank"] for e in factorizable])),
        rank_tol=rank_tol,
    )


def sparsity_pattern_export(layer, pgm_path=None, csv_path=None):
    """0/1 kept-entry grid of a sparse layer; optionally written to disk.

    The PGM is ASCII P2 with maxval 1, so kept entries render white. The CSV
    has one row per matrix row: `row,nonzeros`.
    """
    if layer.kind != nn.SPARSE:
        raise ValueError("sparsity pattern export needs a sparse layer")
    grid = (layer.mask != 0.0).astype(np.int64)
    if pgm_path is not None:
        n, m = grid.shape
        lines = ["P2", f"{m} {n}", "1"]
        lines += [" ".join(str(v) for v in row) for row in grid]
        with open(pgm_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "nonzeros"])
            for r, count in enumerate(grid.sum(axis=1)):
                writer.writerow([r, int(count)])
    return grid


def approximation_curves(w_list, k_grid, names=None, csv_path=None):
    """Truncation error and spectrum mass per (matrix, k).

    Returns a list of row dicts {matrix, k, error, relative_error,
    cumulative_fraction} using plain (unweighted) truncation; optionally
    writes them as CSV.
    """
    if names is None:
        names = [f"matrix{i}" for i in range(len(w_list))]
    if len(names) != len(w_list):
        raise ValueError("one name per matrix required")
    rows = []
    for name, w in zip(names, w_list):
        w = as_matrix(w, name)
        decomp = svd(w)
        norm = float(np.linalg.norm(w))
        total = float(decomp.sigma.sum())
        for k in k_grid:
            if not 1 <= k <= decomp.r:
                raise ValueError(f"k={k} outside [1, {decomp.r}] for {name}")
            err = frobenius_error(w, truncate(decomp, int(k)).product())
            frac = float(decomp.sigma[:k].sum() / total) if total > 0 else 1.0
            rows.append(
                {
                    "matrix": name,
                    "k": int(k),
                    "error": err,
                    "relative_error": err / norm if norm > 0 else 0.0,
                    "cumulative_fraction": frac,
                }
            )
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=["matrix", "k", "error", "relative_error", "cumulative_fraction"],
            )
            writer.writeheader()
            writer.writerows(rows)
    return rows
