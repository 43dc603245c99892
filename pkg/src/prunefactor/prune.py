"""Unstructured weight pruning driven by a cubic kept-fraction schedule.

Scores come in two flavours:

* zero_order  -- |W|, recomputed from the current weights at every prune event
* first_order -- accumulated negative gradient-weight products,
                 S += -(dL/dW) * W, summed over every training step; large
                 positive entries mark weights the loss pushes away from zero

At each prune event the ceil(v * n * m) highest-scoring entries of each
weight matrix are kept and the rest are zeroed. Gradients pass through the
mask unchanged (straight-through), so pruned weights can keep accumulating
score and re-enter the kept set at a later event.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import AdamW, Dataset, MlpModel, TrainConfig

ZERO_ORDER = "zero_order"
FIRST_ORDER = "first_order"


@dataclass
class SparsitySchedule:
    """Cubic decay of the kept fraction v_t from v_init down to v_final.

    The fraction holds at v_init for the first `warmup_steps`, decays
    cubically over the middle window, and holds at v_final for the last
    `cooldown_steps` of the `total_steps` step run.
    """

    total_steps: int
    warmup_steps: int
    cooldown_steps: int
    v_final: float
    v_init: float = 1.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.warmup_steps < 0 or self.cooldown_steps < 0:
            raise ValueError("schedule phases must be non-negative")
        if self.warmup_steps + self.cooldown_steps >= self.total_steps:
            raise ValueError("warmup + cooldown must leave a decay window")
        if not 0.0 < self.v_final <= self.v_init <= 1.0:
            raise ValueError("need 0 < v_final <= v_init <= 1")


def schedule_v(schedule: SparsitySchedule, step) -> float:
    """Kept fraction v_t at integer step t in [0, total_steps]."""
    t = int(step)
    if t < 0 or t > schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps}]")
    t_i = schedule.warmup_steps
    t_f = schedule.cooldown_steps
    big_t = schedule.total_steps
    if t < t_i:
        return schedule.v_init
    if t >= big_t - t_f:
        return schedule.v_final
    frac = (big_t - t_f - t) / (big_t - t_f - t_i)
    return schedule.v_final + (schedule.v_init - schedule.v_final) * frac**3


def magnitude_scores(model: MlpModel):
    """Zero-order importance |W| for each prunable (sparse) layer."""
    return {
        i: np.abs(lay.weight)
        for i, lay in enumerate(model.layers)
        if lay.kind == nn.SPARSE
    }


def accumulate_first_order(scores, grads, model: MlpModel):
    """Add the step's movement term -(dL/dW) * W into each score matrix.

    Must be called with the weights the gradient was computed at, i.e.
    before the optimizer update. Mutates `scores` in place.
    """
    for i, s in scores.items():
        g = grads.get((i, "weight"))
        if g is None:
            raise KeyError(f"no weight gradient for layer {i}")
        s -= g * model.layers[i].weight
    return scores


def prune_to(weight, score, v):
    """Binary mask keeping the ceil(v * n * m) highest-scoring entries.

    Ties break toward the smaller row-major flat index. Returns (mask,
    pruned weight) without mutating the inputs; pruned entries are exactly 0.
    """
    if not 0.0 < v <= 1.0:
        raise ValueError("kept fraction must lie in (0, 1]")
    if weight.shape != score.shape:
        raise ValueError("weight and score shapes differ")
    keep = int(np.ceil(v * weight.size))
    # stable sort on -score: equal scores keep ascending flat-index order
    order = np.argsort(-score.ravel(), kind="stable")[:keep]
    mask = np.zeros(weight.size)
    mask[order] = 1.0
    mask = mask.reshape(weight.shape)
    return mask, weight * mask


@dataclass
class PruneEvent:
    step: int
    kept_fraction: float
    nonzeros: dict            # layer index -> nonzero count
    numerical_ranks: dict = field(default_factory=dict)


@dataclass
class PruneResult:
    model: MlpModel
    losses: list
    events: list


def _prunable(model: MlpModel, layers=None):
    if layers is None:
        layers = [i for i, lay in enumerate(model.layers) if lay.kind == nn.SPARSE]
    for i in layers:
        if model.layers[i].kind != nn.SPARSE:
            raise ValueError(f"layer {i} is not sparse")
    return layers


def mark_prunable(model: MlpModel, layers=None):
    """Give each selected dense layer an all-ones mask and zero scores."""
    if layers is None:
        layers = range(len(model.layers))
    for i in layers:
        lay = model.layers[i]
        if lay.kind == nn.DENSE:
            lay.to_sparse(np.zeros_like(lay.weight), np.ones_like(lay.weight))
    return model


def run_pruning(
    model: MlpModel,
    dataset: Dataset,
    config: TrainConfig,
    schedule: SparsitySchedule,
    method=FIRST_ORDER,
    prune_interval=16,
    layers=None,
    streams=None,
    track_ranks=False,
):
    """Train while pruning toward the schedule's final kept fraction.

    Every step: compute loss and straight-through gradients, fold the step
    into first-order scores (when that method is active), re-mask every
    `prune_interval` steps at the scheduled fraction, apply the AdamW
    update, then re-zero masked weights. A final prune event at
    t = total_steps pins each layer at exactly ceil(v_final * n * m)
    nonzeros. The model is mutated in place.
    """
    if method not in (ZERO_ORDER, FIRST_ORDER):
        raise ValueError(f"unknown pruning method {method!r}")
    if schedule.total_steps != config.total_steps:
        raise ValueError("schedule and training config disagree on total_steps")
    if prune_interval < 1:
        raise ValueError("prune_interval must be >= 1")
    mark_prunable(model, layers)
    targets = _prunable(model, layers)
    if streams is None:
        streams = nn.rng_streams(config.seed)
    batches = nn.batch_stream(len(dataset), config.batch_size, streams["shuffle"])
    opt = AdamW(config)
    params = model.parameters()
    scores = {i: model.layers[i].score for i in targets}
    losses = []
    events = []

    def prune_event(step):
        if method == ZERO_ORDER:
            for i in targets:
                model.layers[i].score = np.abs(model.layers[i].weight)
                scores[i] = model.layers[i].score
        v = schedule_v(schedule, step)
        nonzeros = {}
        ranks = {}
        for i in targets:
            lay = model.layers[i]
            lay.mask, lay.weight = prune_to(lay.weight, scores[i], v)
            params[(i, "weight")] = lay.weight
            # count kept positions: a just-readmitted weight is still 0.0
            nonzeros[i] = int(np.count_nonzero(lay.mask))
            if track_ranks:
                from .linalg import numerical_rank

                ranks[i] = numerical_rank(lay.weight)
        events.append(PruneEvent(step, v, nonzeros, ranks))

    for step in range(config.total_steps):
        idx = next(batches)
        loss, grads = nn.loss_and_grads(model, dataset.features[idx], dataset.labels[idx])
        losses.append(loss)
        if method == FIRST_ORDER:
            accumulate_first_order(scores, grads, model)
        if step % prune_interval == 0:
            prune_event(step)
        opt.step(params, grads)
        nn.apply_masks(model)
    prune_event(config.total_steps)
    return PruneResult(model, losses, events)
