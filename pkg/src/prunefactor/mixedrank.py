"""Mixed-rank fine-tuning of factorized models.

Each factorized layer carries both its low-rank pair (A, B) and the sparse
"shadow" matrix it was factorized from. During fine-tuning every step draws
a Bernoulli gate per factorized layer: gate 1 routes that layer through the
shadow matrix, gate 0 through A B. The gate probability p_t starts at
p_init and decays linearly to zero, so training ends on the pure low-rank
model that will be served; evaluation always uses the low-rank path.

Two independently gated forward passes run per step. The loss is

    0.5 * (L1 + L2) + lambda * L_c

where L_c is a consistency term tying the two outputs together: symmetric
KL between the softmax distributions for classification, mean squared
output difference for regression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import AdamW, Dataset, MlpModel, TrainConfig

CLASSIFICATION = nn.CLASSIFICATION


@dataclass
class MixedRankConfig:
    p_init: float = 0.5
    decay: float | None = None        # per-step drop; None = p_init / (T / 2)
    consistency_weight: float = 1.0   # lambda

    def __post_init__(self):
        if not 0.0 <= self.p_init <= 1.0:
            raise ValueError("p_init must lie in [0, 1]")
        if self.decay is not None and self.decay < 0:
            raise ValueError("decay must be non-negative")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be non-negative")

    def resolved_decay(self, total_steps):
        if self.decay is not None:
            return self.decay
        return self.p_init / (total_steps / 2.0)


def p_schedule(p_init, decay, step) -> float:
    """Gate probability p_t = max(0, p_init - decay * t)."""
    if not 0.0 <= p_init <= 1.0:
        raise ValueError("p_init must lie in [0, 1]")
    if decay < 0:
        raise ValueError("decay must be non-negative")
    if step < 0:
        raise ValueError("step must be non-negative")
    return max(0.0, p_init - decay * step)


def sample_gates(num_layers, p, rng):
    """One {0,1} gate per factorized layer; 1 selects the shadow path."""
    if num_layers == 0:
        return ()
    return tuple(int(u < p) for u in rng.random(num_layers))


def mixed_forward(model: MlpModel, batch, gates):
    """Logits with explicit per-factorized-layer path selection."""
    expected = len(model.factorized_indices())
    if len(gates) != expected:
        raise ValueError(f"expected {expected} gates, got {len(gates)}")
    return nn.forward(model, batch, gates)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def consistency_loss(out1, out2, task) -> float:
    """Batch-mean consistency penalty between two forward passes.

    classification: 0.5 * (KL(p1 || p2) + KL(p2 || p1)) per sample, with
    p1, p2 the softmax distributions of the two logit sets.
    regression: squared difference of the scalar outputs per sample.
    """
    return consistency_loss_and_grads(out1, out2, task)[0]


def consistency_loss_and_grads(out1, out2, task):
    """consistency_loss plus its gradients w.r.t. both logit sets."""
    if out1.shape != out2.shape:
        raise ValueError("output shapes differ")
    n = out1.shape[0]
    if task == CLASSIFICATION:
        lp = _log_softmax(out1)
        lq = _log_softmax(out2)
        p = np.exp(lp)
        q = np.exp(lq)
        u = lp - lq
        loss = float(0.5 * np.sum((p - q) * u) / n)
        pu = np.sum(p * u, axis=1, keepdims=True)
        qu = np.sum(q * u, axis=1, keepdims=True)
        d1 = 0.5 * (p * (u - pu) + (p - q)) / n
        d2 = 0.5 * (q * (qu - u) + (q - p)) / n
        return loss, d1, d2
    diff = out1 - out2
    loss = float(np.sum(diff * diff) / n)
    d1 = 2.0 * diff / n
    return loss, d1, -d1


@dataclass
class MixedRankResult:
    model: MlpModel
    losses: list = field(default_factory=list)         # total per step
    task_losses: list = field(default_factory=list)    # 0.5 * (L1 + L2)
    consistency_losses: list = field(default_factory=list)
    p_history: list = field(default_factory=list)
    gate_history: list = field(default_factory=list)   # (z1, z2) per step


def mixed_rank_finetune(
    model: MlpModel,
    dataset: Dataset,
    config: TrainConfig,
    mixed: MixedRankConfig | None = None,
    streams=None,
):
    """Fine-tune a factorized model with stochastic rank mixing.

    Uses the same batch stream construction as plain training, with gates
    drawn from a separate stream, so a run with p_init = 0 sees exactly the
    batches a plain fine-tune would. Parameters touched by neither forward
    pass in a step (for example the shadow matrices while both gates come
    up 0) receive no optimizer update that step. Mutates the model in place.
    """
    if mixed is None:
        mixed = MixedRankConfig()
    factorized = model.factorized_indices()
    if not factorized:
        raise ValueError("model has no factorized layers")
    if streams is None:
        streams = nn.rng_streams(config.seed)
    decay = mixed.resolved_decay(config.total_steps)
    lam = mixed.consistency_weight
    batches = nn.batch_stream(len(dataset), config.batch_size, streams["shuffle"])
    gate_rng = streams["gates"]
    opt = AdamW(config)
    params = model.parameters()
    for i in factorized:
        params[(i, "shadow")] = model.layers[i].shadow
    result = MixedRankResult(model)

    for step in range(config.total_steps):
        idx = next(batches)
        x = dataset.features[idx]
        y = dataset.labels[idx]
        p_t = p_schedule(mixed.p_init, decay, step)
        z1 = sample_gates(len(factorized), p_t, gate_rng)
        z2 = sample_gates(len(factorized), p_t, gate_rng)

        out1, caches1 = nn.forward_cached(model, x, z1)
        out2, caches2 = nn.forward_cached(model, x, z2)
        loss1, d1 = nn.task_loss(model, out1, y)
        loss2, d2 = nn.task_loss(model, out2, y)
        task_part = 0.5 * (loss1 + loss2)
        d1 = 0.5 * d1
        d2 = 0.5 * d2
        cons_part = 0.0
        if lam > 0.0:
            cons_part, c1, c2 = consistency_loss_and_grads(out1, out2, model.task)
            d1 = d1 + lam * c1
            d2 = d2 + lam * c2

        grads = nn.backward(model, caches1, d1)
        for key, g in nn.backward(model, caches2, d2).items():
            grads[key] = grads[key] + g if key in grads else g
        opt.step(params, grads)
        nn.apply_masks(model)

        result.losses.append(task_part + lam * cons_part)
        result.task_losses.append(task_part)
        result.consistency_losses.append(cons_part)
        result.p_history.append(p_t)
        result.gate_history.append((z1, z2))
    return result
