"""Minimal feed-forward classifier with manual backprop and AdamW.

The model is a ReLU MLP whose linear layers come in three kinds:

* dense       -- plain weight matrix
* sparse      -- weight with a binary mask and an importance score matrix;
                 the forward pass computes (W * M) x, gradients flow to W as
                 if the mask were absent (straight-through)
* factorized  -- low-rank pair (A, B) plus the retained "shadow" sparse
                 matrix it was factorized from; a per-layer gate selects
                 which path the forward pass takes

Everything is float64 and bit-deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import FactorPair, as_matrix

DENSE = "dense"
SPARSE = "sparse"
FACTORIZED = "factorized"

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int
    total_steps: int
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Dataset:
    features: np.ndarray  # (num_examples, input_dim)
    labels: np.ndarray    # (num_examples,) int class ids or float targets
    task: str = CLASSIFICATION
    num_classes: int | None = None

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("label count must equal feature row count")
        if self.task == CLASSIFICATION:
            if self.num_classes is None:
                raise ValueError("classification dataset needs num_classes")
            self.labels = self.labels.astype(np.int64)
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError("class ids must lie in [0, num_classes)")
        else:
            self.labels = self.labels.astype(np.float64)

    def __len__(self):
        return self.features.shape[0]


class LinearLayer:
    """One affine layer y = W x + b. Bias is never pruned or factorized."""

    def __init__(self, weight, bias):
        self.weight = as_matrix(weight, "weight")
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("bias length must equal output dim")
        self.kind = DENSE
        self.mask = None     # (out, in) of {0.0, 1.0} for sparse/factorized kinds
        self.score = None    # (out, in) importance scores
        self.factors: FactorPair | None = None
        self.shadow = None   # (out, in) retained sparse matrix

    @property
    def out_dim(self):
        return self.bias.shape[0]

    @property
    def in_dim(self):
        if self.kind == FACTORIZED:
            return self.factors.b.shape[1]
        return self.weight.shape[1]

    def to_sparse(self, score, mask):
        if self.kind == FACTORIZED:
            raise ValueError("cannot convert a factorized layer to sparse")
        self.kind = SPARSE
        self.score = np.asarray(score, dtype=np.float64)
        self.mask = np.asarray(mask, dtype=np.float64)
        return self

    def to_factorized(self, pair: FactorPair):
        if self.kind != SPARSE:
            raise ValueError("only sparse layers can be factorized")
        if pair.a.shape[0] != self.out_dim or pair.b.shape[1] != self.weight.shape[1]:
            raise ValueError("factor pair shape does not match layer")
        self.shadow = self.weight
        self.factors = pair
        self.weight = None
        self.kind = FACTORIZED
        return self

    def effective_weight(self):
        """The (out, in) matrix the default forward path multiplies by."""
        if self.kind == DENSE:
            return self.weight
        if self.kind == SPARSE:
            return self.weight * self.mask
        return self.factors.product()

    def copy(self):
        dup = LinearLayer.__new__(LinearLayer)
        dup.weight = None if self.weight is None else self.weight.copy()
        dup.bias = self.bias.copy()
        dup.kind = self.kind
        dup.mask = None if self.mask is None else self.mask.copy()
        dup.score = None if self.score is None else self.score.copy()
        dup.factors = None
        if self.factors is not None:
            dup.factors = FactorPair(self.factors.a.copy(), self.factors.b.copy(), self.factors.k)
        dup.shadow = None if self.shadow is None else self.shadow.copy()
        return dup


class MlpModel:
    """Ordered linear layers with ReLU between them, identity after the last."""

    def __init__(self, layers, task=CLASSIFICATION, num_classes=None):
        if not layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if task == CLASSIFICATION:
            if num_classes is None or layers[-1].out_dim != num_classes:
                raise ValueError("output width must equal num_classes")
        elif layers[-1].out_dim != 1:
            raise ValueError("regression output width must be 1")
        self.layers = list(layers)
        self.task = task
        self.num_classes = num_classes

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    def factorized_indices(self):
        return [i for i, lay in enumerate(self.layers) if lay.kind == FACTORIZED]

    def copy(self):
        return MlpModel([lay.copy() for lay in self.layers], self.task, self.num_classes)

    def parameters(self):
        """Default-path trainable parameters, keyed (layer index, name)."""
        params = {}
        for i, lay in enumerate(self.layers):
            if lay.kind == FACTORIZED:
                params[(i, "factor_a")] = lay.factors.a
                params[(i, "factor_b")] = lay.factors.b
            else:
                params[(i, "weight")] = lay.weight
            params[(i, "bias")] = lay.bias
        return params


def init_mlp(input_dim, hidden_dims, num_classes=None, seed=0, task=CLASSIFICATION):
    """He-initialized MLP: input_dim -> hidden_dims... -> output width."""
    rng = np.random.default_rng(seed)
    out_dim = num_classes if task == CLASSIFICATION else 1
    dims = [input_dim] + list(hidden_dims) + [out_dim]
    layers = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(LinearLayer(w, np.zeros(fan_out)))
    return MlpModel(layers, task=task, num_classes=num_classes)


# ----------------------------------------------------------------- forward --


def _layer_matrix(layer: LinearLayer, gate: int):
    if layer.kind == FACTORIZED and gate == 1:
        return layer.shadow * layer.mask if layer.mask is not None else layer.shadow
    return layer.effective_weight()


def forward_cached(model: MlpModel, batch, gates=None):
    """Forward pass returning (logits, caches) for a later backward call.

    `gates` maps factorized-layer position (0-based among factorized layers)
    to a {0,1} gate: 0 takes the low-rank pair, 1 takes the shadow matrix.
    """
    x = as_matrix(batch, "batch")
    if x.shape[1] != model.input_dim:
        raise ValueError(
            f"batch width {x.shape[1]} does not match input dim {model.input_dim}"
        )
    gate_iter = iter(gates) if gates is not None else None
    caches = []
    h = x
    last = len(model.layers) - 1
    for i, lay in enumerate(model.layers):
        gate = 0
        if lay.kind == FACTORIZED and gate_iter is not None:
            gate = int(next(gate_iter))
        cache = {"x": h, "gate": gate}
        if lay.kind == FACTORIZED and gate == 0:
            t = h @ lay.factors.b.T
            z = t @ lay.factors.a.T + lay.bias
            cache["t"] = t
        else:
            z = h @ _layer_matrix(lay, gate).T + lay.bias
        cache["z"] = z
        h = z if i == last else np.maximum(z, 0.0)
        caches.append(cache)
    return h, caches


def forward(model: MlpModel, batch, gates=None):
    """Logits for a batch; shape (batch_rows, output width)."""
    logits, _ = forward_cached(model, batch, gates)
    return logits


def backward(model: MlpModel, caches, dlogits):
    """Gradients of a scalar loss given d(loss)/d(logits).

    Sparse layers receive the straight-through gradient (mask treated as
    identity). For factorized layers only the path taken in the forward pass
    receives gradient; the other path's entry is absent from the result.
    """
    grads = {}
    delta = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        lay = model.layers[i]
        cache = caches[i]
        if i < len(model.layers) - 1:
            delta = delta * (cache["z"] > 0.0)
        x = cache["x"]
        grads[(i, "bias")] = delta.sum(axis=0)
        if lay.kind == FACTORIZED and cache["gate"] == 0:
            t = cache["t"]
            grads[(i, "factor_a")] = delta.T @ t
            dt = delta @ lay.factors.a
            grads[(i, "factor_b")] = dt.T @ x
            delta = dt @ lay.factors.b
        elif lay.kind == FACTORIZED:
            grads[(i, "shadow")] = delta.T @ x
            delta = delta @ _layer_matrix(lay, 1)
        else:
            grads[(i, "weight")] = delta.T @ x
            delta = delta @ _layer_matrix(lay, 0)
    return grads


# ------------------------------------------------------------------ losses --


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    p = softmax(logits)
    per_sample = -np.log(np.maximum(p[np.arange(n), labels], 1e-300))
    _check_finite_per_sample(per_sample)
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(per_sample.mean()), dlogits / n


def mse(pred, targets):
    """Mean squared error and its gradient w.r.t. the predictions."""
    n = pred.shape[0]
    diff = pred.reshape(n) - targets.reshape(n)
    per_sample = diff * diff
    _check_finite_per_sample(per_sample)
    dpred = (2.0 * diff / n).reshape(pred.shape)
    return float(per_sample.mean()), dpred


def _check_finite_per_sample(per_sample):
    bad = np.nonzero(~np.isfinite(per_sample))[0]
    if bad.size:
        raise FloatingPointError(f"non-finite loss at batch index {bad[0]}")


def task_loss(model: MlpModel, logits, targets):
    if model.task == CLASSIFICATION:
        return cross_entropy(logits, targets)
    return mse(logits, targets)


def loss_and_grads(model: MlpModel, batch, targets, gates=None):
    """Mean task loss and per-parameter gradients for one batch."""
    logits, caches = forward_cached(model, batch, gates)
    loss, dlogits = task_loss(model, logits, targets)
    return loss, backward(model, caches, dlogits)


# --------------------------------------------------------------- optimizer --

# Parameter names subject to decoupled weight decay (biases are exempt).
DECAYED = {"weight", "factor_a", "factor_b", "shadow"}


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Parameters that receive no gradient in a step are skipped entirely: no
    moment update, no decay. State per key: (m, v, step count).
    """

    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate
        self.beta1, self.beta2 = config.betas
        self.eps = config.eps
        self.weight_decay = config.weight_decay
        self.state = {}

    def step(self, params, grads):
        for key in sorted(grads):
            p = params[key]
            g = grads[key]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {key}")
            if key not in self.state:
                self.state[key] = [np.zeros_like(p), np.zeros_like(p), 0]
            m, v, t = self.state[key]
            t += 1
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and key[1] in DECAYED:
                p -= self.lr * self.weight_decay * p
            self.state[key][2] = t


def adamw_step(param, grad, state, config: TrainConfig):
    """Single-tensor AdamW update; `state` is (m, v, t) or None at step 0."""
    if state is None:
        state = [np.zeros_like(param), np.zeros_like(param), 0]
    opt = AdamW(config)
    opt.state[(0, "weight")] = state
    params = {(0, "weight"): param}
    opt.step(params, {(0, "weight"): grad})
    return param, opt.state[(0, "weight")]


# ---------------------------------------------------------------- training --


def rng_streams(seed):
    """Independent deterministic generators for init, shuffling, and gates."""
    init_s, shuffle_s, gate_s = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.default_rng(init_s),
        "shuffle": np.random.default_rng(shuffle_s),
        "gates": np.random.default_rng(gate_s),
    }


def batch_stream(n, batch_size, rng):
    """Endless batch index stream; seeded reshuffle each epoch, tail kept."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def apply_masks(model: MlpModel):
    """Re-zero masked entries of sparse weights and factorized shadows."""
    for lay in model.layers:
        if lay.kind == SPARSE:
            lay.weight *= lay.mask
        elif lay.kind == FACTORIZED and lay.mask is not None:
            lay.shadow *= lay.mask


def train(model: MlpModel, dataset: Dataset, config: TrainConfig, streams=None):
    """Plain task-loss training; returns the per-step loss history.

    Works on any layer kind: factorized layers train their (A, B) pair,
    sparse layers keep their zero pattern. The model is mutated in place.
    """
    if streams is None:
        streams = rng_streams(config.seed)
    batches = batch_stream(len(dataset), config.batch_size, streams["shuffle"])
    opt = AdamW(config)
    params = model.parameters()
    losses = []
    for _ in range(config.total_steps):
        idx = next(batches)
        loss, grads = loss_and_grads(model, dataset.features[idx], dataset.labels[idx])
        opt.step(params, grads)
        apply_masks(model)
        losses.append(loss)
    return losses


def evaluate(model: MlpModel, dataset: Dataset, chunk=1024):
    """Classification accuracy in [0, 1], or mean squared error for regression."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    correct = 0.0
    sq = 0.0
    for start in range(0, len(dataset), chunk):
        x = dataset.features[start : start + chunk]
        y = dataset.labels[start : start + chunk]
        logits = forward(model, x)
        if model.task == CLASSIFICATION:
            correct += float(np.sum(np.argmax(logits, axis=1) == y))
        else:
            d = logits.reshape(-1) - y
            sq += float(np.sum(d * d))
    if model.task == CLASSIFICATION:
        return correct / len(dataset)
    return sq / len(dataset)


# ---------------------------------------------------------- synthetic data --


def teacher_model(params) -> MlpModel:
    """Frozen random MLP whose first weight matrix has a planted low rank."""
    dim = int(params.get("dim", 64))
    hidden = list(params.get("hidden", [256, 256]))
    num_classes = int(params.get("num_classes", 10))
    rho = int(params.get("planted_rank", 4))
    structure_seed = int(params.get("structure_seed", 0))
    if rho < 1 or rho > min(hidden[0], dim):
        raise ValueError("planted_rank must lie in [1, min(hidden, dim)]")
    rng = np.random.default_rng(np.random.SeedSequence(structure_seed))
    dims = [dim] + hidden + [num_classes]
    layers = []
    for li, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        if li == 0:
            left = rng.standard_normal((fan_out, rho))
            right = rng.standard_normal((rho, fan_in))
            w = left @ right * (np.sqrt(2.0 / fan_in) / np.sqrt(rho))
        else:
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(LinearLayer(w, np.zeros(fan_out)))
    return MlpModel(layers, task=CLASSIFICATION, num_classes=num_classes)


def generate_synthetic(kind, params, seed) -> Dataset:
    """Reproducible synthetic classification datasets.

    kinds:
      blobs           -- Gaussian clusters around class centers
      spirals         -- interleaved spiral arms in the first two dims
      lowrank_teacher -- labels are argmax outputs of a frozen random teacher
                         whose first weight matrix has planted rank << min(n, m)

    `seed` governs the samples; params["structure_seed"] (default 0) pins the
    task itself (centers / teacher) so train and eval splits share it.
    """
    params = dict(params)
    n = int(params.get("n", 1024))
    dim = int(params.get("dim", 2 if kind == "spirals" else 64))
    num_classes = int(params.get("num_classes", 10 if kind == "lowrank_teacher" else 3))
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if n < num_classes:
        raise ValueError("need at least one example per class")
    rng = np.random.default_rng(seed)
    structure_rng = np.random.default_rng(
        np.random.SeedSequence(int(params.get("structure_seed", 0)))
    )

    if kind == "blobs":
        separation = float(params.get("separation", 6.0))
        noise = float(params.get("noise", 1.0))
        centers = structure_rng.standard_normal((num_classes, dim))
        centers *= separation / np.maximum(
            np.linalg.norm(centers, axis=1, keepdims=True), 1e-12
        )
        labels = rng.integers(0, num_classes, size=n)
        features = centers[labels] + noise * rng.standard_normal((n, dim))
    elif kind == "spirals":
        noise = float(params.get("noise", 0.1))
        turns = float(params.get("turns", 1.5))
        labels = rng.integers(0, num_classes, size=n)
        radius = 0.3 + rng.random(n)
        theta = (
            radius * turns * 2.0 * np.pi
            + labels * (2.0 * np.pi / num_classes)
            + noise * rng.standard_normal(n)
        )
        features = np.zeros((n, dim))
        features[:, 0] = radius * np.cos(theta)
        features[:, 1] = radius * np.sin(theta)
        if dim > 2:
            features[:, 2:] = noise * rng.standard_normal((n, dim - 2))
    elif kind == "lowrank_teacher":
        params.setdefault("dim", dim)
        params.setdefault("num_classes", num_classes)
        teacher = teacher_model(params)
        if teacher.input_dim != dim:
            raise ValueError("teacher input dim must match dataset dim")
        features = rng.standard_normal((n, dim))
        labels = np.argmax(forward(teacher, features), axis=1)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    return Dataset(features, labels, task=CLASSIFICATION, num_classes=num_classes)
