"""Checkpoints, experiment configs, and dataset loading.

Checkpoints are a directory holding `manifest.json` (topology plus one
record per tensor: name, role, shape, dtype, blob file, byte offset and
length) and `tensors.bin` (raw 64-bit little-endian row-major values,
concatenated). No timestamps or floats appear in the manifest, so identical
models produce byte-identical checkpoints and round-trips are bit-exact.

Experiment configs are strict JSON: unknown keys are rejected with their
dotted path, defaults are filled in explicitly, and ranges are validated at
load time.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .linalg import FactorPair
from .mixedrank import MixedRankConfig
from .nn import Dataset, LinearLayer, MlpModel, TrainConfig
from .prune import SparsitySchedule

DTYPE = "<f8"
BLOB_FILE = "tensors.bin"
MANIFEST_FILE = "manifest.json"

ROLES = ("weight", "bias", "mask", "score", "factor_a", "factor_b", "shadow")


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Checkpoint:
    path: str
    manifest: dict


def _layer_tensors(layer: LinearLayer):
    """(role, array) pairs actually present on a layer, in a fixed order."""
    out = [("bias", layer.bias)]
    if layer.weight is not None:
        out.insert(0, ("weight", layer.weight))
    if layer.mask is not None:
        out.append(("mask", layer.mask))
    if layer.score is not None:
        out.append(("score", layer.score))
    if layer.factors is not None:
        out.append(("factor_a", layer.factors.a))
        out.append(("factor_b", layer.factors.b))
    if layer.shadow is not None:
        out.append(("shadow", layer.shadow))
    return out


def save_checkpoint(model: MlpModel, path) -> Checkpoint:
    """Write the model under directory `path`; overwrites existing files."""
    os.makedirs(path, exist_ok=True)
    records = []
    offset = 0
    blob_parts = []
    layers_meta = []
    for i, lay in enumerate(model.layers):
        meta = {"kind": lay.kind, "out_dim": int(lay.out_dim), "in_dim": int(lay.in_dim)}
        if lay.kind == nn.FACTORIZED:
            meta["k"] = int(lay.factors.k)
        layers_meta.append(meta)
        for role, arr in _layer_tensors(lay):
            raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
            records.append(
                {
                    "name": f"layers.{i}.{role}",
                    "role": role,
                    "shape": [int(s) for s in arr.shape],
                    "dtype": DTYPE,
                    "blob_file": BLOB_FILE,
                    "byte_offset": offset,
                    "byte_length": len(raw),
                }
            )
            blob_parts.append(raw)
            offset += len(raw)
    manifest = {
        "format": "prunefactor-checkpoint",
        "version": 1,
        "task": model.task,
        "num_classes": model.num_classes,
        "layers": layers_meta,
        "tensors": records,
    }
    with open(os.path.join(path, BLOB_FILE), "wb") as fh:
        fh.write(b"".join(blob_parts))
    with open(os.path.join(path, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Checkpoint(str(path), manifest)


def _read_tensor(record, blobs, base):
    name = record["name"]
    if record.get("role") not in ROLES:
        raise CheckpointError(f"{name}: unknown role {record.get('role')!r}")
    if record.get("dtype") != DTYPE:
        raise CheckpointError(f"{name}: unknown dtype {record.get('dtype')!r}")
    shape = tuple(int(s) for s in record["shape"])
    expected = 8 * int(np.prod(shape)) if shape else 8
    if record["byte_length"] != expected:
        raise CheckpointError(
            f"{name}: byte_length {record['byte_length']} != 8*prod(shape) = {expected}"
        )
    blob_file = record["blob_file"]
    if blob_file not in blobs:
        blob_path = os.path.join(base, blob_file)
        if not os.path.exists(blob_path):
            raise CheckpointError(f"{name}: missing blob file {blob_file}")
        with open(blob_path, "rb") as fh:
            blobs[blob_file] = fh.read()
    data = blobs[blob_file]
    start = record["byte_offset"]
    end = start + record["byte_length"]
    if end > len(data):
        raise CheckpointError(f"{name}: blob {blob_file} truncated")
    return np.frombuffer(data[start:end], dtype=DTYPE).reshape(shape).copy()


_REQUIRED_TENSORS = {
    nn.DENSE: ("weight", "bias"),
    nn.SPARSE: ("weight", "bias", "mask", "score"),
    nn.FACTORIZED: ("bias", "factor_a", "factor_b", "shadow"),
}


def load_checkpoint(path) -> MlpModel:
    manifest_path = os.path.join(path, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no {MANIFEST_FILE} under {path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    blobs = {}
    tensors = {}
    for record in manifest["tensors"]:
        tensors[record["name"]] = _read_tensor(record, blobs, str(path))

    layers = []
    for i, meta in enumerate(manifest["layers"]):
        kind = meta["kind"]
        if kind not in _REQUIRED_TENSORS:
            raise CheckpointError(f"layers.{i}: unknown layer kind {kind!r}")

        def get(role, required=True):
            name = f"layers.{i}.{role}"
            if name not in tensors:
                if required:
                    raise CheckpointError(f"{name}: missing tensor")
                return None
            return tensors[name]

        bias = get("bias")
        n, m = meta["out_dim"], meta["in_dim"]
        if kind == nn.FACTORIZED:
            lay = LinearLayer(np.zeros((n, m)), bias)
            lay.weight = None
            lay.kind = kind
            a = get("factor_a")
            b = get("factor_b")
            k = int(meta["k"])
            if a.shape != (n, k) or b.shape != (k, m):
                raise CheckpointError(f"layers.{i}.factor_a: shape mismatch with manifest")
            lay.factors = FactorPair(a, b, k)
            lay.shadow = get("shadow")
            lay.mask = get("mask", required=False)
            lay.score = get("score", required=False)
            if lay.shadow.shape != (n, m):
                raise CheckpointError(f"layers.{i}.shadow: shape mismatch with manifest")
        else:
            weight = get("weight")
            if weight.shape != (n, m):
                raise CheckpointError(f"layers.{i}.weight: shape mismatch with manifest")
            lay = LinearLayer(weight, bias)
            if kind == nn.SPARSE:
                lay.to_sparse(get("score"), get("mask"))
        layers.append(lay)
    return MlpModel(layers, task=manifest["task"], num_classes=manifest["num_classes"])


# ----------------------------------------------------------------- configs --

# Schema: nested dict mirroring the config; leaves are (type or tuple of
# types, default). None defaults are filled from context after parsing.
_SCHEMA = {
    "seed": (int, 0),
    "out_dir": (str, "run"),
    "dataset": {
        "kind": (str, "blobs"),
        "params": (dict, {}),
        "seed": (int, 0),
        "n_eval": (int, 512),
        "eval_seed": ((int, type(None)), None),
        "csv_path": ((str, type(None)), None),
        "eval_csv_path": ((str, type(None)), None),
        "num_classes": ((int, type(None)), None),
    },
    "model": {
        "hidden_dims": (list, [256, 256]),
    },
    "train": {
        "learning_rate": ((int, float), 1e-3),
        "batch_size": (int, 32),
        "total_steps": (int, 800),
        "betas": (list, [0.9, 0.999]),
        "eps": ((int, float), 1e-8),
        "weight_decay": ((int, float), 0.0),
    },
    "schedule": {
        "v_final": ((int, float), 0.25),
        "warmup_steps": ((int, type(None)), None),
        "cooldown_steps": ((int, type(None)), None),
        "total_steps": ((int, type(None)), None),
    },
    "prune": {
        "method": (str, "first_order"),
        "interval": (int, 16),
        "layers": ((list, type(None)), None),
    },
    "factorize": {
        "rank": ((int, float, list), 0.25),
        "weighting": (str, "score"),
        "layers": ((list, type(None)), None),
    },
    "mixed_rank": {
        "p_init": ((int, float), 0.5),
        "decay": ((int, float, type(None)), None),
        "consistency_weight": ((int, float), 1.0),
    },
    "finetune": {
        "learning_rate": ((int, float, type(None)), None),
        "batch_size": ((int, type(None)), None),
        "total_steps": ((int, type(None)), None),
        "weight_decay": ((int, float, type(None)), None),
    },
}

_DATASET_KINDS = ("blobs", "spirals", "lowrank_teacher", "csv")


def _apply_schema(schema, data, path):
    out = {}
    for key in data:
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}{key}")
    for key, rule in schema.items():
        here = f"{path}{key}"
        if isinstance(rule, dict):
            sub = data.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{here}: expected an object")
            out[key] = _apply_schema(rule, sub, here + ".")
        else:
            types, default = rule
            if key in data:
                value = data[key]
                if isinstance(value, bool) or not isinstance(value, types):
                    raise ConfigError(f"{here}: expected {_type_names(types)}")
            else:
                value = json.loads(json.dumps(default))  # deep copy
            out[key] = value
    return out


def _type_names(types):
    if not isinstance(types, tuple):
        types = (types,)
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def _validate(cfg):
    ds = cfg["dataset"]
    if ds["kind"] not in _DATASET_KINDS:
        raise ConfigError(f"dataset.kind: must be one of {_DATASET_KINDS}")
    if ds["kind"] == "csv" and not ds["csv_path"]:
        raise ConfigError("dataset.csv_path: required for csv datasets")
    if ds["n_eval"] < 1:
        raise ConfigError("dataset.n_eval: must be >= 1")
    if ds["eval_seed"] is None:
        ds["eval_seed"] = ds["seed"] + 1000

    hidden = cfg["model"]["hidden_dims"]
    if not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("model.hidden_dims: must be positive integers")

    tr = cfg["train"]
    if tr["learning_rate"] <= 0:
        raise ConfigError("train.learning_rate: must be positive")
    if tr["total_steps"] < 1:
        raise ConfigError("train.total_steps: must be >= 1")
    if tr["batch_size"] < 1:
        raise ConfigError("train.batch_size: must be >= 1")
    if len(tr["betas"]) != 2 or not all(0 <= b < 1 for b in tr["betas"]):
        raise ConfigError("train.betas: expected two values in [0, 1)")

    sch = cfg["schedule"]
    if sch["v_final"] <= 0:
        raise ConfigError("schedule.v_final: kept fraction must be positive")
    if sch["v_final"] > 1:
        raise ConfigError("schedule.v_final: kept fraction must be <= 1")
    if sch["total_steps"] is None:
        sch["total_steps"] = tr["total_steps"]
    if sch["warmup_steps"] is None:
        sch["warmup_steps"] = sch["total_steps"] // 4
    if sch["cooldown_steps"] is None:
        sch["cooldown_steps"] = sch["total_steps"] // 4
    if sch["warmup_steps"] + sch["cooldown_steps"] >= sch["total_steps"]:
        raise ConfigError("schedule: warmup + cooldown must leave a decay window")

    if cfg["prune"]["method"] not in ("first_order", "zero_order"):
        raise ConfigError("prune.method: must be first_order or zero_order")
    if cfg["prune"]["interval"] < 1:
        raise ConfigError("prune.interval: must be >= 1")

    fz = cfg["factorize"]
    if fz["weighting"] not in ("score", "mask", "none"):
        raise ConfigError("factorize.weighting: must be score, mask, or none")
    rank = fz["rank"]
    if isinstance(rank, list):
        if not all(isinstance(k, int) and k >= 1 for k in rank):
            raise ConfigError("factorize.rank: list entries must be ints >= 1")
    elif isinstance(rank, float) and not isinstance(rank, bool):
        if not 0 < rank <= 1:
            raise ConfigError("factorize.rank: fractional budget must lie in (0, 1]")
    elif rank < 1:
        raise ConfigError("factorize.rank: must be >= 1")

    mx = cfg["mixed_rank"]
    if not 0 <= mx["p_init"] <= 1:
        raise ConfigError("mixed_rank.p_init: must lie in [0, 1]")
    if mx["decay"] is not None and mx["decay"] < 0:
        raise ConfigError("mixed_rank.decay: must be non-negative")
    if mx["consistency_weight"] < 0:
        raise ConfigError("mixed_rank.consistency_weight: must be non-negative")

    ft = cfg["finetune"]
    for field_name, fallback in (
        ("learning_rate", tr["learning_rate"]),
        ("batch_size", tr["batch_size"]),
        ("total_steps", tr["total_steps"]),
        ("weight_decay", tr["weight_decay"]),
    ):
        if ft[field_name] is None:
            ft[field_name] = fallback
    if ft["learning_rate"] <= 0:
        raise ConfigError("finetune.learning_rate: must be positive")
    if ft["total_steps"] < 1:
        raise ConfigError("finetune.total_steps: must be >= 1")
    return cfg


@dataclass
class ExperimentConfig:
    """Validated experiment description with every default made explicit."""

    raw: dict

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def out_dir(self):
        return self.raw["out_dir"]

    @property
    def dataset(self):
        return self.raw["dataset"]

    @property
    def hidden_dims(self):
        return list(self.raw["model"]["hidden_dims"])

    def train_config(self, seed=None, total_steps=None) -> TrainConfig:
        tr = self.raw["train"]
        return TrainConfig(
            learning_rate=tr["learning_rate"],
            batch_size=tr["batch_size"],
            total_steps=tr["total_steps"] if total_steps is None else total_steps,
            betas=tuple(tr["betas"]),
            eps=tr["eps"],
            weight_decay=tr["weight_decay"],
            seed=self.seed if seed is None else seed,
        )

    def finetune_config(self, seed=None) -> TrainConfig:
        tr = self.raw["train"]
        ft = self.raw["finetune"]
        return TrainConfig(
            learning_rate=ft["learning_rate"],
            batch_size=ft["batch_size"],
            total_steps=ft["total_steps"],
            betas=tuple(tr["betas"]),
            eps=tr["eps"],
            weight_decay=ft["weight_decay"],
            seed=self.seed if seed is None else seed,
        )

    def schedule(self) -> SparsitySchedule:
        sch = self.raw["schedule"]
        return SparsitySchedule(
            total_steps=sch["total_steps"],
            warmup_steps=sch["warmup_steps"],
            cooldown_steps=sch["cooldown_steps"],
            v_final=float(sch["v_final"]),
        )

    def mixed_config(self) -> MixedRankConfig:
        mx = self.raw["mixed_rank"]
        return MixedRankConfig(
            p_init=float(mx["p_init"]),
            decay=mx["decay"],
            consistency_weight=float(mx["consistency_weight"]),
        )

    def with_overrides(self, **top_level):
        """Copy of this config with top-level scalar keys replaced."""
        data = json.loads(json.dumps(self.raw))
        for key, value in top_level.items():
            if key not in data:
                raise ConfigError(f"unknown config key: {key}")
            data[key] = value
        return config_from_dict(data)

    def updated(self, section, **values):
        """Copy of this config with keys inside one section replaced."""
        data = json.loads(json.dumps(self.raw))
        if section not in data:
            raise ConfigError(f"unknown config key: {section}")
        for key, value in values.items():
            if key not in data[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
            data[section][key] = value
        return config_from_dict(data)

    def serialize(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def config_from_dict(data) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return ExperimentConfig(_validate(_apply_schema(_SCHEMA, data, "")))


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(data)


# ---------------------------------------------------------------- datasets --


def load_csv_dataset(path, num_classes=None) -> Dataset:
    """CSV with a header row, decimal feature columns, final column `label`.

    Labels that all parse as integers give a classification dataset (classes
    inferred as max id + 1 unless `num_classes` is passed); otherwise the
    dataset is regression.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if not header or header[-1].strip() != "label":
            raise ValueError(f"{path}: final column must be named 'label'")
        width = len(header)
        features = []
        labels = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(
                    f"{path}: line {line_no}: expected {width} columns, got {len(row)}"
                )
            values = []
            for col, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: line {line_no}, column {col}: not a number: {cell!r}"
                    ) from None
            features.append(values[:-1])
            labels.append(values[-1])
    if not features:
        raise ValueError(f"{path}: no data rows")
    feats = np.asarray(features)
    labs = np.asarray(labels)
    if np.all(labs == np.round(labs)):
        ints = labs.astype(np.int64)
        if num_classes is None:
            num_classes = int(ints.max()) + 1
        return Dataset(feats, ints, task=nn.CLASSIFICATION, num_classes=num_classes)
    return Dataset(feats, labs, task=nn.REGRESSION)


def load_dataset(spec, eval_split=False) -> Dataset:
    """Dataset from a config `dataset` section; eval_split picks the held-out
    sample seed (synthetic) or the eval CSV path."""
    kind = spec["kind"]
    if kind == "csv":
        path = spec["csv_path"]
        if eval_split and spec.get("eval_csv_path"):
            path = spec["eval_csv_path"]
        return load_csv_dataset(path, spec.get("num_classes"))
    params = dict(spec.get("params", {}))
    if eval_split:
        params["n"] = spec.get("n_eval", 512)
        seed = spec.get("eval_seed", spec.get("seed", 0) + 1000)
    else:
        seed = spec.get("seed", 0)
    return nn.generate_synthetic(kind, params, seed)


def write_json(path, obj):
    """Deterministic JSON dump: sorted keys, two-space indent, newline EOF."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj)!r}")
