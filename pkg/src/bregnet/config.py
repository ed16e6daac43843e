"""Run configuration: a TOML (or JSON) file with a fixed key schema.

Top level: ``seed``, ``epochs``, ``batch_size``, ``loss``, ``skew_trials``
plus the tables ``[network]``, ``[optimizer]`` and ``[data]``.  Unknown
keys are rejected with the dotted key path in the message.
"""

import json
import os
from dataclasses import asdict, dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bypass import BypassKind
from .data import (
    CATEGORICAL,
    DIMENSIONAL,
    SYNTH_KINDS,
    load_fer2013_csv,
    load_manifest,
    synth_generate,
)
from .errors import ConfigError, ContractError
from .model import CLASSIFICATION, HEADS, REGRESSION, NetworkConfig
from .training import LOSSES

DATA_FORMATS = ("synthetic", "fer2013", "manifest")

_NETWORK_KEYS = {
    "stem_channels": int, "stem_convs": int, "stages": list, "bypass": str, "head": str,
    "num_classes": int, "input_shape": list, "use_batch_norm": bool, "standardize_input": bool,
}
_OPTIMIZER_KEYS = {"lr": float, "momentum": float, "weight_decay": float}
_DATA_KEYS = {
    "format": str, "path": str, "kind": str, "task": str, "n_per_class": int, "n_val_per_class": int,
    "image_size": int, "noise": float, "num_classes": int, "class_counts": list,
    "val_class_counts": list, "seed": int,
}
_RUN_KEYS = {
    "seed": int, "epochs": int, "batch_size": int, "loss": str, "skew_trials": int,
    "network": dict, "optimizer": dict, "data": dict,
}


@dataclass
class OptimizerSettings:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class DataSpec:
    format: str = "synthetic"
    path: str = None
    kind: str = "blobs"
    task: str = CATEGORICAL
    n_per_class: int = 64
    n_val_per_class: int = 32
    image_size: int = 16
    noise: float = 0.3
    num_classes: int = 2
    class_counts: list = None
    val_class_counts: list = None
    seed: int = None


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    loss: str = None
    skew_trials: int = 200
    network: dict = field(default_factory=dict)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    data: DataSpec = field(default_factory=DataSpec)

    def to_dict(self):
        d = asdict(self)
        d["data"] = {k: v for k, v in d["data"].items() if v is not None}
        return d


def _typed(section, key, value, kind):
    where = f"{section}.{key}" if section else key
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _check_keys(section, raw, schema):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section or 'config'}: expected a table")
    out = {}
    for key, value in raw.items():
        if key not in schema:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown config key {where!r}")
        out[key] = _typed(section, key, value, schema[key])
    return out


def parse_run_config(raw):
    top = _check_keys("", raw, _RUN_KEYS)
    network = _check_keys("network", top.pop("network", {}), _NETWORK_KEYS)
    optimizer = OptimizerSettings(**_check_keys("optimizer", top.pop("optimizer", {}), _OPTIMIZER_KEYS))
    data = DataSpec(**_check_keys("data", top.pop("data", {}), _DATA_KEYS))
    run = RunConfig(network=network, optimizer=optimizer, data=data, **top)
    validate(run)
    return run


def validate(run):
    if run.epochs < 0 or run.batch_size < 1 or run.skew_trials < 1 or run.seed < 0:
        raise ConfigError("epochs >= 0, batch_size >= 1, skew_trials >= 1 and seed >= 0 are required")
    if run.optimizer.lr < 0 or run.optimizer.weight_decay < 0 or not 0 <= run.optimizer.momentum < 1:
        raise ConfigError("optimizer: lr >= 0, weight_decay >= 0 and 0 <= momentum < 1 are required")
    d = run.data
    if d.format not in DATA_FORMATS:
        raise ConfigError(f"data.format must be one of {DATA_FORMATS}, got {d.format!r}")
    if d.format != "synthetic" and not d.path:
        raise ConfigError(f"data.path is required for format {d.format!r}")
    if d.format == "synthetic":
        if d.kind not in SYNTH_KINDS:
            raise ConfigError(f"data.kind must be one of {SYNTH_KINDS}, got {d.kind!r}")
        if d.task not in (CATEGORICAL, DIMENSIONAL):
            raise ConfigError(f"data.task must be {CATEGORICAL!r} or {DIMENSIONAL!r}")
    head = run.network.get("head", REGRESSION if d.task == DIMENSIONAL else CLASSIFICATION)
    if head not in HEADS:
        raise ConfigError(f"network.head must be one of {HEADS}, got {head!r}")
    if "bypass" in run.network:
        try:
            BypassKind.parse(run.network["bypass"])
        except ContractError as exc:
            raise ConfigError(f"network.bypass: {exc}") from None
    if run.loss is None:
        run.loss = "mse" if head == REGRESSION else "regular"
    if run.loss not in LOSSES:
        raise ConfigError(f"loss must be one of {LOSSES}, got {run.loss!r}")
    if (head == REGRESSION) != (run.loss == "mse"):
        raise ConfigError(f"loss {run.loss!r} does not fit a {head} head")
    if d.format == "synthetic" and (head == REGRESSION) != (d.task == DIMENSIONAL):
        raise ConfigError(f"data.task {d.task!r} does not fit a {head} head")


def load_run_config(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.endswith(".json"):
            raw = json.loads(blob.decode("utf-8"))
        else:
            raw = tomllib.loads(blob.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    run = parse_run_config(raw)
    base = os.path.dirname(os.path.abspath(path))
    if run.data.path and not os.path.isabs(run.data.path):
        run.data.path = os.path.join(base, run.data.path)
    return run


def load_data(spec, seed=0):
    """``(train, val)`` datasets described by a :class:`DataSpec`."""
    if spec.format == "synthetic":
        s = seed if spec.seed is None else spec.seed
        common = dict(kind=spec.kind, image_size=spec.image_size, noise=spec.noise,
                      task=spec.task, num_classes=spec.num_classes)
        train = synth_generate(n_per_class=spec.n_per_class, seed=s, class_counts=spec.class_counts,
                               split="train", **common)
        val = synth_generate(n_per_class=spec.n_val_per_class, seed=s + 1,
                             class_counts=spec.val_class_counts, split="val", **common)
        return train, val
    splits = load_fer2013_csv(spec.path) if spec.format == "fer2013" else load_manifest(spec.path)
    if "train" not in splits or not len(splits["train"]):
        raise ConfigError(f"{spec.path}: no training samples")
    return splits["train"], splits.get("val")


def resolve_network(run, train):
    """NetworkConfig from the ``[network]`` table, filling gaps from the data."""
    opts = dict(run.network)
    opts.setdefault("head", REGRESSION if train.task == DIMENSIONAL else CLASSIFICATION)
    opts.setdefault("input_shape", list(train.image_shape))
    if train.task == CATEGORICAL:
        opts.setdefault("num_classes", train.num_classes)
    else:
        opts.setdefault("num_classes", 2)
    opts.setdefault("stem_channels", 8)
    opts.setdefault("stages", [[1, 8], [1, 16], [1, 16]])
    try:
        return NetworkConfig(seed=run.seed, **opts)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"network: {exc}") from None
