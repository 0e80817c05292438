"""Experiment configuration: one JSON document, overridable per key.

Task defaults encode the cross-degree splits: denoise trains on noise levels
{5, 10, 15, 20} and tests on {30, 40, 50}; deblur trains on blur sigmas
{1..4} and tests on {4.2..5.0}; hybrid trains on the severe level and tests
on mild and moderate.
"""

import json
from dataclasses import dataclass, field

from .degrade import (HYBRID_MILD, HYBRID_MODERATE, HYBRID_SEVERE,
                      DistortionSpec, awgn, gaussian_blur)
from .model import NetConfig
from .optim import TrainConfig

__all__ = ["ExperimentConfig", "DatasetConfig", "ConfigError", "load_config",
           "parse_overrides", "config_to_dict", "TASK_DEFAULTS"]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


TASK_DEFAULTS = {
    "denoise": ([awgn(s) for s in (5, 10, 15, 20)],
                [awgn(s) for s in (30, 40, 50)]),
    "deblur": ([gaussian_blur(s) for s in (1.0, 2.0, 3.0, 4.0)],
               [gaussian_blur(s) for s in (4.2, 4.4, 4.6, 4.8, 5.0)]),
    "hybrid": ([HYBRID_SEVERE], [HYBRID_MILD, HYBRID_MODERATE]),
}


@dataclass
class DatasetConfig:
    type: str = "procedural"      # procedural | directory
    count: int = 40               # training images (procedural)
    eval_count: int = 10
    h: int = 96
    w: int = 96
    seed: int = 1234
    path: str = ""                # directory of PPM files

    def validate(self):
        if self.type not in ("procedural", "directory"):
            raise ConfigError(f"unknown dataset type {self.type!r}")
        if self.type == "procedural" and (self.count < 1 or self.h < 64 or self.w < 64):
            raise ConfigError("procedural dataset needs count >= 1 and h, w >= 64")
        if self.type == "directory" and not self.path:
            raise ConfigError("directory dataset needs a path")


@dataclass
class ExperimentConfig:
    task: str = "denoise"
    train_specs: list = None
    test_specs: list = None
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    output_dir: str = "out"
    checkpoint_every: int = 0     # 0 = final checkpoint only
    resume_from: str = ""         # directory holding checkpoint + optimizer state
    stop_after: int = 0           # end early at this iteration, schedule unchanged
    eval_channel: str = "rgb"

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ConfigError(f"unknown task {self.task!r}")
        defaults = TASK_DEFAULTS[self.task]
        if self.train_specs is None:
            self.train_specs = list(defaults[0])
        if self.test_specs is None:
            self.test_specs = list(defaults[1])
        self.validate()

    def validate(self):
        if not self.train_specs:
            raise ConfigError("train_specs must not be empty")
        overlap = [s for s in self.test_specs if s in self.train_specs]
        if overlap:
            raise ConfigError(f"test_specs must be disjoint from train_specs; shared: "
                              f"{[s.label() for s in overlap]}")
        if self.eval_channel not in ("rgb", "y"):
            raise ConfigError(f"eval_channel must be rgb or y, got {self.eval_channel!r}")
        self.dataset.validate()
        self.train.validate()


def config_to_dict(cfg):
    return {
        "task": cfg.task,
        "train_specs": [s.to_json() for s in cfg.train_specs],
        "test_specs": [s.to_json() for s in cfg.test_specs],
        "net": vars(cfg.net) if not hasattr(cfg.net, "__dataclass_fields__") else {
            k: getattr(cfg.net, k) for k in cfg.net.__dataclass_fields__},
        "train": {k: getattr(cfg.train, k) for k in cfg.train.__dataclass_fields__},
        "dataset": {k: getattr(cfg.dataset, k) for k in cfg.dataset.__dataclass_fields__},
        "output_dir": cfg.output_dir,
        "checkpoint_every": cfg.checkpoint_every,
        "resume_from": cfg.resume_from,
        "stop_after": cfg.stop_after,
        "eval_channel": cfg.eval_channel,
    }


def _config_from_dict(doc):
    doc = dict(doc)
    try:
        net = NetConfig(**doc.pop("net", {}))
        train = TrainConfig(**doc.pop("train", {}))
        dataset = DatasetConfig(**doc.pop("dataset", {}))
        train_specs = doc.pop("train_specs", None)
        test_specs = doc.pop("test_specs", None)
        if train_specs is not None:
            train_specs = [DistortionSpec.from_json(s) for s in train_specs]
        if test_specs is not None:
            test_specs = [DistortionSpec.from_json(s) for s in test_specs]
        return ExperimentConfig(net=net, train=train, dataset=dataset,
                                train_specs=train_specs, test_specs=test_specs, **doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def parse_overrides(sets):
    """--set key=value pairs; dotted keys reach nested sections, values parse
    as JSON when they can (numbers, booleans, lists) and as strings otherwise."""
    out = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return out


def _deep_update(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path=None, sets=(), seed=None, out=None):
    """Build an ExperimentConfig from an optional JSON file plus overrides."""
    doc = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    _deep_update(doc, parse_overrides(sets))
    if seed is not None:
        doc.setdefault("train", {})["seed"] = seed
    if out is not None:
        doc["output_dir"] = out
    return _config_from_dict(doc)
