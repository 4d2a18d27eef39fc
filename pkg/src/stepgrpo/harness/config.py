"""Experiment configuration: one JSON document, validated field by field.

Layout (every section except ``task`` is optional and falls back to the
reference defaults)::

    {
      "task": {
        "distribution": {"means": [[1, 1], ...], "std": 0.15,
                          "weights": null, "context_modes": [[0, 1], [2, 3]]},
        "reward": {"kind": "mode-proximity", "targets": [[1, 1], [-1, -1]],
                   "bandwidth": 0.5}
      },
      "net": {"hidden_widths": [64, 64], "activation": "tanh"},
      "pretrain": {"iterations": 8000, "batch_size": 256, "seed": 0, "lr": 0.001,
                   "final_lr_frac": 0.05, "heldout_size": 4096, "heldout_threshold": 1.6},
      "train": {"N": 16, "T": 10, "substeps": 5, "beta": 0.001, ...,
                "schedule": {"kind": "flowgrpo", "a": 0.7}},
      "seeds": [0, 1, 2, 3, 4],
      "threshold": 0.8,
      "band": 0.05
    }

Errors are raised as :class:`ConfigError` carrying a dotted field path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..diffnet import NetConfig
from ..flowcore import ToyDistribution
from ..grpo import TrainConfig
from ..rewardlab import RewardSpec
from ..sde import NoiseSchedule


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class PretrainSettings:
    iterations: int = 8000
    batch_size: int = 256
    seed: int = 0
    lr: float = 1e-3
    final_lr_frac: float = 0.05
    heldout_size: int = 4096
    heldout_threshold: float = 1.6

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1 or self.heldout_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.final_lr_frac <= 1:
            raise ValueError("final_lr_frac must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    distribution: ToyDistribution
    reward: RewardSpec
    net: NetConfig
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    threshold: float = 0.8
    band: float = 0.05

    @property
    def n_contexts(self):
        return self.distribution.n_contexts

    def for_seed(self, seed):
        return replace(self.train, seed=int(seed))

    def to_dict(self):
        train = {f.name: getattr(self.train, f.name) for f in fields(self.train)}
        train["schedule"] = {f.name: getattr(self.train.schedule, f.name) for f in fields(NoiseSchedule)}
        train["betas"] = list(train["betas"])
        return {
            "task": {"distribution": self.distribution.to_dict(), "reward": self.reward.to_dict()},
            "net": {"hidden_widths": list(self.net.hidden_widths), "activation": self.net.activation},
            "pretrain": {f.name: getattr(self.pretrain, f.name) for f in fields(PretrainSettings)},
            "train": train,
            "seeds": list(self.seeds),
            "threshold": self.threshold,
            "band": self.band,
        }


def _section(doc, key, path, required=False):
    if key not in doc:
        if required:
            raise ConfigError(f"{path}{key}", "missing field")
        return {}
    value = doc[key]
    if not isinstance(value, dict):
        raise ConfigError(f"{path}{key}", "must be an object")
    return value


def _known(section, allowed, path):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}{key}", "unknown field")


def _build(path, fn, **kwargs):
    try:
        return fn(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _names(cls):
    return {f.name for f in fields(cls)}


def from_dict(doc):
    """Validate a parsed JSON document and build an :class:`ExperimentConfig`."""
    if not isinstance(doc, dict):
        raise ConfigError("", "top level must be an object")
    _known(doc, {"task", "net", "pretrain", "train", "seeds", "threshold", "band"}, "")
    task = _section(doc, "task", "", required=True)
    _known(task, {"distribution", "reward"}, "task.")

    dist_doc = _section(task, "distribution", "task.", required=True)
    _known(dist_doc, {"means", "std", "weights", "context_modes"}, "task.distribution.")
    if "means" not in dist_doc:
        raise ConfigError("task.distribution.means", "missing field")
    dist = _build("task.distribution", ToyDistribution, **dist_doc)

    reward_doc = _section(task, "reward", "task.", required=True)
    _known(reward_doc, {"kind", "targets", "bandwidth"}, "task.reward.")
    for key in ("kind", "targets"):
        if key not in reward_doc:
            raise ConfigError(f"task.reward.{key}", "missing field")
    reward = _build("task.reward", RewardSpec, **reward_doc)
    if len(reward.targets) != dist.n_contexts:
        raise ConfigError("task.reward.targets", f"need {dist.n_contexts} targets, one per context")

    net_doc = _section(doc, "net", "")
    _known(net_doc, {"hidden_widths", "activation"}, "net.")
    net = _build("net", NetConfig.for_task, data_dim=dist.dim, n_contexts=dist.n_contexts, **net_doc)

    pre_doc = _section(doc, "pretrain", "")
    _known(pre_doc, _names(PretrainSettings), "pretrain.")
    pre = _build("pretrain", PretrainSettings, **pre_doc)

    train_doc = dict(_section(doc, "train", ""))
    _known(train_doc, _names(TrainConfig), "train.")
    sched_doc = train_doc.pop("schedule", {})
    if not isinstance(sched_doc, dict):
        raise ConfigError("train.schedule", "must be an object")
    _known(sched_doc, _names(NoiseSchedule), "train.schedule.")
    schedule = _build("train.schedule", NoiseSchedule, **sched_doc)
    if "betas" in train_doc:
        train_doc["betas"] = tuple(train_doc["betas"])
    train = _build("train", TrainConfig, schedule=schedule, **train_doc)

    seeds = doc.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "must be a nonempty list")
    if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "entries must be nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "entries must be distinct")
    threshold = doc.get("threshold", 0.8)
    band = doc.get("band", 0.05)
    for name, value in (("threshold", threshold), ("band", band)):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(name, "must be a number")
    if band < 0:
        raise ConfigError("band", "must be >= 0")
    return ExperimentConfig(dist, reward, net, pre, train, tuple(seeds), float(threshold), float(band))


def load(path):
    """Read and validate a config file; JSON syntax errors report line and column."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return from_dict(doc)


def reference_dict():
    """The reference 4-mode task: two contexts, each owning two modes."""
    return {
        "task": {
            "distribution": {
                "means": [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]],
                "std": 0.15,
                "context_modes": [[0, 1], [2, 3]],
            },
            "reward": {"kind": "mode-proximity", "targets": [[1.0, 1.0], [-1.0, -1.0]], "bandwidth": 0.5},
        },
        "pretrain": {"iterations": 8000, "batch_size": 256, "seed": 0, "final_lr_frac": 0.05},
        "train": {"N": 16, "T": 10, "substeps": 5, "iterations": 200, "method": "stepwise-joint"},
        "seeds": [0, 1, 2, 3, 4],
        "threshold": 0.8,
    }


def reference():
    return from_dict(reference_dict())
