"""Experiment configuration: one YAML document plus ``--set key=value`` overrides.

Layout::

    seed: 0                      # required, no clock-based default
    output_dir: runs/demo        # relative paths resolve against the config file
    dataset:
      train_annotations: data/train/annotations.json
      train_images: data/train/images
      eval_annotations: data/eval/annotations.json
      eval_images: data/eval/images
      class_agnostic: false
    split: {seen: [1, 2, 3], unseen: [4]}
    backerase: {...}             # BackEraseConfig fields
    detector: {...}              # DetectorConfig fields
    mode: {variant: decoupled}   # TrainMode fields
    schedule: {...}              # Schedule fields
    inference: {...}             # InferenceConfig fields
    eval: {...}                  # EvalConfig fields

Unset section fields keep their library defaults. ``schedule.seed``,
``detector.param_seed`` and ``backerase.seed`` default to the global seed.
"""
from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from .annotations import CategorySplit
from .backerase import BackEraseConfig
from .detector import DetectorConfig
from .inference import InferenceConfig
from .openworld_eval import EvalConfig
from .trainer import Schedule, TrainMode


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists the offending dotted keys."""

    def __init__(self, keys, message):
        self.keys = list(keys)
        super().__init__(message)


SECTIONS = {
    "backerase": BackEraseConfig,
    "detector": DetectorConfig,
    "mode": TrainMode,
    "schedule": Schedule,
    "inference": InferenceConfig,
    "eval": EvalConfig,
}
DATASET_PATHS = ("train_annotations", "train_images", "eval_annotations", "eval_images")
TOP_KEYS = {"seed", "output_dir", "dataset", "split", *SECTIONS}


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    dataset: dict
    split: CategorySplit | None
    backerase: BackEraseConfig
    detector: DetectorConfig
    mode: TrainMode
    schedule: Schedule
    inference: InferenceConfig
    eval: EvalConfig
    raw: dict = field(default_factory=dict)

    def path(self, name: str) -> str | None:
        return self.dataset.get(name)


def parse_overrides(pairs) -> list:
    """``["a.b=1", ...]`` -> ``[(["a", "b"], 1), ...]`` with YAML-typed values."""
    out = []
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError([p], f"override {p!r} is not of the form key=value")
        key, value = p.split("=", 1)
        out.append((key.strip().split("."), yaml.safe_load(value)))
    return out


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for keys, value in overrides:
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError([".".join(keys)], f"cannot set {'.'.join(keys)}: parent is not a mapping")
        node[keys[-1]] = value
    return doc


def _section(name, cls, values, defaults, errors):
    if values is not None and not isinstance(values, dict):
        errors.append((name, f"{name} must be a mapping"))
        return None
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    for k in unknown:
        errors.append((f"{name}.{k}", f"unknown key {name}.{k}"))
    for k, v in defaults.items():
        values.setdefault(k, v)
    for k in ("anchor_sizes", "anchor_aspect_ratios", "category_ids", "iou_thresholds", "budgets"):
        if isinstance(values.get(k), list):
            values[k] = tuple(values[k])
    try:
        return cls(**{k: v for k, v in values.items() if k in known})
    except (TypeError, ValueError) as e:
        errors.append((name, f"{name}: {e}"))
        return None


def build_config(doc: dict, base_dir: str = ".", check_paths: bool = True) -> ExperimentConfig:
    """Validate a config document; raises :class:`ConfigError` listing every bad key."""
    if not isinstance(doc, dict):
        raise ConfigError(["<root>"], "config must be a mapping")
    errors = []
    for k in sorted(set(doc) - TOP_KEYS):
        errors.append((k, f"unknown key {k}"))
    seed = doc.get("seed")
    if seed is None:
        errors.append(("seed", "seed must be set explicitly"))
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append(("seed", "seed must be a non-negative integer"))
        seed = None

    def resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    output_dir = resolve(str(doc.get("output_dir", "out")))
    dataset = dict(doc.get("dataset") or {})
    for k in sorted(set(dataset) - set(DATASET_PATHS) - {"class_agnostic"}):
        errors.append((f"dataset.{k}", f"unknown key dataset.{k}"))
    for k in DATASET_PATHS:
        if dataset.get(k) is not None:
            dataset[k] = resolve(str(dataset[k]))
            if check_paths and not os.path.exists(dataset[k]):
                errors.append((f"dataset.{k}", f"dataset.{k}: path does not exist: {dataset[k]}"))

    split = None
    if doc.get("split") is not None:
        s = doc["split"]
        try:
            split = CategorySplit(tuple(s.get("seen", ())), tuple(s.get("unseen", ())))
        except (AttributeError, TypeError, ValueError) as e:
            errors.append(("split", f"split: {e}"))

    s0 = seed or 0
    det_defaults = {"param_seed": s0}
    if "category_ids" not in (doc.get("detector") or {}):
        if dataset.get("class_agnostic"):
            det_defaults.update(num_classes=1, category_ids=(1,))
        elif split is not None:
            ids = tuple(sorted(split.seen_ids))
            det_defaults.update(num_classes=len(ids), category_ids=ids)
    defaults = {"backerase": {"seed": s0}, "detector": det_defaults, "schedule": {"seed": s0}}
    built = {name: _section(name, cls, doc.get(name), defaults.get(name, {}), errors)
             for name, cls in SECTIONS.items()}
    if errors:
        keys = [k for k, _ in errors]
        raise ConfigError(keys, "invalid config: " + "; ".join(m for _, m in errors))
    return ExperimentConfig(seed, output_dir, dataset, split, raw=doc, **built)


def load_config(path: str, overrides=(), check_paths: bool = True) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(["<config>"], f"config file not found: {path}")
    with open(path) as f:
        try:
            doc = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(["<config>"], f"cannot parse {path}: {e}") from None
    doc = apply_overrides(doc, parse_overrides(overrides))
    return build_config(doc, os.path.dirname(os.path.abspath(path)), check_paths)
