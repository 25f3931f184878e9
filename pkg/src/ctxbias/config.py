"""Experiment configuration: YAML document + dotted-key overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .inference import Preprocess
from .training import MethodSpec, TrainConfig

OUTPUT_ROOT_ENV = "CTXBIAS_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "source": "synthetic",
        "synthetic": {
            "num_images": 1000,
            "test_images": 1000,
            "image_size": 32,
            "num_categories": 8,
            "pair_specs": [[0, 5, 0.95], [1, 5, 0.95], [2, 6, 0.95], [3, 6, 0.95], [4, 7, 0.95]],
            "biased_fraction": 0.12,
            "base_rate": 0.3,
            "glyph_size": 6,
            "context_glyph_size": 8,
        },
        "format": "matrix",
        "train": None,
        "test": None,
        "train_images": None,
        "test_images": None,
        "image_pattern": "{id}.png",
        "val_fraction": None,
    },
    "preprocess": {"resize": 256, "crop": 224, "scale": [0.08, 1.0], "ratio": [0.75, 4 / 3],
                   "flip": True},
    "model": {"backbone": "small", "feature_dim": 64},
    "standard": {"epochs": 100, "lr": 0.1, "lr_drop_epoch": 60, "lr_drop_factor": 0.1,
                 "momentum": 0.9, "weight_decay": 0.0, "batch_size": 200, "selection": "last"},
    "method": {"name": "feature_split", "train": {"epochs": 20, "lr": 0.01, "batch_size": 200}},
    "pairs": {"source": "computed", "path": None, "k": 20, "threshold": 0.2,
              "candidates": None, "split": "auto"},
    "evaluation": {"metric": "mAP", "non_biased": None, "external": None, "batch_size": 256},
    "ablation": {"lambda2": [0.0, 0.01, 0.1], "xo_size": [16, 32, 48]},
}


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (update or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(doc: dict, assignment: str) -> None:
    """``a.b.c=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    node = doc
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into non-mapping at {p!r}")
    node[parts[-1]] = yaml.safe_load(raw)


class ExperimentConfig:
    def __init__(self, doc: dict, source: Path | None = None):
        self.doc = deep_merge(DEFAULTS, doc)
        self.source = source
        self._validate()

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        doc = {}
        if path is not None:
            try:
                doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
        for o in overrides:
            apply_override(doc, o)
        return cls(doc, Path(path) if path else None)

    def _validate(self):
        d = self.doc["data"]
        if d["source"] not in ("synthetic", "matrix", "coco"):
            raise ConfigError(f"unknown data.source {d['source']!r}")
        if d["source"] != "synthetic" and not d["train"]:
            raise ConfigError("data.train is required for non-synthetic sources")
        if self.doc["pairs"]["source"] not in ("computed", "file"):
            raise ConfigError("pairs.source must be 'computed' or 'file'")
        if self.doc["pairs"]["source"] == "file" and not self.doc["pairs"]["path"]:
            raise ConfigError("pairs.path is required when pairs.source is 'file'")
        try:
            self.standard_config()
            self.method_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def output_dir(self) -> Path:
        out = Path(self.doc["output_dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def preprocess(self) -> Preprocess:
        return Preprocess.from_dict(self.doc["preprocess"])

    def standard_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.doc["standard"], "seed": self.seed,
                                      "preprocess": self.doc["preprocess"],
                                      "arch": dict(self.doc["model"])})

    def method_spec(self, name: str | None = None, **overrides) -> MethodSpec:
        m = copy.deepcopy(self.doc["method"])
        if name is not None:
            m["name"] = name
        m.update(overrides)
        train = {**m.get("train", {}), "seed": self.seed, "preprocess": self.doc["preprocess"],
                 "arch": dict(self.doc["model"])}
        m["train"] = train
        return MethodSpec.from_dict(m)

    def dump(self) -> str:
        return yaml.safe_dump(self.doc, sort_keys=True)

    def data_hash(self) -> str:
        payload = json.dumps({"data": self.doc["data"], "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()
