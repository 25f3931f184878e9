"""Image batches -> tensors, and model predictions as PredictionMatrix."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .baselines import merge_split_scores
from .bias import PredictionMatrix
from .data import LabeledDataset, preprocess_eval, preprocess_train

MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class Preprocess:
    resize: int = 256
    crop: int = 224
    scale: tuple = (0.08, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)
    flip: bool = True

    def to_dict(self):
        d = asdict(self)
        d["scale"], d["ratio"] = list(self.scale), list(self.ratio)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        for k in ("scale", "ratio"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def to_tensor(batch: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, 3) uint8 -> normalized (B, 3, H, W)."""
    x = (batch.astype(np.float32) / 255.0 - MEAN) / STD
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).to(dtype)


def train_batch(images: np.ndarray, rng: np.random.Generator, prep: Preprocess) -> np.ndarray:
    return np.stack([preprocess_train(im, rng, prep.crop, prep.scale, prep.ratio, prep.flip)
                     for im in images])


def eval_batch(images, prep: Preprocess) -> np.ndarray:
    if len(images) == 0:
        return np.zeros((0, prep.crop, prep.crop, 3), dtype=np.uint8)
    return np.stack([preprocess_eval(im, prep.resize, prep.crop) for im in images])


def eval_images(dataset: LabeledDataset, prep: Preprocess) -> np.ndarray:
    return eval_batch([dataset.image(i) for i in range(len(dataset))], prep)


@torch.no_grad()
def predict_logits(model, dataset: LabeledDataset, prep: Preprocess,
                   batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    images = eval_images(dataset, prep)
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model(to_tensor(images[start:start + batch_size], dtype)).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.num_categories))


def predict(model, dataset: LabeledDataset, prep: Preprocess | None = None,
            batch_size: int = 256, meta: dict | None = None) -> PredictionMatrix:
    """Sigmoid probabilities on ``dataset``.

    ``meta`` of a split-biased run (keys ``pairs``, ``base_categories``,
    ``combine``) folds the extra columns back to the original vocabulary.
    """
    prep = prep or Preprocess()
    logits = predict_logits(model, dataset, prep, batch_size)
    scores = 1.0 / (1.0 + np.exp(-logits))
    if meta and meta.get("method") == "split_biased":
        scores = merge_split_scores(scores, meta["pairs"], meta["base_categories"],
                                    meta.get("combine", "max"))
    return PredictionMatrix(scores, dataset.ids, dataset.category_names)


@torch.no_grad()
def time_inference(model, dataset: LabeledDataset, prep: Preprocess, batch_size: int = 1,
                   limit: int = 100) -> float:
    """Mean seconds per forward pass of ``batch_size`` images."""
    model.eval()
    images = eval_images(dataset.subset(range(min(limit, len(dataset)))), prep)
    dtype = next(model.parameters()).dtype
    times = []
    for start in range(0, len(images), batch_size):
        x = to_tensor(images[start:start + batch_size], dtype)
        t0 = time.perf_counter()
        model(x)
        times.append(time.perf_counter() - t0)
    return float(np.mean(times)) if times else 0.0
