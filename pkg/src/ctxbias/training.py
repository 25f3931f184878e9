"""Stage-1 (standard) and stage-2 (bias mitigation) training loops."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .baselines import DATA_METHODS, WEIGHT_METHODS, apply_baseline_transform
from .bias import pairs_as_tuples
from .data import LabeledDataset
from .inference import Preprocess, predict, to_tensor, train_batch
from .losses import (alpha_weights, cam_total_loss, compute_alpha, feature_split_loss,
                     weighted_bce)
from .model import ModelState, MultiLabelNet, SplitClassifierHead, build_model, split_head

log = logging.getLogger(__name__)

METHODS = ("standard", "remove_labels", "remove_images", "split_biased", "weighted",
           "negative_penalty", "class_balancing", "cam_based", "feature_split")
SELECTION_MODES = ("last", "lowest_val_loss", "best_exclusive", "best_exclusive_plus_cooccur")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.1
    lr_drop_epoch: int | None = 60
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 200
    seed: int = 0
    selection: str = "last"
    preprocess: Preprocess = field(default_factory=Preprocess)
    arch: dict = field(default_factory=lambda: {"backbone": "small", "feature_dim": 64})

    _FLOATS = ("lr", "lr_drop_factor", "momentum", "weight_decay")
    _INTS = ("epochs", "lr_drop_epoch", "batch_size", "seed")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch`` (dropped once after ``lr_drop_epoch``)."""
        if self.lr_drop_epoch is not None and epoch > self.lr_drop_epoch:
            return self.lr * self.lr_drop_factor
        return self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["preprocess"] = self.preprocess.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        if "preprocess" in d:
            d["preprocess"] = Preprocess.from_dict(d["preprocess"])
        return cls(**_coerce(d, cls._FLOATS, cls._INTS))


def _coerce(d: dict, floats, ints) -> dict:
    # YAML 1.1 reads "1e-3" as a string; normalise numeric fields up front
    for k in floats:
        if d.get(k) is not None:
            d[k] = float(d[k])
    for k in ints:
        if d.get(k) is not None:
            d[k] = int(d[k])
    return d


def stage2_defaults(**kw) -> TrainConfig:
    base = dict(epochs=20, lr=0.01, lr_drop_epoch=None)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class MethodSpec:
    name: str = "standard"
    train: TrainConfig = field(default_factory=stage2_defaults)
    lambda1: float = 0.1
    lambda2: float = 0.1
    alpha_min: float = 3.0
    alpha_scope: str = "all"
    weighted_loss: bool = True
    beta: float = 0.99
    weight_factor: float = 10.0
    d_o: int | None = None
    split_mode: str = "middle"
    xs_history: int = 10
    cam_normalize: bool = True
    cam_reduction: str = "mean"
    combine: str = "max"

    _FLOATS = ("lambda1", "lambda2", "alpha_min", "beta", "weight_factor")
    _INTS = ("d_o", "xs_history")

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}")
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict({**stage2_defaults().to_dict(), **self.train})

    @classmethod
    def from_dict(cls, d) -> "MethodSpec":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown method keys: {sorted(unknown)}")
        train = d.get("train")
        if isinstance(train, dict):
            d["train"] = TrainConfig.from_dict({**stage2_defaults().to_dict(), **train})
        return cls(**_coerce(d, cls._FLOATS, cls._INTS))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


@dataclass
class TrainResult:
    model: MultiLabelNet
    history: list[dict]
    method: str = "standard"
    split: SplitClassifierHead | None = None
    meta: dict = field(default_factory=dict)
    optimizer_state: dict | None = None
    epoch: int = 0
    seed: int = 0

    @property
    def preprocess(self) -> Preprocess:
        return Preprocess.from_dict(self.meta.get("preprocess"))

    def predict(self, dataset: LabeledDataset, batch_size: int = 256):
        return predict(self.model, dataset, self.preprocess, batch_size, self.meta)

    def to_state(self) -> ModelState:
        return ModelState(self.model, self.split, self.optimizer_state, self.epoch, self.seed,
                          self.meta)

    @classmethod
    def from_state(cls, state: ModelState) -> "TrainResult":
        return cls(state.model, [], state.meta.get("method", "standard"), state.split,
                   dict(state.meta), state.optimizer_state, state.epoch, state.seed)


StepFn = Callable[[MultiLabelNet, torch.Tensor, torch.Tensor, np.ndarray], dict]


def _bce_step(weighter=None) -> StepFn:
    def step(model, x, y, labels_np):
        w = None
        if weighter is not None:
            w = torch.as_tensor(weighter(labels_np), dtype=x.dtype)
        loss = weighted_bce(model(x), y, w)
        return {"loss": loss, "bce": loss}
    return step


def _validation_record(model, val, pairs, prep) -> dict:
    from .evaluation import evaluate

    preds = predict(model, val, prep)
    p = np.clip(preds.scores, 1e-12, 1 - 1e-12)
    t = val.labels
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum(axis=1).mean()
    rec = {"val_loss": float(bce)}
    if pairs:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            agg = evaluate(preds, val, pairs, full_set=False).aggregates
        rec["val_exclusive"] = agg["exclusive"]
        rec["val_cooccur"] = agg["cooccur"]
    return rec


def _selection_score(mode: str, rec: dict) -> float:
    if mode == "lowest_val_loss":
        return -rec["val_loss"]
    if mode == "best_exclusive":
        return rec.get("val_exclusive", float("nan"))
    return rec.get("val_exclusive", float("nan")) + rec.get("val_cooccur", float("nan"))


def fit(model: MultiLabelNet, dataset: LabeledDataset, cfg: TrainConfig, step: StepFn,
        val: LabeledDataset | None = None, val_pairs=None, history_path=None,
        start_epoch: int = 0, optimizer_state: dict | None = None,
        on_batch_end: Callable | None = None, history_tag: dict | None = None):
    """Run SGD epochs ``start_epoch + 1 .. cfg.epochs``.

    Batch order and augmentation draw from ``default_rng([seed, epoch])``,
    so a run resumed at an epoch boundary replays the uninterrupted one.
    Returns ``(history, optimizer_state, selected_epoch)``; the model is left
    holding the selected epoch's weights.
    """
    if cfg.selection not in SELECTION_MODES:
        raise ValueError(f"unknown selection mode {cfg.selection!r}")
    if cfg.selection != "last" and val is None:
        raise ValueError(f"selection {cfg.selection!r} needs a validation set")
    dtype = next(model.parameters()).dtype
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    images = dataset.load_images()
    labels = dataset.labels
    history = []
    best = (-math.inf, None, cfg.epochs)
    sink = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(history_path, "a", encoding="utf-8")
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            lr = cfg.lr_at(epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            rng = np.random.default_rng([cfg.seed, epoch])
            perm = rng.permutation(len(dataset))
            totals: dict[str, float] = {}
            t0 = time.perf_counter()
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                x = to_tensor(train_batch(images[idx], rng, cfg.preprocess), dtype)
                y = torch.as_tensor(labels[idx], dtype=dtype)
                terms = step(model, x, y, labels[idx])
                loss = terms["loss"]
                values = {k: float(torch.as_tensor(v).detach()) for k, v in terms.items()}
                if not torch.isfinite(loss):
                    raise TrainingDivergence(
                        f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}: "
                        + ", ".join(f"{k}={v:.4g}" for k, v in values.items()))
                opt.zero_grad()
                loss.backward()
                opt.step()
                for k, v in values.items():
                    # counts accumulate as-is, loss terms weighted by batch size
                    totals[k] = totals.get(k, 0.0) + (v if k.startswith("n_") else v * len(idx))
                if on_batch_end is not None:
                    on_batch_end(epoch, start // cfg.batch_size, terms)
            rec = {"epoch": epoch, "lr": lr}
            for k, v in totals.items():
                rec[k] = v if k.startswith("n_") else v / len(perm)
            rec["seconds"] = time.perf_counter() - t0
            if val is not None:
                rec.update(_validation_record(model, val, val_pairs, cfg.preprocess))
            if cfg.selection != "last":
                score = _selection_score(cfg.selection, rec)
                if not math.isnan(score) and score > best[0]:
                    best = (score, copy.deepcopy(model.state_dict()), epoch)
            history.append(rec)
            log.info("epoch %d lr %.4g loss %.4f", epoch, lr, rec.get("loss", float("nan")))
            if sink is not None:
                sink.write(json.dumps({**(history_tag or {}), **rec}, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    selected = cfg.epochs
    if cfg.selection != "last" and best[1] is not None:
        model.load_state_dict(best[1])
        selected = best[2]
    return history, opt.state_dict(), selected


def _meta(method: str, cfg: TrainConfig, **extra) -> dict:
    return {"method": method, "preprocess": cfg.preprocess.to_dict(), "train": cfg.to_dict(),
            **extra}


def new_model(num_categories: int, cfg: TrainConfig) -> MultiLabelNet:
    torch.manual_seed(cfg.seed)
    return build_model({"num_categories": num_categories, **cfg.arch})


def train_standard(dataset: LabeledDataset, cfg: TrainConfig | None = None,
                   val: LabeledDataset | None = None, val_pairs=None, history_path=None,
                   resume: ModelState | None = None, history_tag: dict | None = None
                   ) -> TrainResult:
    """Plain BCE training from a fresh model (or resumed from a checkpoint)."""
    cfg = cfg or TrainConfig()
    if resume is not None:
        model, start, opt_state = resume.model, resume.epoch, resume.optimizer_state
    else:
        model, start, opt_state = new_model(dataset.num_categories, cfg), 0, None
    torch.manual_seed(cfg.seed)
    history, opt_state, selected = fit(model, dataset, cfg, _bce_step(), val, val_pairs,
                                       history_path, start, opt_state,
                                       history_tag=history_tag or {"run": "standard"})
    return TrainResult(model, history, "standard", None,
                       _meta("standard", cfg, selected_epoch=selected), opt_state,
                       cfg.epochs, cfg.seed)


def _load_standard(standard) -> MultiLabelNet:
    if isinstance(standard, TrainResult):
        return standard.model
    if isinstance(standard, ModelState):
        return standard.model
    if isinstance(standard, MultiLabelNet):
        return standard
    raise TypeError(f"cannot use {type(standard).__name__} as a standard model")


def train_stage2(method: MethodSpec | str, standard, dataset: LabeledDataset, pairs,
                 val: LabeledDataset | None = None, history_path=None,
                 stage1: TrainConfig | None = None, history_tag: dict | None = None
                 ) -> TrainResult:
    """Fine-tune a copy of the standard model with a bias-mitigation method.

    ``split_biased`` ignores ``standard`` and trains a wider model from
    scratch for ``stage1.epochs + method.train.epochs`` epochs on the
    stage-1 schedule.
    """
    spec = method if isinstance(method, MethodSpec) else MethodSpec(name=method)
    cfg = spec.train
    pairs = pairs_as_tuples(pairs)
    name = spec.name

    if name == "split_biased":
        s1 = stage1 or TrainConfig()
        transformed, _ = apply_baseline_transform(name, dataset, pairs)
        long_cfg = copy.deepcopy(s1)
        long_cfg.epochs = s1.epochs + cfg.epochs
        long_cfg.seed = cfg.seed
        model = new_model(transformed.num_categories, long_cfg)
        history, opt_state, selected = fit(model, transformed, long_cfg, _bce_step(), None,
                                           None, history_path,
                                           history_tag=history_tag or {"run": name})
        meta = _meta(name, long_cfg, pairs=[list(p) for p in pairs],
                     base_categories=dataset.num_categories, combine=spec.combine,
                     category_names=transformed.category_names, spec=spec.to_dict())
        return TrainResult(model, history, name, None, meta, opt_state, long_cfg.epochs,
                           cfg.seed)

    if standard is None:
        raise ValueError(f"{name} needs a stage-1 model")
    base = _load_standard(standard)
    model = copy.deepcopy(base)
    if model.num_categories != dataset.num_categories:
        raise ValueError("standard model output size does not match the dataset")
    torch.manual_seed(cfg.seed)
    split = None
    extra = {}
    train_set = dataset

    if name == "standard":
        step = _bce_step()
    elif name in DATA_METHODS:
        train_set, _ = apply_baseline_transform(name, dataset, pairs)
        step = _bce_step()
    elif name in WEIGHT_METHODS:
        kw = {"factor": spec.weight_factor} if name != "class_balancing" else {"beta": spec.beta}
        _, weighter = apply_baseline_transform(name, dataset, pairs, **kw)
        step = _bce_step(weighter)
    elif name == "cam_based":
        if not pairs:
            raise ValueError("cam_based needs at least one biased pair")
        pre = copy.deepcopy(base).eval()
        for p in pre.parameters():
            p.requires_grad_(False)

        def step(model, x, y, labels_np):
            return cam_total_loss(model, pre, x, y, pairs, spec.lambda1, spec.lambda2,
                                  spec.cam_normalize, spec.cam_reduction)
    elif name == "feature_split":
        d = model.feature_dim
        d_o = spec.d_o if spec.d_o is not None else d // 2
        if not 0 < d_o < d:
            raise ValueError(f"feature_split needs 0 < d_o < {d}, got {d_o}")
        split = split_head(model.fc, spec.split_mode, d_o, cfg.seed, spec.xs_history)
        alphas = [compute_alpha(dataset.labels, p, spec.alpha_min) for p in pairs]
        extra["alphas"] = alphas

        def step(model, x, y, labels_np):
            w = alpha_weights(labels_np, pairs, alphas, spec.alpha_scope, x.dtype) \
                if spec.weighted_loss else None
            return feature_split_loss(model, split, x, y, pairs, w)
    else:  # pragma: no cover - guarded by MethodSpec
        raise ValueError(name)

    history, opt_state, selected = fit(model, train_set, cfg, step, val, pairs, history_path,
                                       history_tag=history_tag or {"run": name})
    meta = _meta(name, cfg, pairs=[list(p) for p in pairs], spec=spec.to_dict(),
                 selected_epoch=selected, **extra)
    return TrainResult(model, history, name, split, meta, opt_state, cfg.epochs, cfg.seed)
