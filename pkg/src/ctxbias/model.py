"""Backbones, the classifier head and its W_o/W_s split, CAMs, checkpoints.

Tensors use torch's channel-first layout: feature maps are (B, D, H', W') and
``nn.Linear`` stores the head weight as (M, D), i.e. the transpose of the
D x M matrix ``W`` in ``y = W^T x``.
"""

from __future__ import annotations

import io
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


class CheckpointError(RuntimeError):
    pass


# -- backbones -----------------------------------------------------------------

class SmallCNN(nn.Module):
    """Desk-scale backbone: conv blocks -> (B, D, H/4, W/4) feature map."""

    def __init__(self, feature_dim: int = 64, widths=(16, 32, 48), batchnorm: bool = True):
        super().__init__()
        layers = []
        c_in = 3
        for k, w in enumerate((*widths, feature_dim)):
            layers.append(nn.Conv2d(c_in, w, 3, padding=1, bias=not batchnorm))
            if batchnorm:
                layers.append(nn.BatchNorm2d(w))
            layers.append(nn.ReLU(inplace=True))
            if k in (1, 2):
                layers.append(nn.MaxPool2d(2))
            c_in = w
        self.features = nn.Sequential(*layers)
        self.feature_dim = feature_dim

    def forward(self, x: Tensor) -> Tensor:
        return self.features(x)


class ResNetBackbone(nn.Module):
    """torchvision ResNet-50 trunk (D = 2048). Weights are never fetched implicitly."""

    def __init__(self, weights=None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=weights)
        self.features = nn.Sequential(*list(net.children())[:-2])
        self.feature_dim = 2048

    def forward(self, x: Tensor) -> Tensor:
        return self.features(x)


BACKBONES = {"small": SmallCNN, "resnet50": ResNetBackbone}


@dataclass
class BackboneOutput:
    feature_map: Tensor
    pooled: Tensor


class MultiLabelNet(nn.Module):
    """Backbone + global average pool + linear head producing logits."""

    def __init__(self, num_categories: int, backbone: str = "small", feature_dim: int = 64,
                 **backbone_kw):
        super().__init__()
        if backbone == "small":
            self.backbone = SmallCNN(feature_dim, **backbone_kw)
        elif backbone in BACKBONES:
            self.backbone = BACKBONES[backbone](**backbone_kw)
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.arch = {"num_categories": num_categories, "backbone": backbone,
                     "feature_dim": self.backbone.feature_dim, **backbone_kw}
        self.fc = nn.Linear(self.backbone.feature_dim, num_categories)

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    @property
    def num_categories(self) -> int:
        return self.fc.out_features

    def extract(self, x: Tensor) -> BackboneOutput:
        fmap = self.backbone(x)
        return BackboneOutput(fmap, fmap.mean(dim=(2, 3)))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.extract(x).pooled)


def build_model(arch: dict) -> MultiLabelNet:
    arch = dict(arch)
    arch.pop("feature_dim_resolved", None)
    m = arch.pop("num_categories")
    backbone = arch.pop("backbone", "small")
    dim = arch.pop("feature_dim", 64)
    if backbone != "small":
        return MultiLabelNet(m, backbone, **arch)
    if "widths" in arch:
        arch["widths"] = tuple(arch["widths"])
    return MultiLabelNet(m, backbone, dim, **arch)


def forward_scores(x: Tensor, head: nn.Linear, use_bias: bool = True) -> Tensor:
    """``W^T x`` (+ bias) for a (D,) vector or a (B, D) batch."""
    if x.shape[-1] != head.in_features:
        raise ValueError(f"feature dim {x.shape[-1]} != head input dim {head.in_features}")
    return F.linear(x, head.weight, head.bias if use_bias else None)


# -- W_o / W_s split -----------------------------------------------------------

class SplitClassifierHead:
    """Row partition of a head's weight plus the running context mean.

    ``o_rows`` index the category subspace x_o, ``s_rows`` the context
    subspace x_s. ``xs_bar`` is the mean of the last ``history`` batch means
    of x_s and is the zero vector until the first update.
    """

    def __init__(self, head: nn.Linear, o_rows, mode: str = "middle", history: int = 10):
        d = head.in_features
        o_rows = np.sort(np.asarray(o_rows, dtype=np.int64))
        if len(o_rows) == 0 or len(o_rows) >= d or len(np.unique(o_rows)) != len(o_rows):
            raise ValueError("o_rows must be a proper, non-empty subset of the feature rows")
        if o_rows.min() < 0 or o_rows.max() >= d:
            raise ValueError("o_rows out of range")
        self.head = head
        self.mode = mode
        self.o_rows = torch.as_tensor(o_rows)
        mask = np.ones(d, bool)
        mask[o_rows] = False
        self.s_rows = torch.as_tensor(np.flatnonzero(mask))
        self.history = history
        self.xs_history: deque[Tensor] = deque(maxlen=history)
        self.xs_bar = torch.zeros(len(self.s_rows), dtype=head.weight.dtype)

    @property
    def d_o(self) -> int:
        return len(self.o_rows)

    def w_o(self) -> Tensor:
        """(D_o, M) slice of W."""
        return self.head.weight[:, self.o_rows].T

    def w_s(self) -> Tensor:
        return self.head.weight[:, self.s_rows].T

    def parts(self, x: Tensor):
        return x[..., self.o_rows], x[..., self.s_rows]

    def split_scores(self, x: Tensor) -> Tensor:
        x_o, x_s = self.parts(x)
        out = x_o @ self.w_o() + x_s @ self.w_s()
        if self.head.bias is not None:
            out = out + self.head.bias
        return out

    def substituted_scores(self, x: Tensor) -> Tensor:
        """W_o^T x_o + W_s^T xs_bar with no gradient reaching W_s."""
        x_o, _ = self.parts(x)
        ctx = (self.xs_bar.to(x.dtype) @ self.w_s()).detach()
        out = x_o @ self.w_o() + ctx
        if self.head.bias is not None:
            out = out + self.head.bias
        return out

    def update_xs_history(self, batch_mean: Tensor) -> Tensor:
        self.xs_history.append(batch_mean.detach().clone())
        self.xs_bar = torch.stack(list(self.xs_history)).mean(dim=0)
        return self.xs_bar

    def state(self) -> dict:
        return {
            "mode": self.mode,
            "o_rows": self.o_rows.tolist(),
            "history": self.history,
            "xs_history": [t.tolist() for t in self.xs_history],
            "xs_bar": self.xs_bar.tolist(),
        }

    @classmethod
    def from_state(cls, head: nn.Linear, state: dict) -> "SplitClassifierHead":
        s = cls(head, state["o_rows"], state.get("mode", "middle"), state.get("history", 10))
        dtype = head.weight.dtype
        for v in state.get("xs_history", []):
            s.xs_history.append(torch.tensor(v, dtype=dtype))
        s.xs_bar = torch.tensor(state["xs_bar"], dtype=dtype)
        return s


def split_head(head: nn.Linear, mode: str = "middle", d_o: int | None = None, seed: int = 0,
               history: int = 10) -> SplitClassifierHead:
    d = head.in_features
    if d_o is None:
        d_o = d // 2
    if not 0 < d_o < d:
        raise ValueError(f"d_o must be in (0, {d}), got {d_o}")
    if mode == "middle":
        rows = np.arange(d_o)
    elif mode == "random":
        rows = np.random.default_rng(seed).choice(d, size=d_o, replace=False)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return SplitClassifierHead(head, rows, mode, history)


def feature_split_forward(x: Tensor, split: SplitClassifierHead):
    """Return (plain, substituted) scores; the caller picks per sample."""
    return split.split_scores(x), split.substituted_scores(x)


def update_xs_history(split: SplitClassifierHead, batch_mean: Tensor) -> Tensor:
    return split.update_xs_history(batch_mean)


# -- class activation maps -------------------------------------------------------

def normalize_cam(cam: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-map min-max scaling over the last two dims; constant maps -> 0."""
    flat = cam.flatten(-2)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    scaled = (flat - lo) / torch.where(span > eps, span, torch.ones_like(span))
    scaled = torch.where(span > eps, scaled, torch.zeros_like(scaled))
    return scaled.view_as(cam)


def cams(feature_map: Tensor, weight: Tensor, classes, normalize: bool = True,
         rows=None) -> Tensor:
    """CAMs for a batch: (B, D, H, W) features, (M, D) head weight -> (B, K, H, W).

    ``rows`` restricts the weighted sum to a subset of feature channels (the
    W_o- or W_s-only maps of a split head).
    """
    w = weight[list(classes)]
    if rows is not None:
        w = w[:, rows]
        feature_map = feature_map[:, rows]
    out = torch.einsum("kd,bdhw->bkhw", w, feature_map)
    return normalize_cam(out) if normalize else out


def compute_cam(feature_map: Tensor, head: nn.Linear, r: int, normalize: bool = True) -> Tensor:
    """Single-image CAM: (D, H, W) features -> (H, W) map for category ``r``."""
    if not 0 <= r < head.out_features:
        raise ValueError(f"category {r} out of range")
    return cams(feature_map.unsqueeze(0), head.weight, [r], normalize)[0, 0]


# -- checkpoints ---------------------------------------------------------------

@dataclass
class ModelState:
    model: MultiLabelNet
    split: SplitClassifierHead | None = None
    optimizer_state: dict | None = None
    epoch: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(state: ModelState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "arch": json.dumps(state.model.arch, sort_keys=True),
        "weights": state.model.state_dict(),
        "split": json.dumps(state.split.state() if state.split else None, sort_keys=True),
        "optimizer": state.optimizer_state,
        "epoch": state.epoch,
        "seed": state.seed,
        "meta": json.dumps(state.meta, sort_keys=True),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path, expected_feature_dim: int | None = None,
                    expected_categories: int | None = None) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        arch = json.loads(payload["arch"])
        split_state = json.loads(payload["split"])
        meta = json.loads(payload["meta"])
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if expected_feature_dim is not None and arch["feature_dim"] != expected_feature_dim:
        raise CheckpointError(
            f"{path}: feature dim {arch['feature_dim']} != expected {expected_feature_dim}")
    if expected_categories is not None and arch["num_categories"] != expected_categories:
        raise CheckpointError(
            f"{path}: {arch['num_categories']} outputs != expected {expected_categories}")
    model = build_model(arch)
    try:
        model.load_state_dict(payload["weights"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not fit architecture: {exc}") from exc
    split = SplitClassifierHead.from_state(model.fc, split_state) if split_state else None
    return ModelState(model, split, payload["optimizer"], int(payload["epoch"]),
                      int(payload["seed"]), meta)
