"""Loss terms for the standard, CAM-based and feature-split objectives."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .model import MultiLabelNet, SplitClassifierHead, cams, feature_split_forward


def bce_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Element-wise binary cross entropy on logits, stable for any magnitude."""
    targets = targets.to(logits.dtype)
    return F.relu(logits) - logits * targets + F.softplus(-logits.abs())


def weighted_bce(logits: Tensor, targets: Tensor, weights: Tensor | None = None) -> Tensor:
    """Sum over classes, mean over the batch."""
    loss = bce_loss(logits, targets)
    if weights is not None:
        loss = loss * weights.to(loss.dtype)
    if loss.numel() == 0:
        return loss.sum()
    return loss.sum(dim=-1).mean()


def alpha_from_counts(cooccur: int, exclusive: int, alpha_min: float = 3.0) -> float:
    if exclusive <= 0:
        raise ValueError("alpha is undefined without exclusive images")
    return max(float(alpha_min), cooccur / exclusive)


def compute_alpha(labels: np.ndarray, pair, alpha_min: float = 3.0) -> float:
    """Co-occurring over exclusive image count of ``b`` (training labels), floored."""
    b, c = pair
    lb = labels[:, b].astype(bool)
    lc = labels[:, c].astype(bool)
    return alpha_from_counts(int((lb & lc).sum()), int((lb & ~lc).sum()), alpha_min)


def class_balanced_weight(n: int, beta: float = 0.99) -> float:
    """Inverse effective number of samples, ``(1 - beta) / (1 - beta**n)``."""
    if n <= 0:
        return 0.0
    return (1.0 - beta) / (1.0 - beta ** n)


def _reduce(per_image: Tensor, reduction: str) -> Tensor:
    if per_image.numel() == 0:
        return per_image.sum()
    if reduction == "mean":
        return per_image.mean()
    if reduction == "sum":
        return per_image.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def overlap_loss(cam_b: Tensor, cam_c: Tensor, reduction: str = "mean") -> Tensor:
    """Summed element-wise product of paired (n, H, W) CAM stacks."""
    if cam_b.shape != cam_c.shape:
        raise ValueError("CAM shapes differ")
    return _reduce((cam_b * cam_c).flatten(1).sum(dim=1), reduction)


def regularization_loss(cam_b: Tensor, cam_c: Tensor, cam_pre_b: Tensor, cam_pre_c: Tensor,
                        reduction: str = "mean") -> Tensor:
    """L1 distance of both CAMs to the frozen model's CAMs."""
    if not (cam_b.shape == cam_c.shape == cam_pre_b.shape == cam_pre_c.shape):
        raise ValueError("CAM shapes differ")
    per = ((cam_pre_b.detach() - cam_b).abs() + (cam_pre_c.detach() - cam_c).abs())
    return _reduce(per.flatten(1).sum(dim=1), reduction)


def partition_batch_cooccur(labels, pairs):
    """Indices of samples where some pair co-occurs, and of all the rest."""
    lab = labels.detach().cpu().numpy() if isinstance(labels, Tensor) else np.asarray(labels)
    co = np.zeros(len(lab), bool)
    for b, c in pairs:
        co |= (lab[:, b] > 0) & (lab[:, c] > 0)
    return np.flatnonzero(co), np.flatnonzero(~co)


def exclusive_mask(labels, pairs) -> np.ndarray:
    lab = labels.detach().cpu().numpy() if isinstance(labels, Tensor) else np.asarray(labels)
    ex = np.zeros(len(lab), bool)
    for b, c in pairs:
        ex |= (lab[:, b] > 0) & (lab[:, c] == 0)
    return ex


def cam_pair_terms(fmap: Tensor, weight: Tensor, fmap_pre: Tensor, weight_pre: Tensor,
                   labels, pairs, normalize: bool = True):
    """Sum of overlap and regularisation terms over pairs and the images
    where each pair co-occurs. Inputs cover the co-occurrence sub-batch only."""
    lab = labels.detach().cpu().numpy() if isinstance(labels, Tensor) else np.asarray(labels)
    l_o = fmap.new_zeros(())
    l_r = fmap.new_zeros(())
    for b, c in pairs:
        rows = np.flatnonzero((lab[:, b] > 0) & (lab[:, c] > 0))
        if len(rows) == 0:
            continue
        idx = torch.as_tensor(rows)
        cur = cams(fmap[idx], weight, [b, c], normalize)
        pre = cams(fmap_pre[idx], weight_pre, [b, c], normalize)
        l_o = l_o + overlap_loss(cur[:, 0], cur[:, 1], "sum")
        l_r = l_r + regularization_loss(cur[:, 0], cur[:, 1], pre[:, 0], pre[:, 1], "sum")
    return l_o, l_r


def cam_total_loss(model: MultiLabelNet, pre_model: MultiLabelNet, images: Tensor,
                   labels: Tensor, pairs, lambda1: float = 0.1, lambda2: float = 0.1,
                   normalize: bool = True, reduction: str = "mean") -> dict[str, Tensor]:
    """``lambda1 * L_O + lambda2 * L_R + L_BCE`` on the co-occurrence sub-batch,
    plain BCE on the rest.

    One forward pass serves both sub-batches; BCE is averaged over the whole
    batch and the CAM terms over the co-occurrence images (``reduction``
    "sum" keeps them summed), so ``lambda1 = lambda2 = 0`` is exactly a
    plain BCE step.
    """
    out = model.extract(images)
    logits = model.fc(out.pooled)
    bce = weighted_bce(logits, labels)
    co, _ = partition_batch_cooccur(labels, pairs)
    l_o = logits.new_zeros(())
    l_r = logits.new_zeros(())
    if len(co) and (lambda1 or lambda2):
        idx = torch.as_tensor(co)
        with torch.no_grad():
            pre_fmap = pre_model.extract(images[idx]).feature_map
        l_o, l_r = cam_pair_terms(out.feature_map[idx], model.fc.weight, pre_fmap,
                                  pre_model.fc.weight, labels[idx], pairs, normalize)
        if reduction == "mean":
            l_o, l_r = l_o / len(co), l_r / len(co)
    total = bce + lambda1 * l_o + lambda2 * l_r
    return {"loss": total, "bce": bce, "overlap": l_o, "reg": l_r, "n_cooccur": len(co)}


def alpha_weights(labels, pairs, alphas, scope: str = "all", dtype=torch.float32) -> Tensor:
    """Per-sample, per-class weights carrying each pair's alpha on class ``b``.

    scope "all" weights class ``b`` on every sample; "exclusive" only where
    ``b`` occurs without ``c``.
    """
    lab = labels.detach().cpu().numpy() if isinstance(labels, Tensor) else np.asarray(labels)
    w = np.ones(lab.shape, dtype=np.float64)
    for (b, c), a in zip(pairs, alphas):
        if scope == "all":
            w[:, b] = a
        elif scope == "exclusive":
            w[(lab[:, b] > 0) & (lab[:, c] == 0), b] = a
        else:
            raise ValueError(f"unknown alpha scope {scope!r}")
    return torch.as_tensor(w, dtype=dtype)


def feature_split_loss(model: MultiLabelNet, split: SplitClassifierHead, images: Tensor,
                       labels: Tensor, pairs, weights: Tensor | None = None,
                       update_history: bool = True) -> dict[str, Tensor]:
    """Dual-forward feature-split objective.

    Exclusive samples (some pair's ``b`` present without ``c``) take the
    loss of the substituted scores ``W_o^T x_o + W_s^T xs_bar`` (no gradient
    into W_s); all others take the plain scores. ``xs_bar`` is then refreshed
    with this batch's mean x_s.
    """
    pooled = model.extract(images).pooled
    plain, subst = feature_split_forward(pooled, split)
    excl = torch.as_tensor(exclusive_mask(labels, pairs))
    loss_plain = bce_loss(plain, labels)
    loss_sub = bce_loss(subst, labels)
    if weights is not None:
        loss_plain = loss_plain * weights.to(loss_plain.dtype)
        loss_sub = loss_sub * weights.to(loss_sub.dtype)
    combined = torch.where(excl[:, None], loss_sub, loss_plain)
    total = combined.sum(dim=1).mean()
    if update_history:
        split.update_xs_history(pooled[:, split.s_rows].detach().mean(dim=0))
    return {"loss": total, "bce": total, "n_exclusive": int(excl.sum())}
