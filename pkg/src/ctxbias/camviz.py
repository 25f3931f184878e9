"""Upsampled CAMs, peak-localization checks and heatmap overlays."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import LabeledDataset
from .inference import Preprocess, eval_images, to_tensor
from .model import MultiLabelNet, cams


@torch.no_grad()
def image_cams(model: MultiLabelNet, images: np.ndarray, classes, rows=None,
               size: tuple[int, int] | None = None) -> np.ndarray:
    """Normalized CAMs, bilinearly upsampled to the input size: (B, K, H, W)."""
    model.eval()
    if len(images) == 0:
        return np.zeros((0, len(classes)) + (size or images.shape[1:3]))
    x = to_tensor(images, next(model.parameters()).dtype)
    fmap = model.extract(x).feature_map
    raw = cams(fmap, model.fc.weight, classes, normalize=False, rows=rows)
    up = F.interpolate(raw, size=size or tuple(images.shape[1:3]), mode="bilinear",
                       align_corners=False)
    lo = up.flatten(2).min(-1).values[..., None, None]
    hi = up.flatten(2).max(-1).values[..., None, None]
    span = hi - lo
    out = torch.where(span > 0, (up - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                      torch.zeros_like(up))
    return out.numpy()


def cam_peak_hits(model: MultiLabelNet, dataset: LabeledDataset, rows, b: int,
                  prep: Preprocess) -> np.ndarray:
    """Whether the CAM of ``b`` peaks inside ``b``'s bounding box, per row
    (rows taken in ascending order).

    Needs ``dataset.boxes`` and an evaluation transform that keeps pixel
    coordinates (resize == crop == image size).
    """
    if dataset.boxes is None:
        raise ValueError("dataset carries no bounding boxes")
    rows = np.sort(np.asarray(rows, dtype=np.int64))
    images = eval_images(dataset.subset(rows), prep) if len(rows) else np.zeros((0, 1, 1, 3))
    maps = image_cams(model, images, [b])[:, 0] if len(rows) else np.zeros((0, 1, 1))
    hits = np.zeros(len(rows), bool)
    for k, i in enumerate(rows):
        y, x = np.unravel_index(int(np.argmax(maps[k])), maps[k].shape)
        x0, y0, x1, y1 = dataset.boxes[dataset.ids[i]][b]
        hits[k] = x0 <= x < x1 and y0 <= y < y1
    return hits


def overlay(image: np.ndarray, cam: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Alpha-blend a color-mapped [0, 1] CAM onto an RGB uint8 image."""
    from matplotlib import colormaps

    if cam.shape != image.shape[:2]:
        cam = np.asarray(Image.fromarray((cam * 255).astype(np.uint8)).resize(
            (image.shape[1], image.shape[0]), Image.BILINEAR), dtype=np.float64) / 255.0
    heat = colormaps[cmap](np.clip(cam, 0, 1))[..., :3] * 255.0
    out = (1 - alpha) * image.astype(np.float64) + alpha * heat
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def save_png(array: np.ndarray, path, scale: int = 1) -> None:
    im = Image.fromarray(array)
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    im.save(path)
