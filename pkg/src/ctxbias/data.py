"""Datasets, label matrices, pair image sets and the synthetic shape generator."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MATRIX_FILE = "labels.csv"
BOXES_FILE = "boxes.json"


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class LabeledDataset:
    """Image ids, optional pixels, and an N x M binary label matrix.

    ``images`` is either an (N, H, W, 3) uint8 array held in memory, or None
    with ``image_dir`` pointing at ``<image_id>.png`` files loaded on demand.
    ``image_pattern`` names the file of an id inside ``image_dir``.
    ``boxes`` maps image id -> {category index: (x0, y0, x1, y1)} when the
    pixel layout is known (synthetic data).
    """

    ids: list[str]
    labels: np.ndarray
    category_names: list[str]
    split: str = "train"
    images: np.ndarray | None = None
    image_dir: Path | None = None
    boxes: dict[str, dict[int, tuple[int, int, int, int]]] | None = None
    image_pattern: str = "{id}.png"
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.category_names = list(self.category_names)
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DataError(f"labels must be 2-D, got shape {labels.shape}")
        if labels.shape != (len(self.ids), len(self.category_names)):
            raise DataError(
                f"labels shape {labels.shape} does not match "
                f"{len(self.ids)} ids x {len(self.category_names)} categories")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise DataError("labels must contain only 0/1")
        self.labels = labels.astype(np.uint8)
        if len(self.category_names) < 2:
            raise DataError("need at least two categories")
        if len(set(self.category_names)) != len(self.category_names):
            raise DataError("duplicate category names")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        self._index = {k: i for i, k in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise DataError("duplicate image ids")
        if self.images is not None and len(self.images) != len(self.ids):
            raise DataError("images and ids differ in length")
        if self.image_dir is not None:
            self.image_dir = Path(self.image_dir)

    def __len__(self):
        return len(self.ids)

    @property
    def num_categories(self) -> int:
        return len(self.category_names)

    def index_of(self, image_id: str) -> int:
        try:
            return self._index[str(image_id)]
        except KeyError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def category_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            idx = int(name_or_index)
            if not 0 <= idx < self.num_categories:
                raise DataError(f"category index {idx} out of range")
            return idx
        try:
            return self.category_names.index(name_or_index)
        except ValueError:
            raise DataError(f"unknown category {name_or_index!r}") from None

    def image(self, i: int) -> np.ndarray:
        if self.images is not None:
            return self.images[i]
        if self.image_dir is None:
            raise DataError("dataset has no pixels attached")
        # a fresh file handle per call keeps lazy loading thread-safe
        with Image.open(self.image_dir / self.image_pattern.format(id=self.ids[i])) as im:
            return np.asarray(im.convert("RGB"))

    def load_images(self) -> np.ndarray:
        if self.images is None:
            self.images = np.stack([self.image(i) for i in range(len(self))])
        return self.images

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        indices = np.sort(np.asarray(indices, dtype=np.int64))
        ids = [self.ids[i] for i in indices]
        boxes = None
        if self.boxes is not None:
            boxes = {k: self.boxes[k] for k in ids if k in self.boxes}
        return LabeledDataset(
            ids=ids,
            labels=self.labels[indices],
            category_names=self.category_names,
            split=split or self.split,
            images=None if self.images is None else self.images[indices],
            image_dir=self.image_dir,
            boxes=boxes,
            image_pattern=self.image_pattern,
        )

    def with_labels(self, labels, category_names=None) -> "LabeledDataset":
        return LabeledDataset(
            ids=self.ids, labels=labels,
            category_names=self.category_names if category_names is None else category_names,
            split=self.split, images=self.images, image_dir=self.image_dir, boxes=self.boxes,
            image_pattern=self.image_pattern)


def _sorted(ids, labels, names, split, **kw) -> LabeledDataset:
    order = sorted(range(len(ids)), key=lambda i: str(ids[i]))
    labels = np.asarray(labels).reshape(len(ids), len(names))[order]
    return LabeledDataset([str(ids[i]) for i in order], labels, names, split, **kw)


# -- ingestion ----------------------------------------------------------------

def read_matrix(path, split: str = "train", image_dir=None) -> LabeledDataset:
    """Read the plain ``id,<cat1>,...`` label matrix file."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not rows or not rows[0] or rows[0][0] != "id":
        raise DataError(f"{path}: first line must start with 'id'")
    names = rows[0][1:]
    ids, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise DataError(f"{path}:{lineno}: expected {len(names) + 1} fields, got {len(row)}")
        if any(v not in ("0", "1") for v in row[1:]):
            raise DataError(f"{path}:{lineno}: label fields must be 0 or 1 (record {row[0]!r})")
        ids.append(row[0])
        labels.append([int(v) for v in row[1:]])
    labels = np.array(labels, dtype=np.uint8).reshape(len(ids), len(names))
    return _sorted(ids, labels, names, split, image_dir=image_dir)


def write_matrix(dataset: LabeledDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *dataset.category_names])
        for image_id, row in zip(dataset.ids, dataset.labels):
            w.writerow([image_id, *map(int, row)])


class LabelTable(NamedTuple):
    """Bare (ids, labels, names) triple; unlike LabeledDataset it may have
    any number of categories, including none (a merge source)."""

    ids: list
    labels: np.ndarray
    category_names: list


def coco_table(path, exclude=("unlabeled", "other")) -> LabelTable:
    """Parse a COCO-style instances/stuff JSON file into a LabelTable.

    Categories are ordered by ``category_id``; names in ``exclude`` are
    dropped together with their annotations (COCO-Stuff's catch-all class).
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise DataError(f"{path}: missing '{key}' array")
    try:
        cats = sorted(doc["categories"], key=lambda c: c["id"])
    except (KeyError, TypeError):
        raise DataError(f"{path}: every category record needs an 'id'") from None
    col = {}
    names = []
    dropped = set()
    for c in cats:
        if c["name"] in exclude:
            dropped.add(c["id"])
            continue
        if c["name"] in names:
            raise DataError(f"{path}: category name {c['name']!r} listed twice")
        col[c["id"]] = len(names)
        names.append(c["name"])
    row = {}
    for k, img in enumerate(doc["images"]):
        if not isinstance(img, dict) or "id" not in img:
            raise DataError(f"{path}: image record {k} has no 'id'")
        row[img["id"]] = len(row)
    labels = np.zeros((len(row), len(names)), dtype=np.uint8)
    for k, ann in enumerate(doc["annotations"]):
        try:
            img_id, cat_id = ann["image_id"], ann["category_id"]
        except (KeyError, TypeError):
            raise DataError(f"{path}: annotation record {k} lacks image_id/category_id") from None
        if cat_id in dropped:
            continue
        if cat_id not in col:
            raise DataError(f"{path}: annotation record {k} has unknown category_id {cat_id}")
        if img_id not in row:
            raise DataError(f"{path}: annotation record {k} refers to unknown image_id {img_id}")
        labels[row[img_id], col[cat_id]] = 1
    return LabelTable([str(i) for i in row], labels, names)


def read_coco(path, split: str = "train", exclude=("unlabeled", "other"),
              image_dir=None) -> LabeledDataset:
    t = coco_table(path, exclude)
    return _sorted(t.ids, t.labels, t.category_names, split, image_dir=image_dir)


def merge_label_sources(a: LabeledDataset, b) -> LabeledDataset:
    """OR the label sets of two sources over the same images.

    ``b`` is a LabeledDataset or a LabelTable. Output vocabulary is ``a``'s
    categories followed by ``b``'s new ones.
    """
    b_ids = [str(i) for i in b.ids]
    if set(a.ids) != set(b_ids):
        diff = sorted(set(a.ids) ^ set(b_ids))
        raise DataError(f"image id sets differ; symmetric difference: {diff[:20]}"
                        + (" ..." if len(diff) > 20 else ""))
    b_names = list(b.category_names)
    new = [n for n in b_names if n not in a.category_names]
    names = a.category_names + new
    labels = np.zeros((len(a), len(names)), dtype=np.uint8)
    labels[:, :a.num_categories] = a.labels
    where = {k: i for i, k in enumerate(b_ids)}
    b_rows = np.array([where[i] for i in a.ids], dtype=np.int64)
    b_labels = np.asarray(b.labels, dtype=np.uint8).reshape(len(b_ids), len(b_names))
    for j, name in enumerate(b_names):
        labels[:, names.index(name)] |= b_labels[b_rows, j]
    return LabeledDataset(a.ids, labels, names, a.split, images=a.images,
                          image_dir=a.image_dir, boxes=a.boxes, image_pattern=a.image_pattern)


def load_annotations(source, fmt: str = "matrix", split: str = "train",
                     image_dir=None) -> LabeledDataset:
    """Load a dataset from a matrix file or one/several COCO-style JSON files.

    Several COCO files (e.g. thing + stuff annotations) are merged. Images
    that appear only in later files are ignored, which is how stuff
    annotations indexed by the 2017 split are mapped onto 2014 image lists;
    images of the first file missing from a later one raise.
    """
    if fmt == "matrix":
        return read_matrix(source, split, image_dir=image_dir)
    if fmt != "coco":
        raise DataError(f"unknown annotation format {fmt!r}")
    paths = [source] if isinstance(source, (str, Path)) else list(source)
    merged = read_coco(paths[0], split, image_dir=image_dir)
    for p in paths[1:]:
        other = coco_table(p)
        where = {k: i for i, k in enumerate(other.ids)}
        missing = [i for i in merged.ids if i not in where]
        if missing:
            raise DataError(f"{p}: lacks {len(missing)} image ids of {paths[0]}, "
                            f"e.g. {missing[:5]}")
        rows = [where[i] for i in merged.ids]
        merged = merge_label_sources(
            merged, LabelTable(merged.ids, other.labels[rows], other.category_names))
    return merged


# -- splitting and pair image sets ---------------------------------------------

def partition_train_val(d: LabeledDataset, fraction: float = 0.8, seed: int = 0):
    if not 0 < fraction < 1:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    n_train = int(np.floor(fraction * len(d) + 0.5))
    if n_train in (0, len(d)):
        raise DataError(f"split of {len(d)} items at {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(len(d))
    return d.subset(perm[:n_train], "train"), d.subset(perm[n_train:], "val")


@dataclass(frozen=True)
class PairImageSets:
    b: int
    c: int
    cooccur: tuple[str, ...]
    exclusive: tuple[str, ...]
    other: tuple[str, ...]

    def counts(self) -> dict[str, int]:
        return {"cooccur": len(self.cooccur), "exclusive": len(self.exclusive),
                "other": len(self.other)}


def pair_masks(labels: np.ndarray, b: int, c: int):
    lb = labels[:, b].astype(bool)
    lc = labels[:, c].astype(bool)
    return lb & lc, lb & ~lc, ~lb


def image_sets_for_pair(d: LabeledDataset, b: int, c: int) -> PairImageSets:
    if b == c:
        raise DataError("b and c must differ")
    for k in (b, c):
        if not 0 <= k < d.num_categories:
            raise DataError(f"category index {k} out of range")
    co, ex, ot = pair_masks(d.labels, b, c)
    ids = np.asarray(d.ids, dtype=object)
    return PairImageSets(b, c, tuple(ids[co]), tuple(ids[ex]), tuple(ids[ot]))


# -- preprocessing -------------------------------------------------------------

def _resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    return np.asarray(Image.fromarray(image).resize((width, height), Image.BILINEAR))


def preprocess_eval(image: np.ndarray, resize: int = 256, crop: int = 224) -> np.ndarray:
    """Resize the shorter side to ``resize`` (bilinear), then center-crop ``crop``."""
    h, w = image.shape[:2]
    if h <= w:
        nh, nw = resize, max(crop, int(round(w * resize / h)))
    else:
        nh, nw = max(crop, int(round(h * resize / w))), resize
    out = _resize(image, nh, nw)
    top = (nh - crop) // 2
    left = (nw - crop) // 2
    return out[top:top + crop, left:left + crop]


def random_resized_crop_box(height: int, width: int, rng: np.random.Generator,
                            scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3)):
    """Sample (top, left, h, w) the way torchvision's RandomResizedCrop does."""
    area = height * width
    log_ratio = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(*log_ratio))
        w = int(round(np.sqrt(target * aspect)))
        h = int(round(np.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fall back to a center crop at the clamped ratio
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def preprocess_train(image: np.ndarray, rng: np.random.Generator, crop: int = 224,
                     scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3), flip: bool = True) -> np.ndarray:
    top, left, h, w = random_resized_crop_box(image.shape[0], image.shape[1], rng, scale, ratio)
    out = _resize(np.ascontiguousarray(image[top:top + h, left:left + w]), crop, crop)
    if flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# -- synthetic shapes ----------------------------------------------------------

SHAPES = ("square", "disc", "triangle", "cross", "diamond", "ring", "hbar", "vbar",
          "frame", "checker", "ltri", "plus_ring")

# each color has a channel at 255 so no background pixel (< 64) can match it
PALETTE = (
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (255, 0, 255), (0, 255, 255),
    (255, 128, 0), (128, 0, 255), (0, 255, 128), (255, 0, 128), (128, 255, 0),
    (0, 128, 255),
)
BACKGROUND_MAX = 64


def glyph_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = size / 2.0
    t = max(1, size // 4)
    if shape == "square":
        m = np.ones((size, size), bool)
    elif shape == "disc":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    elif shape == "triangle":
        m = np.abs(xx - c) <= (yy + 1) / 2.0
    elif shape == "cross":
        m = (np.abs(yy - c) < t / 2 + 0.5) | (np.abs(xx - c) < t / 2 + 0.5)
    elif shape == "diamond":
        m = np.abs(yy - c) + np.abs(xx - c) <= r
    elif shape == "ring":
        d = (yy - c) ** 2 + (xx - c) ** 2
        m = (d <= r * r) & (d >= (r - t) ** 2)
    elif shape == "hbar":
        m = np.abs(yy - c) < size / 4 + 0.5
    elif shape == "vbar":
        m = np.abs(xx - c) < size / 4 + 0.5
    elif shape == "frame":
        m = (yy < t) | (yy >= size - t) | (xx < t) | (xx >= size - t)
    elif shape == "checker":
        m = ((yy * 2 // size) + (xx * 2 // size)) % 2 == 0
    elif shape == "ltri":
        m = xx <= yy
    elif shape == "plus_ring":
        d = (yy - c) ** 2 + (xx - c) ** 2
        m = (d >= (r - t) ** 2) & (d <= r * r) | (np.abs(yy - c) < 1) | (np.abs(xx - c) < 1)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    m = np.asarray(m, bool)
    if not m.any():
        m[size // 2, size // 2] = True
    return m


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale stand-in for a real multi-label dataset.

    Each pair ``(b, c, rate)`` gets ``round(biased_fraction * N)`` images of
    ``b``; exactly ``round(rate * n_b)`` of them also contain ``c``. Biased
    categories occupy disjoint image sets so context assignments never
    conflict. Every other category appears independently with ``base_rate``.
    """

    num_images: int = 500
    image_size: int = 32
    num_categories: int = 8
    pair_specs: tuple = ()
    seed: int = 0
    biased_fraction: float = 0.1
    base_rate: float = 0.3
    glyph_size: int = 6
    context_glyph_size: int | None = None
    split: str = "train"
    prefix: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pair_specs",
                           tuple((int(b), int(c), float(r)) for b, c, r in self.pair_specs))

    @property
    def cell(self) -> int:
        return max(self.glyph_size, self.context_glyph_size or 0) + 2

    @property
    def grid(self) -> int:
        return self.image_size // self.cell

    def validate(self):
        if self.num_images < 1:
            raise DataError("num_images must be positive")
        if not 2 <= self.num_categories <= len(PALETTE):
            raise DataError(f"num_categories must be in [2, {len(PALETTE)}]")
        if self.grid ** 2 < self.num_categories:
            raise DataError(
                f"{self.num_categories} categories do not fit a {self.image_size}px image "
                f"({self.grid}x{self.grid} cells of {self.cell}px)")
        bs = [b for b, _, _ in self.pair_specs]
        cs = {c for _, c, _ in self.pair_specs}
        if len(set(bs)) != len(bs):
            raise DataError("each biased category may appear in one pair only")
        if cs & set(bs):
            raise DataError("a category cannot be both biased and context")
        for b, c, rate in self.pair_specs:
            if not (0 <= b < self.num_categories and 0 <= c < self.num_categories) or b == c:
                raise DataError(f"invalid pair ({b}, {c})")
            if not 0.0 <= rate <= 1.0:
                raise DataError(f"cooccur_rate {rate} outside [0, 1]")
        if len(bs) * self.biased_fraction > 1.0 + 1e-9:
            raise DataError("biased_fraction too large for the number of pairs")


def synthetic_labels(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    n, m = cfg.num_images, cfg.num_categories
    labels = (rng.random((n, m)) < cfg.base_rate).astype(np.uint8)
    biased = [b for b, _, _ in cfg.pair_specs]
    labels[:, biased] = 0
    n_b = int(round(cfg.biased_fraction * n))
    perm = rng.permutation(n)
    for k, (b, c, rate) in enumerate(cfg.pair_specs):
        rows = perm[k * n_b:(k + 1) * n_b]
        labels[rows, b] = 1
        n_co = int(round(rate * len(rows)))
        labels[rows, c] = 0
        labels[rows[rng.permutation(len(rows))[:n_co]], c] = 1
    return labels


def render_synthetic(cfg: SyntheticConfig, labels: np.ndarray, rng: np.random.Generator):
    size, cell, grid = cfg.image_size, cfg.cell, cfg.grid
    context = {c for _, c, _ in cfg.pair_specs}
    sizes = [cfg.context_glyph_size if (k in context and cfg.context_glyph_size) else cfg.glyph_size
             for k in range(cfg.num_categories)]
    masks = [glyph_mask(SHAPES[k], sizes[k]) for k in range(cfg.num_categories)]
    offset = (size - grid * cell) // 2
    images = rng.integers(0, BACKGROUND_MAX, size=(len(labels), size, size, 3), dtype=np.uint8)
    boxes = []
    for i, row in enumerate(labels):
        present = np.flatnonzero(row)
        cells = rng.permutation(grid * grid)[:len(present)]
        img_boxes = {}
        for k, cell_id in zip(present, cells):
            gs = sizes[k]
            cy, cx = divmod(int(cell_id), grid)
            y0 = offset + cy * cell + int(rng.integers(0, cell - gs + 1))
            x0 = offset + cx * cell + int(rng.integers(0, cell - gs + 1))
            patch = images[i, y0:y0 + gs, x0:x0 + gs]
            patch[masks[k]] = PALETTE[k]
            ys, xs = np.nonzero(masks[k])
            img_boxes[int(k)] = (x0 + int(xs.min()), y0 + int(ys.min()),
                                 x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1)
        boxes.append(img_boxes)
    return images, boxes


def detect_categories(image: np.ndarray, num_categories: int) -> np.ndarray:
    """Recover labels from pixels by exact palette color match."""
    flat = image.reshape(-1, 3)
    return np.array([np.all(flat == PALETTE[k], axis=1).any() for k in range(num_categories)],
                    dtype=np.uint8)


def generate_synthetic(cfg: SyntheticConfig) -> LabeledDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    labels = synthetic_labels(cfg, rng)
    images, boxes = render_synthetic(cfg, labels, rng)
    width = len(str(cfg.num_images - 1))
    ids = [f"{cfg.prefix}{i:0{width}d}" for i in range(cfg.num_images)]
    names = [f"{SHAPES[k]}" for k in range(cfg.num_categories)]
    return LabeledDataset(ids, labels, names, cfg.split, images=images,
                          boxes=dict(zip(ids, boxes)))


def save_image_dataset(d: LabeledDataset, directory) -> None:
    """Persist as ``<dir>/images/<id>.png`` plus ``labels.csv`` (and boxes)."""
    directory = Path(directory)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, image_id in enumerate(d.ids):
        Image.fromarray(d.image(i)).save(img_dir / f"{image_id}.png")
    write_matrix(d, directory / MATRIX_FILE)
    if d.boxes is not None:
        payload = {k: {str(c): list(b) for c, b in v.items()} for k, v in d.boxes.items()}
        (directory / BOXES_FILE).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_image_dataset(directory, split: str = "train", preload: bool = True) -> LabeledDataset:
    directory = Path(directory)
    d = read_matrix(directory / MATRIX_FILE, split, image_dir=directory / "images")
    boxes_path = directory / BOXES_FILE
    if boxes_path.exists():
        raw = json.loads(boxes_path.read_text(encoding="utf-8"))
        d.boxes = {k: {int(c): tuple(b) for c, b in v.items()} for k, v in raw.items()}
    if preload:
        d.load_images()
    return d
