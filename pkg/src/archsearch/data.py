"""Synthetic segmentation data, augmentation, metrics and a simple on-disk format.

Scenes are dark noisy backgrounds (class 0) carrying bright rectangles,
ellipses and striped patches.  A shape's colour is drawn independently of
its class, so telling classes apart takes spatial context, not colour.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import _interp_matrix

IGNORE = 255
SHAPES = ("rectangle", "ellipse", "stripes")
BACKGROUND_MAX = 0.3
SHAPE_MIN = 0.45


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 64
    n_val: int = 16
    height: int = 64
    width: int = 128
    num_classes: int = 4
    noise: float = 0.05
    shapes_per_class: tuple = (1, 3)


@dataclass
class SegDataset:
    images: np.ndarray          # (N, 3, H, W) in [0, 1]
    labels: np.ndarray          # (N, H, W) in [0, K) or 255
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n, c, h, w = self.images.shape
        if c != 3 or self.labels.shape != (n, h, w):
            raise ValueError(f"image/label shapes disagree: {self.images.shape} vs {self.labels.shape}")
        bad = (self.labels != IGNORE) & ((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.any():
            raise ValueError("labels outside [0, K) and not the ignore value")

    def __len__(self):
        return len(self.images)

    @property
    def size(self):
        return self.images.shape[2:]

    def sample(self, i):
        return self.images[i], self.labels[i]

    def subset(self, idx):
        return SegDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class DatasetSplit:
    train: SegDataset
    val: SegDataset

    @property
    def num_classes(self):
        return self.train.num_classes


# ---------------------------------------------------------------- generation

def _shape_mask(kind, h, w, rng, scale):
    """Boolean mask of one shape plus, for stripes, the band pattern inside it."""
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "ellipse":
        ry = rng.uniform(5, 13) * scale
        rx = rng.uniform(7, 20) * scale
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0, None
    bh = int(rng.integers(10, 26) * scale)
    bw = int(rng.integers(14, 40) * scale)
    y0 = int(rng.integers(-bh // 3, h - 2 * bh // 3))
    x0 = int(rng.integers(-bw // 3, w - 2 * bw // 3))
    m = (yy >= y0) & (yy < y0 + bh) & (xx >= x0) & (xx < x0 + bw)
    if kind == "rectangle":
        return m, None
    period = int(rng.integers(4, 7))
    if rng.random() < 0.5:
        bands = ((xx - x0) % period) < period // 2
    else:
        bands = ((yy - y0) % period) < period // 2
    return m, bands


def _scene(spec: SyntheticSpec, rng):
    h, w, k = spec.height, spec.width, spec.num_classes
    base = rng.uniform(0.0, BACKGROUND_MAX * 0.8, size=3)
    img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    lab = np.zeros((h, w), dtype=np.int64)
    lo, hi = spec.shapes_per_class
    objs = []
    for c in range(1, k):
        objs += [c] * int(rng.integers(lo, hi + 1))
    objs = [objs[i] for i in rng.permutation(len(objs))]
    for c in objs:
        kind = SHAPES[(c - 1) % len(SHAPES)]
        scale = 1.0 + 0.35 * ((c - 1) // len(SHAPES))
        mask, bands = _shape_mask(kind, h, w, rng, scale)
        color = rng.uniform(SHAPE_MIN, 1.0, size=3)
        patch = np.broadcast_to(color[:, None, None], (3, h, w))
        if bands is not None:
            dark = rng.uniform(0.0, BACKGROUND_MAX * 0.8, size=3)
            patch = np.where(bands[None], patch, dark[:, None, None])
        img = np.where(mask[None], patch, img)
        lab[mask] = c
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), lab


def _generate(spec, n, rng):
    imgs = np.empty((n, 3, spec.height, spec.width))
    labs = np.empty((n, spec.height, spec.width), dtype=np.int64)
    for i in range(n):
        imgs[i], labs[i] = _scene(spec, rng)
    return SegDataset(imgs, labs, spec.num_classes)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> DatasetSplit:
    """Train/val scenes; a pure function of ``(spec, seed)``."""
    if spec.num_classes < 2:
        raise ValueError("need at least two classes")
    if spec.n_train < 1 or spec.n_val < 1:
        raise ValueError("need at least one train and one val image")
    train_seq, val_seq = np.random.SeedSequence(seed).spawn(2)
    return DatasetSplit(_generate(spec, spec.n_train, np.random.default_rng(train_seq)),
                        _generate(spec, spec.n_val, np.random.default_rng(val_seq)))


def class_frequencies(ds: SegDataset):
    lab = ds.labels[ds.labels != IGNORE]
    return np.bincount(lab, minlength=ds.num_classes) / max(lab.size, 1)


# -------------------------------------------------------------- augmentation

def _resize_image(img, h, w):
    rows, cols = _interp_matrix(h, img.shape[1]), _interp_matrix(w, img.shape[2])
    return np.matmul(np.matmul(rows, img), cols.T)


def _resize_label(lab, h, w):
    ri = np.minimum((np.arange(h) + 0.5) * lab.shape[0] / h, lab.shape[0] - 1).astype(int)
    ci = np.minimum((np.arange(w) + 0.5) * lab.shape[1] / w, lab.shape[1] - 1).astype(int)
    return lab[ri][:, ci]


def augment(image, label, rng, crop_size=None, scale_range=(0.5, 2.0), flip_prob=0.5,
            flip=None, scale=None):
    """Random horizontal flip, random rescale and a random crop back to ``crop_size``.

    ``flip``/``scale`` override the random draws.  Images are resampled
    bilinearly, labels by nearest neighbour; crop padding is 0 for the image
    and the ignore label for the mask.
    """
    image = np.asarray(image, dtype=np.float64)
    label = np.asarray(label)
    h0, w0 = label.shape
    ch, cw = (h0, w0) if crop_size is None else crop_size
    do_flip = rng.random() < flip_prob if flip is None else flip
    s = rng.uniform(*scale_range) if scale is None else scale
    if do_flip:
        image, label = image[:, :, ::-1], label[:, ::-1]
    nh, nw = max(1, int(round(h0 * s))), max(1, int(round(w0 * s)))
    if (nh, nw) != (h0, w0):
        image, label = _resize_image(image, nh, nw), _resize_label(label, nh, nw)
    ph, pw = max(ch - nh, 0), max(cw - nw, 0)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=IGNORE)
    y0 = int(rng.integers(0, image.shape[1] - ch + 1))
    x0 = int(rng.integers(0, image.shape[2] - cw + 1))
    return (np.ascontiguousarray(image[:, y0:y0 + ch, x0:x0 + cw]),
            np.ascontiguousarray(label[y0:y0 + ch, x0:x0 + cw]))


# ------------------------------------------------------------------- metrics

def confusion_matrix(pred, label, num_classes, ignore_index=IGNORE):
    """K x K counts, rows = ground truth, columns = prediction."""
    pred, label = np.asarray(pred).ravel(), np.asarray(label).ravel()
    keep = label != ignore_index
    p, t = pred[keep].astype(np.int64), label[keep].astype(np.int64)
    if ((t < 0) | (t >= num_classes) | (p < 0) | (p >= num_classes)).any():
        raise ValueError("class index out of range")
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes,
                                                                               num_classes)


def class_iou(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm) -> float:
    """Mean IoU over classes that occur in the labels or the predictions."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    iou = class_iou(cm)
    return float(np.nanmean(iou))


# ------------------------------------------------------------------ disk I/O

def save_dataset(ds: SegDataset, root):
    """images/NNNN.ppm (8-bit RGB), labels/NNNN.pgm (8-bit), manifest.json."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    pairs = []
    for i in range(len(ds)):
        img = np.round(ds.images[i].transpose(1, 2, 0) * 255).astype(np.uint8)
        ip, lp = f"images/{i:04d}.ppm", f"labels/{i:04d}.pgm"
        Image.fromarray(img, "RGB").save(os.path.join(root, ip))
        Image.fromarray(ds.labels[i].astype(np.uint8), "L").save(os.path.join(root, lp))
        pairs.append([ip, lp])
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump({"num_classes": ds.num_classes, "pairs": pairs}, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(root, label_map=None) -> SegDataset:
    """Read a directory written by :func:`save_dataset` (or laid out the same way).

    ``label_map`` maps raw label values to class ids; unmapped values become
    the ignore label.
    """
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as f:
        man = json.load(f)
    k = int(man["num_classes"])
    lut = None
    if label_map is not None:
        lut = np.full(256, IGNORE, dtype=np.int64)
        for src, dst in label_map.items():
            lut[int(src)] = int(dst)
    imgs, labs = [], []
    for ip, lp in man["pairs"]:
        img = np.asarray(Image.open(os.path.join(root, ip)).convert("RGB"), dtype=np.float64) / 255
        lab = np.asarray(Image.open(os.path.join(root, lp)), dtype=np.int64)
        if lut is not None:
            lab = lut[lab]
        imgs.append(img.transpose(2, 0, 1))
        labs.append(lab)
    return SegDataset(np.stack(imgs), np.stack(labs), k)
