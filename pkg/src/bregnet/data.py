"""Datasets: FER2013 CSV, raw-tensor manifests, prediction files, synthetic data."""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataFormatError

CATEGORICAL = "categorical"
DIMENSIONAL = "dimensional"
SPLITS = ("train", "val", "test")

FER2013_HEADER = ["emotion", "pixels", "Usage"]
FER2013_USAGE = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}
FER2013_CLASSES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
FER2013_SIDE = 48

CATEGORICAL_PRED_HEADER = ["pred", "gt"]
DIMENSIONAL_PRED_HEADER = ["pred_valence", "pred_arousal", "gt_valence", "gt_arousal"]


@dataclass
class Dataset:
    """Images ``[N, c, h, w]`` with integer labels ``[N]`` or (valence, arousal) ``[N, 2]``."""

    images: np.ndarray
    labels: np.ndarray
    task: str = CATEGORICAL
    split: str = "train"
    num_classes: int = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be [N, c, h, w], got shape {self.images.shape}")
        n = self.images.shape[0]
        if self.split not in SPLITS:
            raise ContractError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.task == CATEGORICAL:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.num_classes is None or self.num_classes < 1:
                raise ContractError("categorical dataset needs num_classes >= 1")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ContractError(f"labels must lie in [0, {self.num_classes})")
        elif self.task == DIMENSIONAL:
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1, 2)
            if self.labels.size and np.abs(self.labels).max() > 1.0:
                raise ContractError("valence/arousal labels must lie in [-1, 1]")
            self.num_classes = None
        else:
            raise ContractError(f"task must be {CATEGORICAL!r} or {DIMENSIONAL!r}, got {self.task!r}")
        if self.labels.shape[0] != n:
            raise ContractError(f"{n} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], self.task,
                       split or self.split, self.num_classes)

    def class_frequencies(self):
        return class_frequencies(self)

    def standardized(self, mean, std):
        """Copy with per-channel ``(x - mean) / std`` applied."""
        mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
        std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
        return Dataset((self.images - mean) / std, self.labels, self.task, self.split, self.num_classes)


def channel_stats(data):
    mean = data.images.mean(axis=(0, 2, 3))
    std = data.images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def class_frequencies(data):
    if data.task != CATEGORICAL:
        raise ContractError("class frequencies are only defined for categorical data")
    return [int(c) for c in np.bincount(data.labels, minlength=data.num_classes)]


# ------------------------------------------------------------------ FER2013

def load_fer2013_csv(path):
    """Parse the official FER2013 CSV into ``{"train", "val", "test"}`` datasets.

    Pixels are scaled from 0..255 to [0, 1] and reshaped row-major to 1x48x48.
    """
    n_pix = FER2013_SIDE * FER2013_SIDE
    images = {s: [] for s in SPLITS}
    labels = {s: [] for s in SPLITS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != FER2013_HEADER:
            raise DataFormatError(f"expected header {','.join(FER2013_HEADER)!r}, got {header!r}", path, 1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"expected 3 fields, got {len(row)}", path, line)
            emotion, pixels, usage = row
            try:
                label = int(emotion)
            except ValueError:
                raise DataFormatError(f"emotion {emotion!r} is not an integer", path, line) from None
            if not 0 <= label < len(FER2013_CLASSES):
                raise DataFormatError(f"emotion {label} outside 0..6", path, line)
            split = FER2013_USAGE.get(usage.strip())
            if split is None:
                raise DataFormatError(f"unknown Usage tag {usage!r}", path, line)
            fields = pixels.split()
            if len(fields) != n_pix:
                raise DataFormatError(f"expected {n_pix} pixels, got {len(fields)}", path, line)
            try:
                values = np.array(fields, dtype=np.float64)
            except ValueError:
                raise DataFormatError("non-numeric pixel value", path, line) from None
            if values.min() < 0 or values.max() > 255:
                raise DataFormatError("pixel value outside 0..255", path, line)
            images[split].append(values.reshape(1, FER2013_SIDE, FER2013_SIDE) / 255.0)
            labels[split].append(label)
    empty = np.zeros((0, 1, FER2013_SIDE, FER2013_SIDE))
    return {
        s: Dataset(np.stack(images[s]) if images[s] else empty, labels[s], CATEGORICAL, s,
                   len(FER2013_CLASSES))
        for s in SPLITS
    }


def write_fer2013_csv(path, splits):
    """Inverse of :func:`load_fer2013_csv` for 1x48x48 categorical data."""
    usage = {v: k for k, v in FER2013_USAGE.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FER2013_HEADER)
        for s in SPLITS:
            data = splits.get(s)
            if data is None:
                continue
            for img, label in zip(data.images, data.labels):
                px = np.rint(np.clip(img, 0, 1) * 255).astype(int).ravel()
                w.writerow([int(label), " ".join(map(str, px)), usage[s]])


# ------------------------------------------------------------------ manifest
#
# A manifest is a CSV with header
#   path,channels,height,width,label                  (categorical)
#   path,channels,height,width,valence,arousal        (dimensional)
# and an optional trailing "split" column.  ``path`` is relative to the
# manifest and names a file of channels*height*width little-endian float64
# values in row-major [c, h, w] order.

MANIFEST_BASE = ["path", "channels", "height", "width"]


def load_manifest(path, num_classes=None):
    root = os.path.dirname(os.path.abspath(path))
    rows = {s: ([], []) for s in SPLITS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in (next(reader, None) or [])]
        has_split = header[-1:] == ["split"]
        fields = header[:-1] if has_split else header
        if fields == MANIFEST_BASE + ["label"]:
            task = CATEGORICAL
        elif fields == MANIFEST_BASE + ["valence", "arousal"]:
            task = DIMENSIONAL
        else:
            raise DataFormatError(f"unrecognised manifest header {header!r}", path, 1)
        shape = None
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", path, line)
            split = row[-1].strip() if has_split else "train"
            if split not in SPLITS:
                raise DataFormatError(f"unknown split {split!r}", path, line)
            try:
                c, h, w = (int(v) for v in row[1:4])
                label = int(row[4]) if task == CATEGORICAL else (float(row[4]), float(row[5]))
            except ValueError as exc:
                raise DataFormatError(str(exc), path, line) from None
            if shape is not None and (c, h, w) != shape:
                raise DataFormatError(f"shape {(c, h, w)} differs from earlier rows {shape}", path, line)
            shape = (c, h, w)
            if task == DIMENSIONAL and max(abs(label[0]), abs(label[1])) > 1:
                raise DataFormatError("valence/arousal outside [-1, 1]", path, line)
            file = os.path.join(root, row[0])
            try:
                raw = np.fromfile(file, dtype="<f8")
            except OSError as exc:
                raise DataFormatError(f"cannot read {row[0]}: {exc}", path, line) from None
            if raw.size != c * h * w:
                raise DataFormatError(f"{row[0]} holds {raw.size} values, expected {c * h * w}", path, line)
            rows[split][0].append(raw.astype(np.float64).reshape(c, h, w))
            rows[split][1].append(label)
    if task == CATEGORICAL and num_classes is None:
        all_labels = [l for s in SPLITS for l in rows[s][1]]
        num_classes = max(all_labels) + 1 if all_labels else 1
    out = {}
    for s in SPLITS:
        imgs, labels = rows[s]
        if not imgs:
            continue
        out[s] = Dataset(np.stack(imgs), labels if task == CATEGORICAL else np.array(labels),
                         task, s, num_classes)
    return out


def write_manifest(path, splits):
    """Write datasets as a manifest plus one raw tensor file per sample."""
    root = os.path.dirname(os.path.abspath(path))
    tensor_dir = os.path.splitext(os.path.basename(path))[0] + "_tensors"
    os.makedirs(os.path.join(root, tensor_dir), exist_ok=True)
    task = next(iter(splits.values())).task
    label_cols = ["label"] if task == CATEGORICAL else ["valence", "arousal"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_BASE + label_cols + ["split"])
        for s, data in splits.items():
            for i, (img, label) in enumerate(zip(data.images, data.labels)):
                rel = f"{tensor_dir}/{s}_{i:06d}.f64"
                np.ascontiguousarray(img, dtype="<f8").tofile(os.path.join(root, rel))
                labels = [int(label)] if task == CATEGORICAL else [repr(float(v)) for v in label]
                w.writerow([rel, *img.shape] + labels + [s])


# --------------------------------------------------------------- predictions

def write_predictions(path, pred, gt, task):
    pred, gt = np.asarray(pred), np.asarray(gt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if task == CATEGORICAL:
            w.writerow(CATEGORICAL_PRED_HEADER)
            for p, g in zip(pred.ravel(), gt.ravel()):
                w.writerow([int(p), int(g)])
        elif task == DIMENSIONAL:
            w.writerow(DIMENSIONAL_PRED_HEADER)
            for p, g in zip(pred.reshape(-1, 2), gt.reshape(-1, 2)):
                w.writerow([repr(float(v)) for v in (*p, *g)])
        else:
            raise ContractError(f"unknown task {task!r}")


def load_predictions(path, task):
    """Read a prediction CSV; returns ``(pred, gt)`` numpy arrays.

    Categorical files give two int vectors, dimensional files two ``[n, 2]``
    (valence, arousal) arrays with every value checked to lie in [-1, 1].
    """
    expected = {CATEGORICAL: CATEGORICAL_PRED_HEADER, DIMENSIONAL: DIMENSIONAL_PRED_HEADER}.get(task)
    if expected is None:
        raise ContractError(f"unknown task {task!r}")
    pred, gt = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in (next(reader, None) or [])]
        if header != expected:
            raise DataFormatError(f"expected header {','.join(expected)!r}, got {','.join(header)!r}", path, 1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(expected):
                raise DataFormatError(f"expected {len(expected)} fields, got {len(row)}", path, line)
            try:
                if task == CATEGORICAL:
                    p, g = int(row[0]), int(row[1])
                    if p < 0 or g < 0:
                        raise ValueError("class labels must be non-negative")
                    pred.append(p)
                    gt.append(g)
                else:
                    vals = [float(v) for v in row]
                    for name, v in zip(expected, vals):
                        if not math.isfinite(v) or abs(v) > 1.0:
                            raise ValueError(f"{name} = {v} outside [-1, 1]")
                    pred.append(vals[:2])
                    gt.append(vals[2:])
            except ValueError as exc:
                raise DataFormatError(str(exc), path, line) from None
    if task == CATEGORICAL:
        return np.array(pred, dtype=np.int64), np.array(gt, dtype=np.int64)
    return np.array(pred, dtype=np.float64).reshape(-1, 2), np.array(gt, dtype=np.float64).reshape(-1, 2)


# ----------------------------------------------------------------- synthetic

SYNTH_KINDS = ("blobs", "rings")


def _grid(size):
    rr, cc = np.mgrid[0:size, 0:size]
    return rr.astype(np.float64), cc.astype(np.float64)


def _render(kind, size, row, col, radius=None):
    rr, cc = _grid(size)
    d2 = (rr - row) ** 2 + (cc - col) ** 2
    if kind == "blobs":
        width = size / 8.0
        return np.exp(-d2 / (2 * width * width))
    return np.exp(-((np.sqrt(d2) - radius) ** 2) / 2.0)


def dimensional_center(valence, arousal, size):
    """Pixel (row, col) encoding a (valence, arousal) pair; arousal points up."""
    return (1.0 - arousal) / 2.0 * (size - 1), (valence + 1.0) / 2.0 * (size - 1)


def render_dimensional(kind, valence, arousal, size):
    row, col = dimensional_center(valence, arousal, size)
    return _render(kind, size, row, col, radius=size / 6.0)


def synth_generate(kind="blobs", n_per_class=32, image_size=16, noise=0.1, task=CATEGORICAL,
                   num_classes=2, seed=0, class_counts=None, split="train"):
    """Seeded synthetic images.

    Categorical ``blobs`` place a Gaussian spot at a class-specific angle on a
    circle; ``rings`` draw a ring whose radius grows with the class index.
    Both jitter the position by up to 1/16 of the image per axis.
    Dimensional data draws (valence, arousal) uniformly from [-1, 1]^2 and
    renders the pattern at :func:`dimensional_center`; ``n_per_class`` is
    then the total sample count.  Gaussian pixel noise of std ``noise`` is
    added last.
    """
    if kind not in SYNTH_KINDS:
        raise ContractError(f"kind must be one of {SYNTH_KINDS}, got {kind!r}")
    if image_size < 4:
        raise ContractError("image_size must be at least 4")
    if noise < 0:
        raise ContractError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    size = int(image_size)
    if task == DIMENSIONAL:
        n = int(n_per_class)
        if n < 1:
            raise ContractError("n must be >= 1")
        labels = rng.uniform(-1.0, 1.0, size=(n, 2))
        images = np.stack([render_dimensional(kind, v, a, size) for v, a in labels])
        images = images + noise * rng.standard_normal(images.shape)
        return Dataset(images[:, None], labels, DIMENSIONAL, split)
    if task != CATEGORICAL:
        raise ContractError(f"unknown task {task!r}")
    if num_classes < 2:
        raise ContractError("categorical synthetic data needs at least 2 classes")
    counts = list(class_counts) if class_counts is not None else [int(n_per_class)] * num_classes
    if len(counts) != num_classes or min(counts) < 1:
        raise ContractError("need a positive count for every class")
    c0 = (size - 1) / 2.0
    jitter = size / 16.0
    images, labels = [], []
    for k, count in enumerate(counts):
        for _ in range(count):
            dr, dc = rng.uniform(-jitter, jitter, size=2)
            if kind == "blobs":
                theta = 2 * math.pi * k / num_classes
                r = 0.25 * size
                img = _render(kind, size, c0 + r * math.sin(theta) + dr, c0 + r * math.cos(theta) + dc)
            else:
                radius = size * (0.12 + 0.3 * k / (num_classes - 1))
                img = _render(kind, size, c0 + dr, c0 + dc, radius)
            images.append(img)
            labels.append(k)
    images = np.stack(images)[:, None]
    images = images + noise * rng.standard_normal(images.shape)
    order = rng.permutation(len(labels))
    return Dataset(images[order], np.array(labels)[order], CATEGORICAL, split, num_classes)
