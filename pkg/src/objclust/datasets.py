"""Synthetic multi-digit scenes with box annotations, and loading them back.

Layout of a dataset root::

    root/
      manifest_<split>.json
      annotations_<split>.jsonl   # {"id", "boxes": [[x0,y0,x1,y1],...], "labels": [...]}
      images/<split>/<id>.png     # 8-bit grayscale, lossless
"""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

INK_THRESHOLD = 12  # uint8 intensity; a pixel counts as ink above 0.05 * 255


@dataclass
class SceneRecord:
    id: str
    image: np.ndarray   # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray   # (k, 4) float x_min, y_min, x_max, y_max in pixels
    labels: np.ndarray  # (k,) int


@dataclass
class DatasetManifest:
    root: str
    split: str
    count: int
    source_checksum: str
    seed: int
    image_size: int = 128

    @property
    def annotation_path(self):
        return Path(self.root) / f"annotations_{self.split}.jsonl"

    @property
    def image_dir(self):
        return Path(self.root) / "images" / self.split

    def image_path(self, scene_id):
        return self.image_dir / f"{scene_id}.png"

    def save(self):
        body = asdict(self)
        body.pop("root")
        path = Path(self.root) / f"manifest_{self.split}.json"
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root, split="train"):
        path = Path(root) / f"manifest_{split}.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest for split {split!r}: {path}")
        return cls(root=str(root), **json.loads(path.read_text()))

    def validate(self):
        if not self.annotation_path.is_file():
            raise FileNotFoundError(f"missing annotation file: {self.annotation_path}")
        ids = [json.loads(line)["id"] for line in _lines(self.annotation_path)]
        if len(ids) != self.count:
            raise ValueError(
                f"{self.annotation_path} has {len(ids)} records, manifest says {self.count}")
        for scene_id in ids:
            if not self.image_path(scene_id).is_file():
                raise FileNotFoundError(f"missing image file: {self.image_path(scene_id)}")
        return self


def _lines(path):
    with open(path) as fh:
        return [line for line in fh if line.strip()]


# -- source digits -----------------------------------------------------------

def _read_idx(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        data = fh.read()
    _, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if dtype_code != 0x08:
        raise ValueError(f"{path}: only unsigned-byte IDX files are supported")
    shape = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(shape)


def _find(directory, stems):
    for stem in stems:
        for suffix in ("", ".gz"):
            p = Path(directory) / (stem + suffix)
            if p.is_file():
                return p
    return None


def load_source_digits(path):
    """Load labelled 28x28 digits as ``(images uint8 (n,28,28), labels (n,))``.

    ``path`` may be an ``.npz`` (keys ``x_train``/``y_train`` or
    ``images``/``labels``) or a directory holding the MNIST IDX files
    (optionally gzipped) or an ``mnist.npz``.
    """
    path = Path(path)
    if path.is_dir():
        images = _find(path, ["train-images-idx3-ubyte", "train-images.idx3-ubyte"])
        labels = _find(path, ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])
        if images is not None and labels is not None:
            return _check_digits(_read_idx(images), _read_idx(labels), path)
        if (path / "mnist.npz").is_file():
            path = path / "mnist.npz"
        else:
            raise FileNotFoundError(f"no MNIST IDX files or mnist.npz under {path}")
    if not path.is_file():
        raise FileNotFoundError(f"digit source not found: {path}")
    with np.load(path) as data:
        for xk, yk in (("x_train", "y_train"), ("images", "labels")):
            if xk in data and yk in data:
                return _check_digits(data[xk], data[yk], path)
    raise ValueError(f"{path}: expected arrays x_train/y_train or images/labels")


def _check_digits(images, labels, origin):
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * (255.0 if images.max() <= 1.0 else 1.0)), 0, 255)
        images = images.astype(np.uint8)
    if images.ndim != 3 or len(images) != len(labels):
        raise ValueError(f"{origin}: images must be (n, h, w) with one label each")
    return images, np.asarray(labels).astype(np.int64)


def sklearn_digits(size=28):
    """The 8x8 scikit-learn digits upsampled to ``size`` pixels.

    A small stand-in source for tests and offline smoke runs when MNIST is not
    available; digits occupy the central ~85% of the frame like MNIST.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    inner = int(round(size * 20 / 28))
    pad = (size - inner) // 2
    out = np.zeros((len(bunch.images), size, size), dtype=np.uint8)
    for i, img in enumerate(bunch.images):
        up = Image.fromarray((img / 16.0 * 255).astype(np.uint8)).resize(
            (inner, inner), Image.BILINEAR)
        out[i, pad:pad + inner, pad:pad + inner] = np.asarray(up)
    return out, bunch.target.astype(np.int64)


def source_checksum(images, labels):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()


# -- scene generation ----------------------------------------------------------

def compose_scene(images, labels, rng, image_size=128, max_objects=10):
    """One scene: ``(canvas uint8 (S,S), boxes (k,4), labels (k,))``.

    Draws ``k ~ U{1..max_objects}`` digits with replacement, places each with
    its whole frame inside the canvas and composites by per-pixel max. Boxes
    are tight around each digit's ink.
    """
    dh, dw = images.shape[1:]
    canvas = np.zeros((image_size, image_size), dtype=np.uint8)
    k = int(rng.integers(1, max_objects + 1))
    picks = rng.integers(0, len(images), size=k)
    boxes, classes = [], []
    for idx in picks:
        y0 = int(rng.integers(0, image_size - dh + 1))
        x0 = int(rng.integers(0, image_size - dw + 1))
        digit = images[idx]
        region = canvas[y0:y0 + dh, x0:x0 + dw]
        np.maximum(region, digit, out=region)
        rows = np.flatnonzero((digit > INK_THRESHOLD).any(axis=1))
        cols = np.flatnonzero((digit > INK_THRESHOLD).any(axis=0))
        if len(rows) == 0:
            box = [x0, y0, x0 + dw, y0 + dh]
        else:
            box = [x0 + cols[0], y0 + rows[0], x0 + cols[-1] + 1, y0 + rows[-1] + 1]
        boxes.append([float(v) for v in box])
        classes.append(int(labels[idx]))
    return canvas, np.asarray(boxes, dtype=np.float64), np.asarray(classes, dtype=np.int64)


def generate_multimnist(images, labels, n_scenes, seed, out_dir, split="train",
                        image_size=128, max_objects=10) -> DatasetManifest:
    """Write ``n_scenes`` scenes under ``out_dir`` and return their manifest.

    Each scene draws from its own generator seeded by ``(seed, index)``, so the
    output is identical for a given seed regardless of generation order.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("source digit set is empty")
    if n_scenes < 0:
        raise ValueError("n_scenes must be >= 0")
    manifest = DatasetManifest(root=str(out_dir), split=split, count=int(n_scenes),
                               source_checksum=source_checksum(images, labels),
                               seed=int(seed), image_size=image_size)
    manifest.image_dir.mkdir(parents=True, exist_ok=True)
    with open(manifest.annotation_path, "w") as fh:
        for i in range(n_scenes):
            rng = np.random.default_rng([int(seed), i])
            canvas, boxes, classes = compose_scene(images, labels, rng, image_size, max_objects)
            scene_id = f"{split}_{i:06d}"
            Image.fromarray(canvas, mode="L").save(manifest.image_path(scene_id), optimize=False)
            fh.write(json.dumps({"id": scene_id, "boxes": boxes.tolist(),
                                 "labels": classes.tolist()}) + "\n")
    manifest.save()
    return manifest


def dataset_checksum(manifest: DatasetManifest):
    """sha256 over the annotation file and every image file of a split."""
    h = hashlib.sha256(manifest.annotation_path.read_bytes())
    for line in _lines(manifest.annotation_path):
        h.update(manifest.image_path(json.loads(line)["id"]).read_bytes())
    return h.hexdigest()


# -- loading -------------------------------------------------------------------

def read_image(path):
    try:
        gray = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise FileNotFoundError(f"missing image file: {path}") from None
    return np.repeat(gray[None], 3, axis=0)


def load_dataset(manifest, split="train", shuffle_seed=None):
    """Yield every :class:`SceneRecord` of a split.

    ``manifest`` is a :class:`DatasetManifest` or a dataset root. Records come
    in file order, or in a permutation fixed by ``shuffle_seed``.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest, split)
    if not manifest.annotation_path.is_file():
        raise FileNotFoundError(f"missing annotation file: {manifest.annotation_path}")
    records = [json.loads(line) for line in _lines(manifest.annotation_path)]
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    for i in order:
        rec = records[i]
        yield SceneRecord(
            id=rec["id"],
            image=read_image(manifest.image_path(rec["id"])),
            boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
            labels=np.asarray(rec["labels"], dtype=np.int64),
        )


class SceneDataset:
    """Random-access, in-memory view of a split.

    ``images`` is ``(n, H, W)`` grayscale or ``(n, 3, H, W)``, uint8 or float
    in [0, 1]; batches always come out as 3-channel float32.
    """

    def __init__(self, images, boxes=None, labels=None, ids=None):
        self.images = np.asarray(images)
        n = len(self.images)
        self.boxes = boxes if boxes is not None else [np.zeros((0, 4))] * n
        self.labels = labels if labels is not None else [np.zeros(0, np.int64)] * n
        self.ids = ids if ids is not None else [f"scene_{i:06d}" for i in range(n)]

    @classmethod
    def from_manifest(cls, manifest, split="train"):
        if not isinstance(manifest, DatasetManifest):
            manifest = DatasetManifest.load(manifest, split)
        images, boxes, labels, ids = [], [], [], []
        for rec in load_dataset(manifest):
            images.append(np.rint(rec.image[0] * 255).astype(np.uint8))
            boxes.append(rec.boxes)
            labels.append(rec.labels)
            ids.append(rec.id)
        size = manifest.image_size
        return cls(np.stack(images) if images else np.zeros((0, size, size), np.uint8),
                   boxes, labels, ids)

    def __len__(self):
        return len(self.images)

    def batch(self, indices):
        """``(len(indices), 3, H, W)`` float32 array in [0, 1]."""
        imgs = self.images[np.asarray(indices, dtype=np.int64)]
        imgs = imgs.astype(np.float32) / 255.0 if imgs.dtype == np.uint8 else imgs.astype(np.float32)
        if imgs.ndim == 3:
            imgs = np.repeat(imgs[:, None], 3, axis=1)
        return imgs

    def record(self, i):
        return SceneRecord(self.ids[i], self.batch([i])[0], self.boxes[i], self.labels[i])
