"""Dataset ingestion: IDX (MNIST/fMNIST), CIFAR-10 binary batches, and
procedural datasets (shapes, rendered digits) for hermetic tests.

Parsers validate every header field against the actual file length before
allocating, so random-byte files produce FormatError, never a crash.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError
from .tensor_core import seeded_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-planar pixels


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, h, w) float64 in [0, 1]
    labels: np.ndarray  # (n,) small ints
    name: str
    checksum: str

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[0] != self.labels.shape[0]:
            raise InputError("images (n, h, w) must align with labels (n,)")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InputError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def flat_images(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        return LabeledDataset(self.images[indices], self.labels[indices],
                              self.name, self.checksum)


def _sha256(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            while chunk := fh.read(1 << 20):
                h.update(chunk)
    return h.hexdigest()


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse a big-endian IDX image/label file pair (MNIST distribution format)."""
    with open(images_path, "rb") as fh:
        img_data = fh.read()
    with open(labels_path, "rb") as fh:
        lab_data = fh.read()

    if len(img_data) < 16:
        raise FormatError("image file shorter than 16-byte IDX header (offset 0)")
    magic, count, rows, cols = struct.unpack_from(">IIII", img_data, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x} at offset 0")
    if rows == 0 or cols == 0 or count == 0:
        raise FormatError("zero dimension in image header (offset 4)")
    expected = 16 + count * rows * cols
    if len(img_data) != expected:
        raise FormatError(
            f"image payload is {len(img_data)} bytes, header implies {expected}"
        )

    if len(lab_data) < 8:
        raise FormatError("label file shorter than 8-byte IDX header (offset 0)")
    lmagic, lcount = struct.unpack_from(">II", lab_data, 0)
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad label magic 0x{lmagic:08x} at offset 0")
    if len(lab_data) != 8 + lcount:
        raise FormatError(
            f"label payload is {len(lab_data)} bytes, header implies {8 + lcount}"
        )
    if lcount != count:
        raise FormatError(f"image count {count} != label count {lcount}")

    images = np.frombuffer(img_data, dtype=np.uint8, offset=16)
    images = images.reshape(count, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_data, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledDataset(images, labels, "idx",
                          _sha256(images_path, labels_path))


def load_cifar10(batch_paths) -> LabeledDataset:
    """Parse CIFAR-10 binary batches, converting to 32x32 grayscale."""
    batch_paths = list(batch_paths)
    if not batch_paths:
        raise InputError("no batch paths given")
    all_images = []
    all_labels = []
    for path in batch_paths:
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) == 0 or len(data) % CIFAR_RECORD != 0:
            raise FormatError(
                f"{path}: length {len(data)} is not a positive multiple of {CIFAR_RECORD}"
            )
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = raw[:, 0].astype(np.int64)
        if labels.max(initial=0) > 9:
            raise FormatError(f"{path}: label byte outside 0-9")
        rgb = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
        gray = 0.299 * rgb[:, 0] + 0.587 * rgb[:, 1] + 0.114 * rgb[:, 2]
        all_images.append(gray)
        all_labels.append(labels)
    return LabeledDataset(np.concatenate(all_images),
                          np.concatenate(all_labels),
                          "cifar10", _sha256(*batch_paths))


_SHAPE_KINDS = ("disk", "cross", "hbars", "ring", "square", "diamond",
                "vbars", "corner")


def _draw_shape(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    d = np.sqrt(dy * dy + dx * dx)
    if kind == "disk":
        img = (d <= r).astype(np.float64)
    elif kind == "cross":
        img = ((np.abs(dy) <= r / 3) | (np.abs(dx) <= r / 3)) & (d <= 1.4 * r)
        img = img.astype(np.float64)
    elif kind == "hbars":
        img = ((np.mod(yy, 2 * r / 3) < r / 3) & (np.abs(dx) <= r)
               & (np.abs(dy) <= r)).astype(np.float64)
    elif kind == "ring":
        img = ((d <= r) & (d >= 0.55 * r)).astype(np.float64)
    elif kind == "square":
        img = ((np.abs(dy) <= r) & (np.abs(dx) <= r)).astype(np.float64)
    elif kind == "diamond":
        img = (np.abs(dy) + np.abs(dx) <= 1.2 * r).astype(np.float64)
    elif kind == "vbars":
        img = ((np.mod(xx, 2 * r / 3) < r / 3) & (np.abs(dx) <= r)
               & (np.abs(dy) <= r)).astype(np.float64)
    elif kind == "corner":
        img = (((np.abs(dy + r / 2) <= r / 4) | (np.abs(dx + r / 2) <= r / 4))
               & (np.abs(dy) <= r) & (np.abs(dx) <= r)).astype(np.float64)
    else:  # pragma: no cover
        raise InputError(f"unknown shape kind {kind}")
    return img


def synth_shapes(count: int, image_size: int = 28, class_count: int = 2,
                 seed: int = 0) -> LabeledDataset:
    """Procedural shape classes with jittered position/scale; CI-speed data."""
    if count <= 0:
        raise InputError("count must be positive")
    if not 1 <= class_count <= len(_SHAPE_KINDS):
        raise InputError(
            f"class_count must be in 1-{len(_SHAPE_KINDS)}"
        )
    rng = seeded_rng(seed)
    images = np.empty((count, image_size, image_size))
    labels = np.empty(count, dtype=np.int64)
    half = image_size / 2
    for i in range(count):
        label = i % class_count
        cy = half + rng.uniform(-0.12, 0.12) * image_size
        cx = half + rng.uniform(-0.12, 0.12) * image_size
        r = rng.uniform(0.22, 0.32) * image_size
        img = _draw_shape(_SHAPE_KINDS[label], image_size, cy, cx, r)
        images[i] = np.clip(img * rng.uniform(0.8, 1.0), 0.0, 1.0)
        labels[i] = label
    return LabeledDataset(images, labels, "synth_shapes",
                          f"synth_shapes:{count}:{image_size}:{class_count}:{seed}")


def synth_digits(count: int, image_size: int = 28, class_count: int = 10,
                 seed: int = 0) -> LabeledDataset:
    """Rendered digit glyphs with jittered placement, scale, rotation, shear,
    stroke width, blur, and peak intensity.

    A hermetic stand-in for handwritten-digit data when the real IDX files
    are not on disk; deterministic given seed. The jitter ranges are tuned so
    that intra-class appearance varies enough for reconstruction quality to
    spread within a class, which is the regime where handwritten digits live.
    """
    from PIL import Image, ImageDraw, ImageFont
    from scipy import ndimage

    if count <= 0:
        raise InputError("count must be positive")
    if not 1 <= class_count <= 10:
        raise InputError("class_count must be in 1-10")
    rng = seeded_rng(seed)
    canvas = 4 * image_size
    images = np.empty((count, image_size, image_size))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = i % class_count
        font_px = int(rng.uniform(2.0, 3.0) * image_size)
        font = ImageFont.load_default(size=font_px)
        im = Image.new("L", (canvas, canvas), 0)
        draw = ImageDraw.Draw(im)
        ox = canvas / 2 + rng.uniform(-0.2, 0.2) * image_size * 2
        oy = canvas / 2 + rng.uniform(-0.2, 0.2) * image_size * 2
        stroke = int(rng.integers(0, 3))
        draw.text((ox, oy), str(label), fill=255, font=font, anchor="mm",
                  stroke_width=stroke, stroke_fill=255)
        im = im.rotate(rng.uniform(-15.0, 15.0), resample=Image.BILINEAR)
        shear = rng.uniform(-0.15, 0.15)
        im = im.transform((canvas, canvas), Image.AFFINE,
                          (1.0, shear, -shear * canvas / 2, 0.0, 1.0, 0.0),
                          resample=Image.BILINEAR)
        im = im.resize((image_size, image_size), resample=Image.BILINEAR)
        pixels = np.asarray(im, dtype=np.float64) / 255.0
        pixels = ndimage.gaussian_filter(pixels, rng.uniform(0.3, 0.6))
        peak = pixels.max()
        if peak > 0:
            pixels = pixels / peak * rng.uniform(0.8, 1.0)
        images[i] = np.clip(pixels, 0.0, 1.0)
        labels[i] = label
    return LabeledDataset(images, labels, "synth_digits",
                          f"synth_digits:{count}:{image_size}:{class_count}:{seed}")
