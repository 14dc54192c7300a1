"""Dataset loading (MNIST IDX, CIFAR-10 binary), preprocessing and augmentation."""

import gzip
import os
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Dataset",
    "AugmentConfig",
    "DataFormatError",
    "MagicMismatchError",
    "TruncatedFileError",
    "CountMismatchError",
    "LabelRangeError",
    "ClassTooSmallError",
    "read_idx",
    "write_idx",
    "load_mnist",
    "load_cifar10",
    "write_cifar10_batch",
    "mean_subtract",
    "split_validation",
    "subset",
    "bilinear_resize",
    "hflip",
    "augment",
    "augment_batch",
    "five_crops",
    "multi_crop_views",
    "sample_rng",
]

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataFormatError(ValueError):
    """A dataset file does not follow its binary layout."""


class MagicMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


class ClassTooSmallError(ValueError):
    pass


@dataclass
class Dataset:
    """Images ``(count, C, H, W)`` scaled to [0, 1], integer labels.

    ``mean`` is the per-pixel training mean once :func:`mean_subtract` has
    run. ``index`` maps each row back to the dataset it was drawn from.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int = 10
    mean: np.ndarray = None
    index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.n_classes})")
        if self.index is None:
            self.index = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class AugmentConfig:
    """Random resize-and-crop plus horizontal flip.

    ``eval_resize`` is the side length test images are resized to before the
    five crops are cut; it defaults to the midpoint of the training range.
    """

    resize_min: int = 32
    resize_max: int = 40
    crop: int = 32
    hflip_prob: float = 0.5
    eval_resize: int = None

    def __post_init__(self):
        if self.resize_min > self.resize_max:
            raise ValueError("resize_min must not exceed resize_max")
        if self.crop > self.resize_min:
            raise ValueError("crop must not exceed resize_min")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must lie in [0, 1]")

    @property
    def test_resize(self):
        if self.eval_resize is not None:
            return self.eval_resize
        return int(round((self.resize_min + self.resize_max) / 2))


def _open(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find(directory, name):
    for candidate in (name, name + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{name} not found in {directory}")


def read_idx(path, expected_magic=None):
    """Decode an unsigned-byte IDX file into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: missing IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise MagicMismatchError(f"{path}: magic {magic}, expected {expected_magic}")
    if magic >> 8 != 0x08:
        raise MagicMismatchError(f"{path}: magic {magic:#x} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    payload = len(raw) - header
    if payload < size:
        raise TruncatedFileError(f"{path}: {payload} payload bytes, header promises {size}")
    if payload > size:
        raise DataFormatError(f"{path}: {payload - size} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    if str(path).endswith(".gz"):
        fh = gzip.GzipFile(path, "wb", mtime=0)
    else:
        fh = open(path, "wb")
    with fh:
        fh.write(header + array.tobytes())


def load_mnist(directory, split="train", dtype=np.float32):
    """Load ``train`` or ``t10k``/``test`` IDX files (optionally gzipped)."""
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}.get(split)
    if prefix is None:
        raise ValueError(f"unknown MNIST split {split!r}")
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"), IDX_IMAGE_MAGIC)
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"), IDX_LABEL_MAGIC)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataFormatError("MNIST images must be 3-D and labels 1-D")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise LabelRangeError(f"MNIST label {labels.max()} out of range")
    x = (images.astype(dtype) / 255.0)[:, None]
    return Dataset(x, labels, split="test" if prefix == "t10k" else "train", n_classes=10)


def _cifar_dir(directory):
    nested = os.path.join(directory, "cifar-10-batches-bin")
    return nested if os.path.isdir(nested) else directory


def read_cifar_batch(path):
    """Return ``(labels uint8, pixels uint8 (n, 3, 32, 32))`` from one batch file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD:
        raise TruncatedFileError(
            f"{path}: length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.size and labels.max() > 9:
        raise LabelRangeError(f"{path}: label {labels.max()} out of range")
    return labels, rec[:, 1:].reshape(-1, 3, 32, 32)


def write_cifar10_batch(path, labels, pixels):
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    with open(path, "wb") as fh:
        fh.write(np.hstack([labels, pixels]).tobytes())


def load_cifar10(directory, split="train", dtype=np.float32):
    """Load the binary CIFAR-10 batches; ``split`` is ``train`` or ``test``."""
    files = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
    if files is None:
        raise ValueError(f"unknown CIFAR-10 split {split!r}")
    root = _cifar_dir(directory)
    labels, pixels = [], []
    for name in files:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"{name} not found in {root}")
        lab, pix = read_cifar_batch(path)
        labels.append(lab)
        pixels.append(pix.astype(dtype) / 255.0)
    return Dataset(np.concatenate(pixels), np.concatenate(labels), split=split, n_classes=10)


def mean_subtract(train, *others):
    """Subtract the per-pixel mean of ``train`` from every split given.

    Results are float64 so the training split is centred to rounding error.
    """
    mean = train.images.mean(axis=0, dtype=np.float64)
    out = []
    for ds in (train,) + others:
        if ds.image_shape != train.image_shape:
            raise ValueError(
                f"{ds.split} images have shape {ds.image_shape}, training split {train.image_shape}"
            )
        images = ds.images.astype(np.float64) - mean
        out.append(replace(ds, images=images, mean=mean))
    return out[0] if not others else tuple(out)


def subset(ds, rows, split=None):
    rows = np.asarray(rows)
    return replace(
        ds, images=ds.images[rows], labels=ds.labels[rows], index=ds.index[rows],
        split=split or ds.split,
    )


def split_validation(train, fraction=0.1, seed=0, per_class=None):
    """Move ``floor(count_c * fraction)`` samples of every class to a validation set.

    ``per_class`` overrides the fraction with a fixed count per class.
    Returns ``(train', val)``; both keep the original row order.
    """
    rng = np.random.default_rng(seed)
    val_rows = []
    for c in range(train.n_classes):
        rows = np.flatnonzero(train.labels == c)
        take = per_class if per_class is not None else int(len(rows) * fraction)
        if len(rows) and (take < 1 or take >= len(rows)):
            raise ClassTooSmallError(
                f"class {c} has {len(rows)} samples, cannot hold out {take}"
            )
        val_rows.append(rng.permutation(rows)[:take])
    val_rows = np.sort(np.concatenate(val_rows))
    keep = np.setdiff1d(np.arange(len(train)), val_rows)
    return subset(train, keep), subset(train, val_rows, split="val")


def _interp_matrix(n_in, n_out):
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - t
    m[np.arange(n_out), hi] += t
    return m


def bilinear_resize(image, height, width=None):
    """Bilinear resize of a (C, H, W) image."""
    width = height if width is None else width
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    rows = _interp_matrix(h, height)
    cols = _interp_matrix(w, width)
    out = np.einsum("ij,cjk,lk->cil", rows, image, cols)
    return out.astype(image.dtype)


def hflip(image):
    return image[..., ::-1].copy()


def augment(image, cfg, rng, size=None, offset=None, flip=None):
    """Random resize to ``s x s`` (``s`` uniform in the configured range),
    random ``crop x crop`` window, optional horizontal flip.

    ``size``, ``offset`` and ``flip`` pin the random choices.
    """
    if size is None:
        size = int(rng.integers(cfg.resize_min, cfg.resize_max + 1))
    resized = bilinear_resize(image, size)
    if offset is None:
        top = int(rng.integers(0, size - cfg.crop + 1))
        left = int(rng.integers(0, size - cfg.crop + 1))
    else:
        top, left = offset
    out = resized[:, top:top + cfg.crop, left:left + cfg.crop]
    if flip is None:
        flip = rng.random() < cfg.hflip_prob
    return hflip(out) if flip else np.ascontiguousarray(out)


def sample_rng(seed, epoch, sample):
    return np.random.default_rng([int(seed), int(epoch), int(sample)])


def augment_batch(images, cfg, seed, epoch, sample_ids):
    """Augment each image with its own stream derived from (seed, epoch, sample)."""
    return np.stack(
        [augment(img, cfg, sample_rng(seed, epoch, sid)) for img, sid in zip(images, sample_ids)]
    )


CROP_ORDER = ("center", "top_left", "top_right", "bottom_left", "bottom_right")


def five_crops(image, crop):
    """Center and four corner crops of a (C, H, W) image, in ``CROP_ORDER``."""
    _, h, w = image.shape
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than {h}x{w} image")
    top, left = (h - crop) // 2, (w - crop) // 2
    origins = [(top, left), (0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)]
    return np.stack([image[:, y:y + crop, x:x + crop] for y, x in origins])


def multi_crop_views(images, cfg):
    """Shape (5, B, C, crop, crop): each image resized to ``cfg.test_resize`` then cropped."""
    size = cfg.test_resize
    views = [five_crops(bilinear_resize(img, size), cfg.crop) for img in images]
    return np.stack(views, axis=1)


def clamp_samples(n_samples, available):
    if n_samples > available:
        warnings.warn(f"requested {n_samples} samples, only {available} available; clamping")
        return available
    return n_samples
