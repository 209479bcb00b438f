"""Datasets: IDX (MNIST format) reading/writing and a synthetic shapes set."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SHAPE_CLASSES = ("hbar", "vbar", "cross", "square", "disk")


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """Images shaped (N, H, W, C) in [0, 1] with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    source: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: str | None = None) -> Dataset:
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, name or self.name, self.source)

    def split(self, n_first: int) -> tuple[Dataset, Dataset]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.images).tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


# IDX -----------------------------------------------------------------------------

# type code -> (numpy dtype, divisor applied when reading image pixels)
_IDX_TYPES = {0x08: (np.dtype(">u1"), 255.0), 0x0D: (np.dtype(">f4"), 1.0), 0x0E: (np.dtype(">f8"), 1.0)}


def _read_header(blob: bytes, what: str, ndims: tuple[int, ...]):
    if len(blob) < 4:
        raise IdxTruncatedError(f"{what}: file has only {len(blob)} bytes")
    zero, type_code, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0 or type_code not in _IDX_TYPES or ndim not in ndims:
        raise IdxMagicError(f"{what}: bad magic 0x{struct.unpack('>I', blob[:4])[0]:08x}")
    need = 4 + 4 * ndim
    if len(blob) < need:
        raise IdxTruncatedError(f"{what}: header needs {need} bytes, file has {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:need])
    dtype, scale = _IDX_TYPES[type_code]
    size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - need < size:
        raise IdxTruncatedError(f"{what}: expected {size} data bytes, found {len(blob) - need}")
    data = np.frombuffer(blob[need : need + size], dtype=dtype).reshape(dims)
    return data, type_code, scale


def load_idx(path_images, path_labels=None) -> Dataset:
    """Read IDX images (and optional labels).

    Unsigned-byte images (magic 0x00000803) are scaled from 0-255 to
    [0, 1]; float and double IDX files are read as stored. A fourth image
    dimension is taken as channels.
    """
    data, _, scale = _read_header(Path(path_images).read_bytes(), "images", (3, 4))
    images = data.astype(np.float64) / scale
    if images.ndim == 3:
        images = images[..., None]
    labels = None
    if path_labels is not None:
        lab, type_code, _ = _read_header(Path(path_labels).read_bytes(), "labels", (1,))
        if type_code != 0x08:
            raise IdxMagicError("labels: expected unsigned-byte IDX (magic 0x00000801)")
        if len(lab) != len(images):
            raise IdxCountMismatchError(f"{len(lab)} labels for {len(images)} images")
        labels = lab.astype(np.int64)
    return Dataset(images, labels, name=Path(path_images).stem, source=str(path_images))


def to_bytes_idx(images: np.ndarray, dtype: str = "uint8") -> bytes:
    """Encode (N, H, W, C) images in [0, 1] as IDX.

    ``dtype="uint8"`` quantises to 0-255 (the MNIST layout, 3-D when C == 1);
    ``dtype="float64"`` stores values losslessly with type code 0x0E.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) images, got shape {images.shape}")
    body = images[..., 0] if images.shape[3] == 1 else images
    if dtype == "uint8":
        type_code, payload = 0x08, np.clip(np.rint(body * 255.0), 0, 255).astype(">u1")
    elif dtype == "float64":
        type_code, payload = 0x0E, body.astype(">f8")
    else:
        raise ValueError(f"unsupported IDX dtype {dtype!r}")
    header = struct.pack(">HBB", 0, type_code, body.ndim) + struct.pack(f">{body.ndim}I", *body.shape)
    return header + payload.tobytes()


def save_idx(dataset: Dataset, path_images, path_labels=None, dtype: str = "uint8") -> None:
    """Write a dataset as IDX files (see :func:`to_bytes_idx` for ``dtype``)."""
    Path(path_images).write_bytes(to_bytes_idx(dataset.images, dtype))
    if path_labels is not None:
        if dataset.labels is None:
            raise ValueError("dataset has no labels to write")
        labels = dataset.labels.astype(np.uint8)
        Path(path_labels).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# synthetic shapes --------------------------------------------------------------------


def _draw(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = (size - 1) / 2 + rng.uniform(-2.0, 2.0, size=2)
    half = rng.uniform(0.28, 0.38) * size
    thick = rng.uniform(1.0, 1.8)
    dy, dx = yy - cy, xx - cx
    if kind == "hbar":
        mask = (np.abs(dy) <= thick) & (np.abs(dx) <= half)
    elif kind == "vbar":
        mask = (np.abs(dx) <= thick) & (np.abs(dy) <= half)
    elif kind == "cross":
        mask = ((np.abs(dy) <= thick * 0.8) & (np.abs(dx) <= half)) | ((np.abs(dx) <= thick * 0.8) & (np.abs(dy) <= half))
    elif kind == "square":
        edge = np.maximum(np.abs(dx), np.abs(dy))
        mask = (edge <= half * 0.85) & (edge >= half * 0.85 - thick * 1.2)
    elif kind == "disk":
        mask = np.hypot(dx, dy) <= half * 0.75
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return mask.astype(np.float64)


def synth_dataset(
    kind: str = "shapes",
    count: int = 1000,
    seed: int = 0,
    size: int = 16,
    noise: float = 0.02,
    contrast: tuple[float, float] = (0.08, 0.15),
    background: tuple[float, float] = (0.1, 0.5),
) -> Dataset:
    """Deterministic labelled images of simple geometric shapes.

    Classes are :data:`SHAPE_CLASSES`, balanced to within one image. Each
    image is a shape of amplitude drawn from ``contrast`` on a flat
    background level drawn from ``background``, with random offset, extent
    and stroke width, plus Gaussian pixel noise; values are clipped to [0, 1].

    The default low contrast keeps the classes separable while leaving the
    decision boundaries close enough for small L2 attacks to succeed.
    """
    if kind != "shapes":
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    k = len(SHAPE_CLASSES)
    labels = rng.permutation(np.arange(count) % k)
    images = np.empty((count, size, size, 1))
    for i, label in enumerate(labels):
        shape = _draw(SHAPE_CLASSES[label], size, rng)
        amp = rng.uniform(*contrast)
        bg = rng.uniform(*background)
        img = bg + amp * shape + rng.normal(0.0, noise, size=shape.shape)
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, name=f"{kind}-{seed}", source="synthetic")
