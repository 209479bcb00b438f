"""Target classifier and shallow convolutional autoencoder.

Images at this boundary are float arrays shaped (N, H, W, C) in [0, 1]; a
single (H, W, C) image is accepted wherever a batch is.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .tensor import (
    ShapeError,
    Tensor,
    backward,
    conv2d,
    cross_entropy,
    dense,
    maxpool2d,
    mse,
    relu,
    sigmoid,
    softmax_array,
    upsample2d,
)

logger = logging.getLogger(__name__)

INFERENCE_BATCH = 256


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Named parameter set plus an architecture descriptor."""

    kind = "model"

    def __init__(self, input_shape, params: dict[str, Tensor]):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.params = params

    def architecture(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape)}

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x) -> Tensor:
        raise NotImplementedError

    def _to_nchw(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"{self.kind}: expected images of shape {self.input_shape}, got {x.shape[1:]}")
        return x.transpose(0, 3, 1, 2)

    def to_bytes(self) -> bytes:
        desc = self.architecture()
        desc["params"] = list(self.params)
        return checkpoint.pack(desc, [p.data for p in self.params.values()])

    def digest(self) -> str:
        return checkpoint.digest(self.to_bytes())


class AutoencoderModel(Model):
    """``ae = d(e(x))``: Conv+ReLU, MaxPool 2x2, Conv+ReLU, Upsample 2x2, Conv+Sigmoid."""

    kind = "autoencoder"

    def __init__(self, input_shape, filters: int, params: dict[str, Tensor]):
        super().__init__(input_shape, params)
        self.filters = int(filters)

    def architecture(self) -> dict:
        return {**super().architecture(), "filters": self.filters}

    def forward(self, x) -> Tensor:
        p = self.params
        h = self._to_nchw(x)
        h = relu(conv2d(h, p["enc1.w"], 1, 1, p["enc1.b"]))
        h = maxpool2d(h, 2)
        h = relu(conv2d(h, p["enc2.w"], 1, 1, p["enc2.b"]))
        h = upsample2d(h, 2)
        h = sigmoid(conv2d(h, p["dec.w"], 1, 1, p["dec.b"]))
        return h.transpose(0, 2, 3, 1)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Output shape (H, W, C) after each layer, in layer order."""
        h, w, c = self.input_shape
        f = self.filters
        return [
            ("input", (h, w, c)),
            ("conv2d_relu", (h, w, f)),
            ("maxpool", (h // 2, w // 2, f)),
            ("conv2d_relu", (h // 2, w // 2, f)),
            ("upsample", (h, w, f)),
            ("conv2d_sigmoid", (h, w, c)),
        ]


class ClassifierModel(Model):
    """Two conv+pool blocks followed by a dense head producing ``n_classes`` logits."""

    kind = "classifier"

    def __init__(self, input_shape, n_classes: int, filters: tuple[int, int], params: dict[str, Tensor]):
        super().__init__(input_shape, params)
        self.n_classes = int(n_classes)
        self.filters = tuple(int(f) for f in filters)

    def architecture(self) -> dict:
        return {**super().architecture(), "n_classes": self.n_classes, "filters": list(self.filters)}

    def forward(self, x) -> Tensor:
        """Logits of shape (N, n_classes)."""
        p = self.params
        h = self._to_nchw(x)
        h = maxpool2d(relu(conv2d(h, p["conv1.w"], 1, 1, p["conv1.b"])), 2)
        h = maxpool2d(relu(conv2d(h, p["conv2.w"], 1, 1, p["conv2.b"])), 2)
        h = h.reshape(h.shape[0], -1)
        return dense(h, p["fc.w"], p["fc.b"])

    logits = forward


def build_autoencoder(input_shape, filters: int = 32, seed: int = 0) -> AutoencoderModel:
    """Create an autoencoder for (H, W, C) images with ``filters`` hidden channels."""
    h, w, c = input_shape
    if h % 2 or w % 2:
        raise ShapeError(f"autoencoder input H and W must be even, got {h}x{w}")
    if filters < 1:
        raise ValueError(f"filters must be >= 1, got {filters}")
    rng = np.random.default_rng(seed)
    params = {
        "enc1.w": Tensor(_he_uniform(rng, (filters, c, 3, 3), 9 * c), True),
        "enc1.b": Tensor(np.zeros(filters), True),
        "enc2.w": Tensor(_he_uniform(rng, (filters, filters, 3, 3), 9 * filters), True),
        "enc2.b": Tensor(np.zeros(filters), True),
        "dec.w": Tensor(_he_uniform(rng, (c, filters, 3, 3), 9 * filters), True),
        "dec.b": Tensor(np.zeros(c), True),
    }
    return AutoencoderModel(input_shape, filters, params)


def build_classifier(input_shape, n_classes: int, filters=(8, 16), seed: int = 0) -> ClassifierModel:
    h, w, c = input_shape
    if h % 4 or w % 4:
        raise ShapeError(f"classifier input H and W must be divisible by 4, got {h}x{w}")
    if n_classes < 1:
        raise ValueError(f"n_classes must be >= 1, got {n_classes}")
    f1, f2 = filters
    rng = np.random.default_rng(seed)
    flat = f2 * (h // 4) * (w // 4)
    params = {
        "conv1.w": Tensor(_he_uniform(rng, (f1, c, 3, 3), 9 * c), True),
        "conv1.b": Tensor(np.zeros(f1), True),
        "conv2.w": Tensor(_he_uniform(rng, (f2, f1, 3, 3), 9 * f1), True),
        "conv2.b": Tensor(np.zeros(f2), True),
        "fc.w": Tensor(_he_uniform(rng, (flat, n_classes), flat), True),
        "fc.b": Tensor(np.zeros(n_classes), True),
    }
    return ClassifierModel(input_shape, n_classes, filters, params)


# training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class AdamState:
    """Adam moments for a fixed list of parameters."""

    params: list[Tensor]
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        """Apply one update using ``grads`` (defaults to each parameter's ``.grad``)."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _fit(model: Model, n: int, batch_loss, cfg: TrainConfig, on_epoch=None) -> list[float]:
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = list(model.params.values())
    opt = AdamState(params, lr=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = batch_loss(idx)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"{model.kind}: loss became {loss.item()} in epoch {epoch + 1}")
            backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
        logger.info("%s epoch %d/%d loss %.6f", model.kind, epoch + 1, cfg.epochs, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history


def train_autoencoder(model: AutoencoderModel, images: np.ndarray, cfg: TrainConfig):
    """Fit the autoencoder to benign images by minimising per-pixel MSE.

    Returns:
        ``(model, history)`` where ``history[e]`` is the mean batch loss of
        epoch ``e``. The model is updated in place.
    """
    images = _as_batch(images)
    if images.min() < 0 or images.max() > 1:
        raise ValueError("autoencoder training images must lie in [0, 1]")

    def batch_loss(idx):
        x = images[idx]
        return mse(model.forward(x), x)

    history = _fit(model, len(images), batch_loss, cfg)
    return model, history


def train_classifier(model: ClassifierModel, images: np.ndarray, labels, cfg: TrainConfig):
    """Fit the classifier with cross-entropy; returns ``(model, accuracy_history)``.

    The accuracy history holds training-set accuracy measured after each
    epoch.
    """
    images = _as_batch(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.shape != (len(images),):
        raise ValueError(f"{len(labels)} labels for {len(images)} images")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")

    accuracy: list[float] = []

    def batch_loss(idx):
        return cross_entropy(model.forward(images[idx]), labels[idx])

    def on_epoch(epoch, loss):
        accuracy.append(float(np.mean(predict_label(model, images) == labels)))

    _fit(model, len(images), batch_loss, cfg, on_epoch)
    return model, accuracy


# inference ---------------------------------------------------------------------


def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    return arr[None] if arr.ndim == 3 else arr


def _batched(fn, images: np.ndarray) -> np.ndarray:
    out = [fn(images[i : i + INFERENCE_BATCH]) for i in range(0, len(images), INFERENCE_BATCH)]
    return np.concatenate(out) if out else np.empty((0,))


def reconstruct(model: AutoencoderModel, images) -> np.ndarray:
    """``ae(x)`` for one image or a batch; output has the input's shape."""
    arr = np.asarray(images, dtype=np.float64)
    batch = _as_batch(arr)
    out = _batched(lambda b: model.forward(b).data, batch)
    return out[0] if arr.ndim == 3 else out


def logits(model: ClassifierModel, images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    out = _batched(lambda b: model.forward(b).data, _as_batch(arr))
    return out[0] if arr.ndim == 3 else out


def predict(model: ClassifierModel, images) -> np.ndarray:
    """Softmax probability vectors ``p_x``."""
    return softmax_array(logits(model, images))


def predict_label(model: ClassifierModel, images):
    """Arg-max class; ties resolve to the lowest index."""
    out = np.argmax(logits(model, images), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


# persistence -------------------------------------------------------------------


def model_from_bytes(blob: bytes) -> Model:
    desc, arrays = checkpoint.unpack(blob)
    names = desc.get("params", [])
    if len(names) != len(arrays):
        raise checkpoint.CorruptCheckpointError(f"descriptor lists {len(names)} params, file holds {len(arrays)}")
    params = {name: Tensor(arr, True) for name, arr in zip(names, arrays)}
    kind = desc.get("kind")
    if kind == AutoencoderModel.kind:
        model = AutoencoderModel(desc["input_shape"], desc["filters"], params)
    elif kind == ClassifierModel.kind:
        model = ClassifierModel(desc["input_shape"], desc["n_classes"], desc["filters"], params)
    else:
        raise checkpoint.CorruptCheckpointError(f"unknown model kind {kind!r}")
    return model


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model.to_bytes())


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
