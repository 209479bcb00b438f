"""Small dense tensor library with reverse-mode automatic differentiation.

Only the primitives needed by the autoencoder, the classifier and the
gradient-based attacks are provided. Values are float64 numpy arrays; every
differentiable operation records its parents and a backward closure, and
:func:`backward` replays them in reverse topological order.
"""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff.

    Attributes:
        data: Row-major float64 values.
        requires_grad: Whether gradients flow to (and are stored on) this
            tensor.
        grad: Gradient of the last :func:`backward` call, same shape as
            ``data``; ``None`` until populated.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return tensor_sum(self) * (1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def max(self, axis: int):
        return tensor_max(self, axis)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 0:
        return _result(a.data + b.data, (a, b), "add", lambda g: (g, g.sum()))
    if a.data.ndim == 0:
        return _result(a.data + b.data, (a, b), "add", lambda g: (g.sum(), g))
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 0 or a.data.ndim == 0:
        if a.data.ndim == 0:
            a, b = b, a
        s = b.data
        return _result(a.data * s, (a, b), "mul", lambda g: (g * s, (g * a.data).sum()))
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form stays finite for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant; gradient flows where a > floor."""
    mask = a.data > floor
    return _result(np.where(mask, a.data, floor), (a,), "maximum", lambda g: (g * mask,))


# reductions and reshaping ----------------------------------------------------


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(data, dtype=DTYPE), (a,), "sum", backward)


def tensor_max(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    idx_e = np.expand_dims(idx, axis)
    data = np.take_along_axis(a.data, idx_e, axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx_e, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _result(data, (a,), "max", backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _result(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


# layers ------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: Input of shape (N, C, H, W).
        kernel: Weights of shape (O, C, kh, kw).
        stride: Step between neighbouring windows.
        padding: Zeros added on every spatial border.
        bias: Optional per-output-channel offsets of shape (O,).

    Returns:
        Tensor of shape (N, O, Ho, Wo) with ``Ho = (H + 2p - kh) // stride + 1``.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: kernel in-channels {kc} != input channels {c}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col in (N, Ho, Wo, kh, kw, C) order so both passes are single matmuls
    xh = xp.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols2d = cols.reshape(n * ho * wo, kh * kw * c)
    kmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols2d @ kmat
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        grad_k = (cols2d.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        gcols = (gm @ kmat.T).reshape(n, ho, wo, kh, kw, c)
        gxh = np.zeros((n, hp, wp, c))
        for i in range(kh):
            for j in range(kw):
                gxh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
        grad_x = gxh.transpose(0, 3, 1, 2)
        if padding:
            grad_x = grad_x[:, :, padding : padding + h, padding : padding + w]
        grads = (grad_x, grad_k)
        if bias is not None:
            grads += (gm.sum(axis=0),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, "conv2d", backward)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling over (N, C, H, W).

    Ties route the gradient to the first maximal element in row-major order.
    """
    n, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"maxpool2d: spatial dims {h}x{w} not divisible by window {window}")
    k = window
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, idx, g[..., None], axis=-1)
        grad = grad_blocks.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (grad,)

    return _result(out, (x,), "maxpool2d", backward)


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of (N, C, H, W) by ``factor`` in both spatial dims."""
    if factor < 1:
        raise ValueError(f"upsample2d: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    f = factor
    return _result(out, (x,), "upsample2d", lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape (N, in) and weight (in, out)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data
    return _result(
        out,
        (x, weight, bias),
        "dense",
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


# probabilities and losses --------------------------------------------------------


def softmax_array(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array along the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    p = softmax_array(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), "softmax", backward)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (logits,), "log_softmax", lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``labels`` under softmax(logits).

    Args:
        logits: (N, k) or (k,) scores.
        labels: Class index or sequence of N indices.
        reduction: ``"mean"`` or ``"sum"`` over the batch.
    """
    single = logits.data.ndim == 1
    if single:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: label out of range for {k} classes")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = tensor_sum(log_softmax(logits) * onehot)
    scale = -1.0 if reduction == "sum" or single else -1.0 / n
    return picked * scale


def mse(a: Tensor, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    b = as_tensor(b)
    _same_shape(a, b, "mse")
    d = a - b
    return tensor_sum(square(d)) * (1.0 / a.size)


# backward pass ---------------------------------------------------------------------


class Tape:
    """Operations reachable from a loss, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Gradients are recomputed from scratch on every call (no accumulation
    across calls), so one forward graph may be differentiated for several
    scalar losses.

    Returns:
        Mapping from each tensor on the tape to its gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {node: node.grad for node in tape.nodes}


def grad_of(loss_fn, x: np.ndarray) -> np.ndarray:
    """Gradient of a scalar function of one array, via :func:`backward`."""
    xt = Tensor(x, requires_grad=True)
    backward(loss_fn(xt))
    return xt.grad


def finite_diff_grad(f, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Args:
        f: Callable mapping a :class:`Tensor` (or array) to a scalar
            :class:`Tensor` or float.
        x: Point of evaluation.
        h: Step size, must be positive.

    Returns:
        Array shaped like ``x`` with ``(f(x + h e_i) - f(x - h e_i)) / 2h``.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def value(arr):
        out = f(Tensor(arr))
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        plus = value(base)
        flat[i] = old - h
        minus = value(base)
        flat[i] = old
        grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(base.shape)
