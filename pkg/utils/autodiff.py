"""
Dense tensors with reverse-mode automatic differentiation.

Covers exactly what the autoencoder and classifier need: 1D convolution, 1D transposed
convolution, dense layers, ReLU, reshape, mean-squared error and class-weighted softmax
cross-entropy. Every op records its inputs and a backward closure on the output tensor;
`backward(loss)` walks the recorded graph in reverse topological order.
"""
import contextlib
import contextvars
import logging
from typing import Callable, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = contextvars.ContextVar("fedhar_default_dtype", default=np.float32)


class ShapeError(ValueError):
    """Tensor shape contract violated"""


class GradientError(RuntimeError):
    """Backward pass or optimizer precondition violated"""


def get_default_dtype():
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def float64_mode():
    """Build tensors in 64-bit precision inside this block (gradient checks only)"""
    token = _DEFAULT_DTYPE.set(np.float64)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


class Tensor:
    """Dense n-dimensional array with an optional gradient"""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if dtype is None:
            dtype = get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray promotes 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=tensor.data.dtype)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


def _result(data, parents, backward_fn):
    """Wrap op output; record the graph edge only when some input needs a gradient"""
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, dtype=data.dtype)
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ============================================================
# ELEMENTWISE / SHAPE OPS
# ============================================================
def mul(a, b):
    """Elementwise product of two same-shape tensors (or tensor times scalar)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"mul shape mismatch: {list(a.shape)} vs {list(b.shape)}")

    def backward_fn(grad):
        if a.requires_grad:
            ga = grad * b.data
            _accumulate(a, ga.sum().reshape(a.shape) if a.size == 1 and ga.size != 1 else ga)
        if b.requires_grad:
            gb = grad * a.data
            _accumulate(b, gb.sum().reshape(b.shape) if b.size == 1 and gb.size != 1 else gb)

    return _result(a.data * b.data, (a, b), backward_fn)


def tensor_sum(x):
    """Sum of all elements as a scalar tensor"""
    x = as_tensor(x)

    def backward_fn(grad):
        _accumulate(x, np.broadcast_to(grad, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward_fn)


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {list(x.shape)} into {list(shape)}")

    def backward_fn(grad):
        _accumulate(x, grad.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward_fn)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward_fn(grad):
        _accumulate(x, grad * mask)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward_fn)


# ============================================================
# LAYERS
# ============================================================
def linear(x, weight, bias):
    """
    Dense layer y = x W^T + b.

    Args:
        x: Tensor[batch, in_features]
        weight: Tensor[out_features, in_features]
        bias: Tensor[out_features]
    """
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2D input and weight, got {list(x.shape)} and {list(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear in_features mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias must have shape [{weight.shape[0]}], got {list(bias.shape)}")

    out = x.data @ weight.data.T + bias.data

    def backward_fn(grad):
        if x.requires_grad:
            _accumulate(x, grad @ weight.data)
        if weight.requires_grad:
            _accumulate(weight, grad.T @ x.data)
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=0))

    return _result(out, (x, weight, bias), backward_fn)


def conv1d_output_length(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


def conv_transpose1d_output_length(length, kernel, stride, padding, output_padding):
    return (length - 1) * stride - 2 * padding + kernel + output_padding


def conv1d(x, weight, bias, stride=1, padding=0):
    """
    1D convolution (cross-correlation) with zero padding.

    Args:
        x: Tensor[batch, ch_in, len]
        weight: Tensor[ch_out, ch_in, k]
        bias: Tensor[ch_out]
    """
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d expects 3D input and weight, got {list(x.shape)} and {list(weight.shape)}")
    batch, ch_in, length = x.shape
    ch_out, w_ch_in, k = weight.shape
    if w_ch_in != ch_in:
        raise ShapeError(
            f"conv1d channel mismatch: input {list(x.shape)} has {ch_in} channels, "
            f"weight {list(weight.shape)} expects {w_ch_in}"
        )
    if bias.shape != (ch_out,):
        raise ShapeError(f"conv1d bias must have shape [{ch_out}], got {list(bias.shape)}")
    if k < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"conv1d needs k >= 1, stride >= 1, padding >= 0 (k={k}, stride={stride}, padding={padding})")
    if length + 2 * padding < k:
        raise ShapeError(f"conv1d padded input length {length + 2 * padding} is shorter than kernel {k}")

    len_out = conv1d_output_length(length, k, stride, padding)
    span = stride * (len_out - 1) + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    # cols[b, l, c, j] = xp[b, c, l*stride + j]
    cols = np.stack([xp[:, :, j:j + span:stride] for j in range(k)], axis=-1)
    cols = cols.transpose(0, 2, 1, 3).reshape(batch * len_out, ch_in * k)
    w2 = weight.data.reshape(ch_out, ch_in * k)
    out = (cols @ w2.T).reshape(batch, len_out, ch_out).transpose(0, 2, 1) + bias.data[None, :, None]

    def backward_fn(grad):
        g2 = grad.transpose(0, 2, 1).reshape(batch * len_out, ch_out)
        if weight.requires_grad:
            _accumulate(weight, (g2.T @ cols).reshape(ch_out, ch_in, k))
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(batch, len_out, ch_in, k).transpose(0, 2, 1, 3)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j:j + span:stride] += dcols[:, :, :, j]
            _accumulate(x, dxp[:, :, padding:padding + length])

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward_fn)


def conv_transpose1d(x, weight, bias, stride=1, padding=0, output_padding=0):
    """
    1D transposed convolution: the adjoint scatter of `conv1d` plus bias.

    Args:
        x: Tensor[batch, ch_in, len]
        weight: Tensor[ch_in, ch_out, k]
        bias: Tensor[ch_out]
    """
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ShapeError(
            f"conv_transpose1d expects 3D input and weight, got {list(x.shape)} and {list(weight.shape)}"
        )
    if output_padding >= stride or output_padding < 0:
        raise ShapeError(f"output_padding must be in [0, stride), got {output_padding} with stride {stride}")
    batch, ch_in, length = x.shape
    w_ch_in, ch_out, k = weight.shape
    if w_ch_in != ch_in:
        raise ShapeError(
            f"conv_transpose1d channel mismatch: input {list(x.shape)} has {ch_in} channels, "
            f"weight {list(weight.shape)} expects {w_ch_in}"
        )
    if bias.shape != (ch_out,):
        raise ShapeError(f"conv_transpose1d bias must have shape [{ch_out}], got {list(bias.shape)}")
    if stride < 1 or padding < 0 or k < 1:
        raise ShapeError("conv_transpose1d needs k >= 1, stride >= 1, padding >= 0")

    len_out = conv_transpose1d_output_length(length, k, stride, padding, output_padding)
    if len_out < 1:
        raise ShapeError(f"conv_transpose1d output length {len_out} is not positive")
    span = stride * (length - 1) + 1
    full_len = max((length - 1) * stride + k, padding + len_out)
    xt = x.data.transpose(0, 2, 1)  # [batch, len, ch_in]

    full = np.zeros((batch, ch_out, full_len), dtype=x.dtype)
    for j in range(k):
        full[:, :, j:j + span:stride] += (xt @ weight.data[:, :, j]).transpose(0, 2, 1)
    out = full[:, :, padding:padding + len_out] + bias.data[None, :, None]

    def backward_fn(grad):
        gfull = np.zeros((batch, ch_out, full_len), dtype=grad.dtype)
        gfull[:, :, padding:padding + len_out] = grad
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=(0, 2)))
        dx = np.zeros_like(x.data) if x.requires_grad else None
        dw = np.zeros_like(weight.data) if weight.requires_grad else None
        for j in range(k):
            gk = gfull[:, :, j:j + span:stride]  # [batch, ch_out, len]
            if dx is not None:
                dx += np.einsum("bol,io->bil", gk, weight.data[:, :, j])
            if dw is not None:
                dw[:, :, j] = np.einsum("bil,bol->io", x.data, gk)
        if dx is not None:
            _accumulate(x, dx)
        if dw is not None:
            _accumulate(weight, dw)

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward_fn)


# ============================================================
# LOSSES
# ============================================================
def mse_loss(pred, target):
    """Mean over all elements of the squared difference"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {list(pred.shape)} vs {list(target.shape)}")
    diff = pred.data - target.data
    count = max(diff.size, 1)
    value = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)

    def backward_fn(grad):
        scale = grad * (2.0 / count)
        if pred.requires_grad:
            _accumulate(pred, scale * diff)
        if target.requires_grad:
            _accumulate(target, -scale * diff)

    return _result(value, (pred, target), backward_fn)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def weighted_softmax_cross_entropy(logits, labels, class_weights):
    """
    Mean over the batch of class_weights[label] * -log softmax(logits)[label].

    Weights must be non-negative; a label whose class weight is 0 is rejected.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    weights = np.asarray(class_weights, dtype=np.float64)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {list(logits.shape)}")
    batch, n_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels must have shape [{batch}], got {list(labels.shape)}")
    if weights.shape != (n_classes,):
        raise ShapeError(f"class_weights must have shape [{n_classes}], got {list(weights.shape)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("labels must be integers")
    if batch and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels out of range [0, {n_classes}): {labels.min()}..{labels.max()}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("class_weights must be finite and non-negative")
    if batch and np.any(weights[labels] <= 0):
        raise ValueError("a label in the batch has zero class weight")

    logp = log_softmax(logits.data)
    rows = np.arange(batch)
    sample_w = weights[labels].astype(logits.dtype)
    value = np.asarray(-(sample_w * logp[rows, labels]).sum() / max(batch, 1), dtype=logits.dtype)

    def backward_fn(grad):
        probs = np.exp(logp)
        probs[rows, labels] -= 1.0
        _accumulate(logits, grad * probs * (sample_w / max(batch, 1))[:, None])

    return _result(value, (logits,), backward_fn)


# ============================================================
# BACKWARD
# ============================================================
def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """
    Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Gradients accumulate into existing `.grad` buffers; callers zero them between steps.
    """
    if not isinstance(loss, Tensor):
        raise GradientError("backward expects a Tensor")
    if loss.data.ndim != 0:
        raise GradientError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires a gradient")

    order = _topological_order(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return loss