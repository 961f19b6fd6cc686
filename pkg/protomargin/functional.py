"""
Differentiable kernels for protomargin.

Elementwise arithmetic, reductions, and the specific operations the prototype
network needs: convolution, average pooling, pointwise nonlinearities, affine maps,
softmax cross-entropy, L2 distance maps, log-ratio similarity, top-k average
pooling, masked minimum, Frobenius norms and corner-aligned bilinear upsampling.

All reductions run in float64 in a fixed order so repeated evaluation is
bit-identical.
"""

from __future__ import annotations

import hashlib
import threading
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from typing import Any

import numpy as np
from scipy.special import expit, log_softmax, softmax

from protomargin.tensor import Function, ShapeError, Tensor, as_tensor


DEFAULT_EPSILON = 1e-4

# ============================================================================
# Selection recording
# ============================================================================
# Piecewise operations (relu, top-k, masked min) report which branch they took so a
# finite-difference check can discard coordinates whose perturbation crosses a kink.

_selection_state = threading.local()


@contextmanager
def record_selections() -> Iterator[list[str]]:
    """Collect a digest of every piecewise selection made inside the block."""
    log: list[str] = []
    previous = getattr(_selection_state, "log", None)
    _selection_state.log = log
    try:
        yield log
    finally:
        _selection_state.log = previous


def _note_selection(op: str, selection: np.ndarray) -> None:
    log = getattr(_selection_state, "log", None)
    if log is not None:
        digest = hashlib.sha1(np.ascontiguousarray(selection).tobytes()).hexdigest()
        log.append(f"{op}:{digest}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============================================================================
# Arithmetic and reductions
# ============================================================================


class Add(Function):
    op_name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        shape_a, shape_b = self.saved["shapes"]
        return _unbroadcast(grad, shape_a), _unbroadcast(grad, shape_b)


class Mul(Function):
    op_name = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["a"] = a
        self.saved["b"] = b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        a, b = self.saved["a"], self.saved["b"]
        grad_a = _unbroadcast(grad * b, a.shape) if self.inputs[0].requires_grad else None
        grad_b = _unbroadcast(grad * a, b.shape) if self.inputs[1].requires_grad else None
        return grad_a, grad_b


class Neg(Function):
    op_name = "neg"

    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (-grad,)


class Sum(Function):
    op_name = "sum"

    def forward(self, a: np.ndarray, axis: int | tuple[int, ...] | None = None) -> np.ndarray:
        self.saved["shape"] = a.shape
        self.saved["axis"] = axis
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        shape, axis = self.saved["shape"], self.saved["axis"]
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            grad = np.expand_dims(grad, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    op_name = "reshape"

    def forward(self, a: np.ndarray, shape: tuple[int, ...] = ()) -> np.ndarray:
        self.saved["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad.reshape(self.saved["shape"]),)


class Index(Function):
    op_name = "index"

    def forward(self, a: np.ndarray, index: Any = None) -> np.ndarray:
        self.saved["shape"] = a.shape
        self.saved["index"] = index
        return np.array(a[index], copy=True)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        out = np.zeros(self.saved["shape"])
        np.add.at(out, self.saved["index"], grad)
        return (out,)


class Stack(Function):
    op_name = "stack"

    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.saved["axis"] = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        axis = self.saved["axis"]
        return tuple(np.take(grad, i, axis=axis) for i in range(len(self.inputs)))


class MatMul(Function):
    op_name = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.saved["a"] = a
        self.saved["b"] = b
        return a @ b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        a, b = self.saved["a"], self.saved["b"]
        return grad @ b.T, a.T @ grad


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def index(a: Tensor, idx: Any) -> Tensor:
    return Index.apply(a, index=idx)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    return Stack.apply(*tensors, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


# ============================================================================
# Convolution and pooling
# ============================================================================


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output size of a cross-correlation."""
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """
    2-D cross-correlation over NCHW input with an FCkk kernel.

    Computed as one tensordot per kernel offset on strided views of the padded
    input, so no im2col buffer is materialized; backward scatters the same way.
    """

    op_name = "conv2d"

    def forward(
        self,
        x: np.ndarray,
        kernel: np.ndarray,
        *maybe_bias: np.ndarray,
        stride: int = 1,
        padding: int = 0,
    ) -> np.ndarray:
        if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
            raise ShapeError(
                f"conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw] with equal C, "
                f"got input {x.shape} and kernel {kernel.shape}"
            )
        if stride < 1 or padding < 0:
            raise ValueError(f"invalid stride {stride} or padding {padding}")

        n, _, h, w = x.shape
        f, _, kh, kw = kernel.shape
        out_h = conv_output_size(h, kh, stride, padding)
        out_w = conv_output_size(w, kw, stride, padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"conv2d kernel {kernel.shape} does not fit input {x.shape} "
                f"with stride {stride} and padding {padding}"
            )

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out = np.zeros((f, n, out_h, out_w))
        for i in range(kh):
            for j in range(kw):
                window = padded[
                    :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ]
                out += np.tensordot(kernel[:, :, i, j], window, axes=([1], [1]))
        out = out.transpose(1, 0, 2, 3)
        if maybe_bias:
            out = out + maybe_bias[0][None, :, None, None]

        self.saved.update(
            padded=padded,
            kernel=kernel,
            stride=stride,
            padding=padding,
            out_hw=(out_h, out_w),
            x_shape=x.shape,
        )
        return np.ascontiguousarray(out)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        padded = self.saved["padded"]
        kernel = self.saved["kernel"]
        stride = self.saved["stride"]
        padding = self.saved["padding"]
        out_h, out_w = self.saved["out_hw"]
        _, _, h, w = self.saved["x_shape"]
        _, _, kh, kw = kernel.shape

        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kernel)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * out_h, stride)
                cols = slice(j, j + stride * out_w, stride)
                window = padded[:, :, rows, cols]
                # grad [N,F,oh,ow] x window [N,C,oh,ow] -> [F,C]
                grad_kernel[:, :, i, j] = np.tensordot(grad, window, axes=([0, 2, 3], [0, 2, 3]))
                # kernel [F,C] x grad [N,F,oh,ow] -> [C,N,oh,ow]
                contrib = np.tensordot(kernel[:, :, i, j], grad, axes=([0], [1]))
                grad_padded[:, :, rows, cols] += contrib.transpose(1, 0, 2, 3)

        grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
        grads: list[np.ndarray | None] = [np.ascontiguousarray(grad_x), grad_kernel]
        if len(self.inputs) == 3:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    Cross-correlate `x` [N,C,H,W] with `kernel` [F,C,kh,kw].

    Raises:
        ShapeError: If channel counts differ or the kernel does not fit.
    """
    if bias is None:
        return Conv2d.apply(x, kernel, stride=stride, padding=padding)
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


class AvgPool2d(Function):
    op_name = "avg_pool2d"

    def forward(self, x: np.ndarray, size: int = 2) -> np.ndarray:
        n, c, h, w = x.shape
        if h % size or w % size:
            raise ShapeError(f"avg_pool2d window {size} does not tile input {x.shape}")
        self.saved["size"] = size
        return x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        size = self.saved["size"]
        expanded = np.repeat(np.repeat(grad, size, axis=2), size, axis=3)
        return (expanded / (size * size),)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping `size`x`size` average pooling (the backbone's 2x downsample)."""
    return AvgPool2d.apply(x, size=size)


# ============================================================================
# Pointwise nonlinearities and affine maps
# ============================================================================


class ReLU(Function):
    op_name = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        active = x > 0
        _note_selection(self.op_name, active)
        self.saved["active"] = active
        return np.where(active, x, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.saved["active"],)


class Sigmoid(Function):
    op_name = "sigmoid"

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = expit(x)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        out = self.saved["out"]
        return (grad * out * (1.0 - out),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def pointwise(x: Tensor, kind: str) -> Tensor:
    """Apply the named pointwise nonlinearity ("relu" or "sigmoid")."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"Unknown nonlinearity: {kind}")


class Linear(Function):
    op_name = "linear"

    def forward(self, x: np.ndarray, weight: np.ndarray, *maybe_bias: np.ndarray) -> np.ndarray:
        if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or x.ndim > 2:
            raise ShapeError(
                f"linear expects input [..., n] and weight [o, n], got {x.shape} and {weight.shape}"
            )
        if maybe_bias and maybe_bias[0].shape != (weight.shape[0],):
            raise ShapeError(
                f"linear bias shape {maybe_bias[0].shape} does not match weight {weight.shape}"
            )
        self.saved["x"] = x
        self.saved["weight"] = weight
        out = x @ weight.T
        if maybe_bias:
            out = out + maybe_bias[0]
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        x, weight = self.saved["x"], self.saved["weight"]
        grad_x = grad @ weight
        grad_w = np.outer(grad, x) if x.ndim == 1 else grad.T @ x
        grads: list[np.ndarray | None] = [grad_x, grad_w]
        if len(self.inputs) == 3:
            grads.append(grad if grad.ndim == 1 else grad.sum(axis=0))
        return tuple(grads)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map `x @ weight.T + bias` for a vector or a batch of row vectors."""
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


# ============================================================================
# Losses
# ============================================================================


class SoftmaxCrossEntropy(Function):
    op_name = "softmax_cross_entropy"

    def forward(self, logits: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
        batched = logits.ndim == 2
        logits2 = logits if batched else logits[None, :]
        labels_arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        classes = logits2.shape[1]
        if classes < 2:
            raise ShapeError(f"softmax_cross_entropy needs at least 2 classes, got {classes}")
        if labels_arr.shape != (logits2.shape[0],):
            raise ShapeError(
                f"labels shape {labels_arr.shape} does not match logits {logits.shape}"
            )
        if np.any(labels_arr < 0) or np.any(labels_arr >= classes):
            raise ValueError(f"label out of range [0, {classes}): {labels_arr.tolist()}")

        log_probs = log_softmax(logits2, axis=1)
        rows = np.arange(logits2.shape[0])
        losses = -log_probs[rows, labels_arr]
        self.saved.update(
            probs=np.exp(log_probs), labels=labels_arr, batched=batched, count=len(rows)
        )
        return np.asarray(losses.mean())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        probs = self.saved["probs"].copy()
        labels = self.saved["labels"]
        probs[np.arange(len(labels)), labels] -= 1.0
        out = probs * (grad / self.saved["count"])
        return (out if self.saved["batched"] else out[0],)


def softmax_cross_entropy(logits: Tensor, labels: int | Sequence[int] | np.ndarray) -> Tensor:
    """
    Mean of -log softmax(logits)[label] over the batch (stable log-sum-exp).

    Accepts a single logit vector [K] with an integer label, or a batch [N, K] with N
    labels.
    """
    return SoftmaxCrossEntropy.apply(logits, labels=np.asarray(labels))


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis (not recorded)."""
    return softmax(logits, axis=-1)


class BinaryCrossEntropyWithLogits(Function):
    op_name = "bce_with_logits"

    def forward(self, z: np.ndarray, targets: np.ndarray | None = None) -> np.ndarray:
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != z.shape:
            raise ShapeError(f"targets shape {y.shape} does not match logits {z.shape}")
        # log(1 + e^z) - y z, written stably
        losses = np.logaddexp(0.0, z) - y * z
        self.saved.update(z=z, y=y)
        return np.asarray(losses.mean())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        z, y = self.saved["z"], self.saved["y"]
        return ((expit(z) - y) * (grad / z.size),)


def binary_cross_entropy_with_logits(z: Tensor, targets: np.ndarray) -> Tensor:
    """Mean logistic log-loss of logits `z` against 0/1 targets."""
    return BinaryCrossEntropyWithLogits.apply(z, targets=targets)


# ============================================================================
# Prototype layer kernels
# ============================================================================


class L2DistanceMap(Function):
    """Squared L2 distance between every latent patch and every prototype."""

    op_name = "l2_distance_map"

    def forward(self, latent: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
        if latent.ndim != 4 or prototypes.ndim != 2 or latent.shape[1] != prototypes.shape[1]:
            raise ShapeError(
                f"l2_distance_map expects latent [N,c,H,W] and prototypes [m,c] with equal c, "
                f"got {latent.shape} and {prototypes.shape}"
            )
        n, _, h, w = latent.shape
        out = np.empty((n, prototypes.shape[0], h, w))
        for j, proto in enumerate(prototypes):
            diff = latent - proto[None, :, None, None]
            out[:, j] = np.einsum("nchw,nchw->nhw", diff, diff)
        self.saved.update(latent=latent, prototypes=prototypes)
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        latent, prototypes = self.saved["latent"], self.saved["prototypes"]
        grad_latent = np.zeros_like(latent)
        grad_protos = np.zeros_like(prototypes)
        for j, proto in enumerate(prototypes):
            g = grad[:, j][:, None, :, :]
            diff = latent - proto[None, :, None, None]
            grad_latent += 2.0 * g * diff
            grad_protos[j] = -2.0 * np.einsum("nchw->c", g * diff)
        return grad_latent, grad_protos


def l2_distance_map(latent: Tensor, prototypes: Tensor) -> Tensor:
    """
    Squared L2 distances from latent patches to prototypes.

    Shapes: latent [N,c,H,W] with prototypes [m,c] gives [N,m,H,W]; a single latent
    [c,H,W] with a single prototype [c] gives [H,W].

    Raises:
        ShapeError: If channel dimensions differ.
    """
    single = latent.ndim == 3 and prototypes.ndim == 1
    if single:
        if latent.shape[0] != prototypes.shape[0]:
            raise ShapeError(
                f"channel mismatch between latent {latent.shape} and prototype {prototypes.shape}"
            )
        c, h, w = latent.shape
        out = L2DistanceMap.apply(reshape(latent, (1, c, h, w)), reshape(prototypes, (1, c)))
        return reshape(out, (h, w))
    return L2DistanceMap.apply(latent, prototypes)


class DistToSim(Function):
    op_name = "dist_to_sim"

    def forward(self, d: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
        if np.any(d < 0):
            raise ValueError("dist_to_sim needs nonnegative distances")
        self.saved.update(d=d, epsilon=epsilon)
        return np.log((d + 1.0) / (d + epsilon))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        d, eps = self.saved["d"], self.saved["epsilon"]
        return (grad * (1.0 / (d + 1.0) - 1.0 / (d + eps)),)


def dist_to_sim(d: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """
    Convert distances to similarities: log((d + 1) / (d + epsilon)).

    Strictly decreasing in d, equal to log(1/epsilon) at d = 0 and tending to 0.

    Raises:
        ValueError: If epsilon is not in (0, 1).
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    return DistToSim.apply(d, epsilon=epsilon)


def _topk_indices(flat: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on negated values keeps ties in row-major order.
    return np.argsort(-flat, axis=-1, kind="stable")[..., :k]


class TopKAvgPool(Function):
    op_name = "topk_avg_pool"

    def forward(self, x: np.ndarray, k: int = 1) -> np.ndarray:
        if x.ndim < 2:
            raise ShapeError(f"topk_avg_pool expects a map [..., H, W], got {x.shape}")
        cells = x.shape[-2] * x.shape[-1]
        if not 1 <= k <= cells:
            raise ValueError(f"k must lie in [1, {cells}], got {k}")
        flat = x.reshape(*x.shape[:-2], cells)
        chosen = _topk_indices(flat, k)
        _note_selection(self.op_name, np.sort(chosen, axis=-1))
        values = np.take_along_axis(flat, chosen, axis=-1)
        self.saved.update(shape=x.shape, chosen=chosen, k=k)
        return values.mean(axis=-1)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        shape, chosen, k = self.saved["shape"], self.saved["chosen"], self.saved["k"]
        cells = shape[-2] * shape[-1]
        flat = np.zeros((*shape[:-2], cells))
        spread = np.broadcast_to((grad / k)[..., None], chosen.shape)
        np.put_along_axis(flat, chosen, spread, axis=-1)
        return (flat.reshape(shape),)


def topk_avg_pool(x: Tensor, k: int) -> Tensor:
    """
    Mean of the k largest entries over the last two axes.

    Gradient flows 1/k to exactly the selected cells; ties are broken by row-major
    index. `k = 1` is max pooling.

    Raises:
        ValueError: If k is outside [1, H*W].
    """
    return TopKAvgPool.apply(x, k=k)


def mink_mean(x: Tensor, k: int) -> Tensor:
    """Mean of the k smallest entries over the last two axes."""
    return neg(topk_avg_pool(neg(x), k))


class MaskedMin(Function):
    op_name = "masked_min"

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape != x.shape:
            raise ShapeError(f"mask shape {allowed.shape} does not match input {x.shape}")
        if not np.all(allowed.any(axis=-1)):
            raise ValueError("masked_min: a row has no admissible entries")
        masked = np.where(allowed, x, np.inf)
        chosen = np.argmin(masked, axis=-1)
        _note_selection(self.op_name, chosen)
        self.saved.update(shape=x.shape, chosen=chosen)
        return np.take_along_axis(x, chosen[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        out = np.zeros(self.saved["shape"])
        np.put_along_axis(out, self.saved["chosen"][..., None], grad[..., None], axis=-1)
        return (out,)


def masked_min(x: Tensor, mask: np.ndarray) -> Tensor:
    """Minimum over the last axis restricted to `mask`; ties go to the lowest index."""
    return MaskedMin.apply(x, mask=mask)


class FrobeniusNorm(Function):
    op_name = "frobenius_norm"

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim < 2:
            raise ShapeError(f"frobenius_norm expects [..., H, W], got {x.shape}")
        norm = np.sqrt(np.einsum("...hw,...hw->...", x, x))
        self.saved.update(x=x, norm=norm)
        return norm

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        x, norm = self.saved["x"], self.saved["norm"]
        # subgradient 0 at the origin
        scale = np.divide(grad, norm, out=np.zeros_like(norm), where=norm > 0)
        return (x * scale[..., None, None],)


def frobenius_norm(x: Tensor) -> Tensor:
    """Entrywise L2 norm over the last two axes."""
    return FrobeniusNorm.apply(x)


# ============================================================================
# Bilinear upsampling
# ============================================================================


def interpolation_matrix(size_in: int, size_out: int) -> np.ndarray:
    """
    Corner-aligned linear interpolation weights [size_out, size_in].

    Output sample i sits at input coordinate i * (size_in - 1) / (size_out - 1), so the
    first and last samples coincide with the input corners.
    """
    weights = np.zeros((size_out, size_in))
    if size_out == 1:
        weights[0, 0] = 1.0
        return weights
    for i in range(size_out):
        numerator = i * (size_in - 1)
        lo, rem = divmod(numerator, size_out - 1)
        frac = rem / (size_out - 1)
        weights[i, lo] += 1.0 - frac
        if rem:
            weights[i, lo + 1] += frac
    return weights


class BilinearUpsample(Function):
    op_name = "bilinear_upsample"

    def forward(self, x: np.ndarray, out_h: int = 0, out_w: int = 0) -> np.ndarray:
        h, w = x.shape[-2:]
        if h < 2 or w < 2:
            raise ShapeError(f"bilinear_upsample needs maps of at least 2x2, got {x.shape}")
        if out_h < h or out_w < w:
            raise ValueError(
                f"bilinear_upsample output {out_h}x{out_w} is smaller than input {h}x{w}"
            )
        rows = interpolation_matrix(h, out_h)
        cols = interpolation_matrix(w, out_w)
        self.saved.update(rows=rows, cols=cols)
        return np.matmul(np.matmul(rows, x), cols.T)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        rows, cols = self.saved["rows"], self.saved["cols"]
        return (np.matmul(np.matmul(rows.T, grad), cols),)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """
    Corner-aligned bilinear upsampling of the last two axes to out_h x out_w.

    Each output is a convex combination of inputs, so constant maps stay constant and
    the output range stays within the input range.

    Raises:
        ValueError: If the output is smaller than the input.
        ShapeError: If the input map is smaller than 2x2.
    """
    return BilinearUpsample.apply(x, out_h=out_h, out_w=out_w)
