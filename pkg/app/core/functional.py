"""Differentiable operations over :class:`Tensor`.

Each op computes its value with numpy and registers the gradient rule on the
result. Broadcasting follows numpy semantics; gradients are summed back onto
the broadcast operand.
"""

import math
from typing import Optional, Tuple, Union

import numpy as np

from .errors import DimensionError
from .tensor import Tensor

__all__ = [
    "add",
    "sub",
    "mul",
    "div",
    "power",
    "matmul",
    "softmax",
    "log_softmax",
    "gelu",
    "layer_norm",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "gather_rows",
    "scatter_rows",
    "gather_elements",
    "cross_entropy",
    "GELU_COEFFICIENT",
]

# tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_COEFFICIENT = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

Operand = Union[Tensor, float, int, np.ndarray]


def _as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor.from_op(out, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * np.power(x.data, exponent - 1),)

    return Tensor.from_op(np.power(x.data, exponent), (x,), backward, "power")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return Tensor.from_op(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def gelu(x: Tensor) -> Tensor:
    inner = _SQRT_2_OVER_PI * (x.data + GELU_COEFFICIENT * x.data ** 3)
    tanh = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + tanh)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFFICIENT * x.data ** 2)
        return (g * (0.5 * (1.0 + tanh) + 0.5 * x.data * (1.0 - tanh ** 2) * d_inner),)

    return Tensor.from_op(out, (x,), backward, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {x.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def backward(g):
        flat_g = g.reshape(-1, g.shape[-1])
        grad_gain = (flat_g * normed.reshape(flat_g.shape)).sum(axis=0)
        grad_bias = flat_g.sum(axis=0)
        g_normed = g * gain.data
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return Tensor.from_op(out, (x, gain, bias), backward, "layer_norm")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor.from_op(np.transpose(x.data, axes), (x,), backward, "transpose")


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]`` along the first axis (embedding lookup, expert dispatch)."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise DimensionError(f"row index out of range for {x.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor.from_op(x.data[index], (x,), backward, "gather_rows")


def scatter_rows(x: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Sum the rows of ``x`` into a ``num_rows``-row zero tensor at ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.shape[0]:
        raise DimensionError(f"scatter index length {index.shape[0]} does not match {x.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= num_rows):
        raise DimensionError(f"scatter index out of range for {num_rows} rows")
    out = np.zeros((num_rows,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, index, x.data)

    def backward(g):
        return (g[index],)

    return Tensor.from_op(out, (x,), backward, "scatter_rows")


def gather_elements(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, cols), g)
        return (grad,)

    return Tensor.from_op(x.data[rows, cols], (x,), backward, "gather_elements")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits[N, V]``.

    With no targets the loss is a constant zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        return Tensor(0.0)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy logits {logits.shape} do not match {targets.shape[0]} targets")
    log_probs = log_softmax(logits)
    picked = gather_elements(log_probs, np.arange(targets.shape[0]), targets)
    return mul(sum(picked), -1.0 / targets.shape[0])
