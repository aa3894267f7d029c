"""Minimal reverse-mode automatic differentiation over numpy arrays.

This is not a general autodiff graph: it provides exactly the op set the patch
network needs (elementwise arithmetic, matmul, reshape/transpose, reductions,
ReLU, same-size depthwise 2D convolution, and fused softmax cross-entropy).
Gradients accumulate in the dtype of the forward data, so running the graph in
float64 gives a high-precision checking mode.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, NumericalFailureError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this (scalar or any-shape) tensor with seed gradient 1."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.grad is not None})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data
    out = _node(out_data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data - b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data * b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = backward
    return out


def powf(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent (base must stay positive
    for non-integer exponents, which holds for the variance+eps use here)."""
    a = _as_tensor(a)
    out = _node(a.data**exponent, (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * exponent * a.data ** (exponent - 1))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(np.matmul(a.data, b.data), (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    out._backward = backward
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = _node(np.where(mask, a.data, 0.0), (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * mask)

    out._backward = backward
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = _node(a.data.reshape(shape), (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    out._backward = backward
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _node(a.data.transpose(axes), (a,), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.transpose(inverse))

    out._backward = backward
    return out


def mean(a, axes, keepdims: bool = True) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = _node(a.data.mean(axis=axes, keepdims=keepdims), (a,), None)

    def backward():
        if a.requires_grad:
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g / count, a.data.shape).copy())

    out._backward = backward
    return out


def sum_over(a, axes, keepdims: bool = True) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), None)

    def backward():
        if a.requires_grad:
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    out._backward = backward
    return out


def conv_same_padding(k: int) -> tuple[int, int]:
    """Zero-padding (low, high) giving same-size output for kernel size k.

    Odd kernels pad floor(k/2) on both sides; even kernels pad one extra on
    the high side.
    """
    return (k - 1) // 2, k // 2


def depthwise_conv2d(x, kernel) -> Tensor:
    """Per-channel 2D correlation with same-size zero padding.

    ``x`` has shape (B, C, H, W) and ``kernel`` (C, kh, kw); each channel is
    correlated with its own kernel and the output keeps the input shape.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    B, C, H, W = x.data.shape
    kc, kh, kw = kernel.data.shape
    if kc != C:
        raise InvalidArgumentError(f"kernel has {kc} channels, input has {C}")
    if kh > 2 * H or kw > 2 * W:
        raise InvalidArgumentError("kernel larger than padded input")
    plh, phh = conv_same_padding(kh)
    plw, phw = conv_same_padding(kw)
    x_pad = np.pad(x.data, ((0, 0), (0, 0), (plh, phh), (plw, phw)))
    windows = sliding_window_view(x_pad, (kh, kw), axis=(2, 3))
    out_data = np.einsum("bchwij,cij->bchw", windows, kernel.data)
    out = _node(out_data.astype(x.data.dtype, copy=False), (x, kernel), None)

    def backward():
        g = out.grad
        if kernel.requires_grad:
            kernel._accumulate(np.einsum("bchwij,bchw->cij", windows, g))
        if x.requires_grad:
            # Gradient w.r.t. the padded input is the full correlation of the
            # output gradient with the 180-degree-rotated kernel.
            g_pad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            g_windows = sliding_window_view(g_pad, (kh, kw), axis=(2, 3))
            flipped = kernel.data[:, ::-1, ::-1]
            gx_pad = np.einsum("bchwij,cij->bchw", g_windows, flipped)
            x._accumulate(gx_pad[:, :, plh : plh + H, plw : plw + W].astype(x.data.dtype, copy=False))

    out._backward = backward
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (plain numpy, no graph)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``).

    Returns a scalar tensor; raises on non-finite losses.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = logits.data.shape
    if labels.size != B:
        raise InvalidArgumentError(f"{labels.size} labels for batch of {B}")
    with np.errstate(invalid="ignore", over="ignore"):
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss_value = -log_probs[np.arange(B), labels].mean()
    if not np.isfinite(loss_value):
        raise NumericalFailureError(f"cross-entropy loss is {loss_value}")
    out = _node(np.asarray(loss_value, dtype=logits.data.dtype), (logits,), None)

    def backward():
        if logits.requires_grad:
            probs = np.exp(log_probs)
            probs[np.arange(B), labels] -= 1.0
            logits._accumulate(out.grad * probs / B)

    out._backward = backward
    return out
