"""Reverse-mode gradient tape over the kernels in :mod:`dualsiam.ops`.

The tape records one backward closure per forward op.  Calling
:meth:`GradTape.backward` replays the closures exactly once, in reverse
order, accumulating gradients into every :class:`Node` that fed the
graph.  Plain ndarrays may be mixed in anywhere and are treated as
constants (no gradient is produced for them) -- this is how frozen
network parameters stay out of the optimization.

A tape is single-writer: one forward pass followed by one backward pass.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractViolationError


class Node:
    """A value tracked by a tape; ``grad`` is filled in by backward()."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _accumulate(x, grad):
    if isinstance(x, Node):
        x.grad = grad if x.grad is None else x.grad + grad


class GradTape:
    """Records forward ops and replays their gradients in reverse order."""

    def __init__(self):
        self._records = []     # (output Node, backward closure)
        self._outputs = set()  # ids of Nodes produced by this tape
        self._spent = False

    def _emit(self, value, backward):
        out = Node(value)
        self._records.append((out, backward))
        self._outputs.add(id(out))
        return out

    def backward(self, output: Node, output_grad: np.ndarray):
        """Seed ``output.grad`` and propagate through every recorded op once."""
        if not self._records:
            raise ContractViolationError("backward called on a tape with no recorded forward ops")
        if id(output) not in self._outputs:
            raise ContractViolationError("backward target was not produced by this tape")
        if self._spent:
            raise ContractViolationError("tape already consumed; one forward/backward pair per tape")
        if np.shape(output_grad) != output.value.shape:
            raise ContractViolationError(
                f"seed gradient shape {np.shape(output_grad)} does not match output {output.value.shape}"
            )
        self._spent = True
        output.grad = np.array(output_grad, dtype=output.value.dtype, copy=True)
        for out, backward in reversed(self._records):
            if out.grad is not None:
                backward(out.grad)

    # ---- recorded operations -------------------------------------------

    def conv2d(self, x, kernel_w, kernel_b, stride=1, padding=0):
        xv = value_of(x)
        wv, bv = value_of(kernel_w), value_of(kernel_b)
        kernel = ops.ConvKernel(wv, bv, stride=stride, padding=padding)
        y, cols, padded_shape = ops.conv2d_with_cache(xv, kernel)
        kh, kw, in_c, out_c = wv.shape

        def backward(grad):
            g_mat = grad.reshape(-1, out_c)
            if isinstance(kernel_w, Node):
                _accumulate(kernel_w, (cols.T @ g_mat).reshape(wv.shape))
            if isinstance(kernel_b, Node):
                _accumulate(kernel_b, g_mat.sum(axis=0))
            if isinstance(x, Node):
                gx = ops.col2im(g_mat @ wv.reshape(-1, out_c).T, padded_shape, kh, kw, stride)
                if padding:
                    gx = gx[padding:-padding, padding:-padding, :]
                _accumulate(x, gx)

        return self._emit(y, backward)

    def max_pool(self, x, window, stride):
        xv = value_of(x)
        y, flat_idx = ops.max_pool_with_cache(xv, window, stride)

        def backward(grad):
            if isinstance(x, Node):
                gx = np.zeros(xv.size, dtype=grad.dtype)
                np.add.at(gx, flat_idx.ravel(), grad.ravel())
                _accumulate(x, gx.reshape(xv.shape))

        return self._emit(y, backward)

    def relu(self, x):
        xv = value_of(x)
        y = ops.relu(xv)

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, grad * (xv > 0))

        return self._emit(y, backward)

    def sigmoid(self, x):
        xv = value_of(x)
        y = ops.sigmoid(xv)

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, grad * y * (1 - y))

        return self._emit(y, backward)

    def cross_correlate(self, template, search):
        tv, sv = value_of(template), value_of(search)
        y, cols = ops.cross_correlate_with_cache(tv, sv)
        d_h, d_w, c = tv.shape

        def backward(grad):
            g = grad.reshape(-1)
            if isinstance(template, Node):
                _accumulate(template, (cols.T @ g).reshape(tv.shape))
            if isinstance(search, Node):
                gs = ops.col2im(np.outer(g, tv.reshape(-1)), sv.shape, d_h, d_w, 1)
                _accumulate(search, gs)

        return self._emit(y, backward)

    def channel_scale(self, features, weights):
        fv, wv = value_of(features), value_of(weights)
        y = ops.channel_scale(fv, wv)

        def backward(grad):
            if isinstance(features, Node):
                _accumulate(features, grad * wv[None, None, :])
            if isinstance(weights, Node):
                _accumulate(weights, (grad * fv).sum(axis=(0, 1)))

        return self._emit(y, backward)

    def matmul(self, x, w):
        xv, wv = value_of(x), value_of(w)
        y = xv @ wv

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, grad @ wv.T)
            if isinstance(w, Node):
                _accumulate(w, xv.T @ grad)

        return self._emit(y, backward)

    def add(self, x, y_in):
        xv, yv = value_of(x), value_of(y_in)
        out = xv + yv

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, grad if xv.shape == grad.shape else _unbroadcast(grad, xv.shape))
            if isinstance(y_in, Node):
                _accumulate(y_in, grad if yv.shape == grad.shape else _unbroadcast(grad, yv.shape))

        return self._emit(out, backward)

    def add_const(self, x, constant):
        xv = value_of(x)

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, grad)

        return self._emit(xv + constant, backward)

    def lincomb(self, a: float, x, b: float, y_in):
        """a * x + b * y, both terms elementwise with scalar coefficients."""
        xv, yv = value_of(x), value_of(y_in)
        out = a * xv + b * yv

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, a * grad)
            if isinstance(y_in, Node):
                _accumulate(y_in, b * grad)

        return self._emit(out, backward)

    def global_avg_pool(self, x):
        """Mean over the spatial axes of an HxWxC map, yielding a C vector."""
        xv = value_of(x)
        h, w, _ = xv.shape
        y = xv.mean(axis=(0, 1))

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, np.broadcast_to(grad[None, None, :] / (h * w), xv.shape).copy())

        return self._emit(y, backward)

    def reshape(self, x, shape):
        xv = value_of(x)

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, grad.reshape(xv.shape))

        return self._emit(xv.reshape(shape), backward)

    def scale_shift(self, x, scale, bias):
        """x * scale + bias with one-element scale/bias arrays."""
        xv, sv, bv = value_of(x), value_of(scale), value_of(bias)
        y = xv * sv[0] + bv[0]

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, grad * sv[0])
            if isinstance(scale, Node):
                _accumulate(scale, np.array([(grad * xv).sum()], dtype=sv.dtype))
            if isinstance(bias, Node):
                _accumulate(bias, np.array([grad.sum()], dtype=bv.dtype))

        return self._emit(y, backward)

    def clip(self, x, lo, hi):
        """Clamp values; gradient passes through the interior, zero outside."""
        xv = value_of(x)
        y = np.clip(xv, lo, hi)

        def backward(grad):
            if isinstance(x, Node):
                _accumulate(x, grad * ((xv >= lo) & (xv <= hi)))

        return self._emit(y, backward)


def _unbroadcast(grad, shape):
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad
