"""Numerical kernels: 3D convolution, activations and softmax cross-entropy.

Tensors are plain ``numpy.ndarray`` objects in channel-major layout
``[C, X, Y, Z]`` (or ``[B, C, X, Y, Z]`` for batches), float64 unless noted.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GeometryError

DTYPE = np.float64

__all__ = [
    "conv_output_extent",
    "conv3d_forward",
    "conv3d_forward_naive",
    "conv3d_backward",
    "activation_forward",
    "activation_backward",
    "softmax",
    "softmax_cross_entropy",
]


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    """Spatial extent after a convolution; raises GeometryError if it would be < 1."""
    if kernel < 1 or stride < 1 or pad < 0:
        raise GeometryError(f"invalid conv geometry k={kernel} s={stride} p={pad}")
    span = extent + 2 * pad - kernel
    if span < 0:
        raise GeometryError(
            f"kernel {kernel} does not fit input extent {extent} with padding {pad}"
        )
    return span // stride + 1


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise DimensionError(f"expected [C,X,Y,Z] or [B,C,X,Y,Z], got shape {x.shape}")


def _check_weights(x, weights, bias=None):
    if weights.ndim != 5 or not (weights.shape[2] == weights.shape[3] == weights.shape[4]):
        raise DimensionError(f"weights must be [C_out, C_in, k, k, k], got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but weights expect {weights.shape[1]}"
        )
    if bias is not None and np.shape(bias) != (weights.shape[0],):
        raise DimensionError(f"bias shape {np.shape(bias)} != ({weights.shape[0]},)")


def _padded(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _windows(xp, k, stride, out):
    # [B, C, X', Y', Z', k, k, k] view; no copy until tensordot
    v = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    v = v[:, :, ::stride, ::stride, ::stride]
    return v[:, :, : out[0], : out[1], : out[2]]


def _out_dims(x, k, stride, pad):
    return tuple(conv_output_extent(e, k, stride, pad) for e in x.shape[2:])


def conv3d_forward(x, weights, bias, stride=1, pad=0):
    """Cross-correlate ``x`` with ``weights`` using zero padding.

    Lowers the convolution to a single matrix product over the unrolled
    windows. Accepts a single sample ``[C_in, X, Y, Z]`` or a batch.
    """
    xb, single = _as_batch(x)
    _check_weights(xb, weights, bias)
    k = weights.shape[2]
    out = _out_dims(xb, k, stride, pad)
    v = _windows(_padded(xb, pad), k, stride, out)
    y = np.tensordot(v, weights, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    y = np.moveaxis(y, 4, 1) + np.asarray(bias)[None, :, None, None, None]
    y = np.ascontiguousarray(y)
    return y[0] if single else y


def conv3d_forward_naive(x, weights, bias, stride=1, pad=0):
    """Loop-by-loop reference convolution for a single ``[C_in, X, Y, Z]`` sample.

    Slow; exists to pin the semantics of :func:`conv3d_forward`.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise DimensionError(f"expected [C,X,Y,Z], got shape {x.shape}")
    _check_weights(x[None], weights, bias)
    c_out, c_in, k = weights.shape[0], weights.shape[1], weights.shape[2]
    ox, oy, oz = _out_dims(x[None], k, stride, pad)
    xp = _padded(x[None], pad)[0]
    y = np.zeros((c_out, ox, oy, oz), dtype=DTYPE)
    for o in range(c_out):
        for i in range(ox):
            for j in range(oy):
                for l in range(oz):
                    acc = bias[o]
                    for c in range(c_in):
                        for a in range(k):
                            for b in range(k):
                                for d in range(k):
                                    acc += (
                                        weights[o, c, a, b, d]
                                        * xp[c, i * stride + a, j * stride + b, l * stride + d]
                                    )
                    y[o, i, j, l] = acc
    return y


def conv3d_backward(x, weights, stride, pad, upstream_grad):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weights and bias."""
    xb, single = _as_batch(x)
    _check_weights(xb, weights)
    g = np.asarray(upstream_grad)
    if single:
        g = g[None]
    k = weights.shape[2]
    out = _out_dims(xb, k, stride, pad)
    expected = (xb.shape[0], weights.shape[0]) + out
    if g.shape != expected:
        raise DimensionError(f"upstream grad shape {g.shape} != forward output {expected}")

    xp = _padded(xb, pad)
    v = _windows(xp, k, stride, out)
    grad_b = g.sum(axis=(0, 2, 3, 4))
    grad_w = np.tensordot(g, v, axes=([0, 2, 3, 4], [0, 2, 3, 4]))

    # dcols[b, c, x', y', z', a, b, d]: contribution of each window entry
    dcols = np.tensordot(g, weights, axes=([1], [0]))
    dcols = np.moveaxis(dcols, 4, 1)
    gxp = np.zeros_like(xp, dtype=np.result_type(xp, g, weights))
    ox, oy, oz = out
    for a, b, d in itertools.product(range(k), repeat=3):
        gxp[
            :,
            :,
            a : a + stride * (ox - 1) + 1 : stride,
            b : b + stride * (oy - 1) + 1 : stride,
            d : d + stride * (oz - 1) + 1 : stride,
        ] += dcols[..., a, b, d]
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    grad_x = np.ascontiguousarray(gxp)
    return (grad_x[0] if single else grad_x), grad_w, grad_b


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, DTYPE))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation_forward(x, kind):
    x = np.asarray(x, dtype=DTYPE)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "none":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x, kind, upstream_grad):
    """Gradient w.r.t. the pre-activation ``x``; relu uses 0 at the kink."""
    x = np.asarray(x, dtype=DTYPE)
    if kind == "relu":
        return upstream_grad * (x > 0)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return upstream_grad * s * (1.0 - s)
    if kind == "none":
        return np.array(upstream_grad, dtype=DTYPE)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Loss and gradient of softmax followed by negative log-likelihood.

    For a vector of logits ``[C]`` and an integer ``label`` returns
    ``(-log p[label], p - one_hot(label))``. For a batch ``[B, C]`` with an
    array of labels the loss and gradient are those of the batch mean.
    """
    z = np.asarray(logits, dtype=DTYPE)
    single = z.ndim == 1
    zb = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label))
    if zb.ndim != 2 or labels.shape != (zb.shape[0],):
        raise DimensionError(f"logits {z.shape} and labels {np.shape(label)} disagree")
    n, c = zb.shape
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be integers in [0, {c})")
    shifted = zb - zb.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    rows = np.arange(n)
    losses = -log_p[rows, labels]
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / n
