"""Dense ops on NHWC arrays, each with an exact backward pass.

Every forward function returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache. Ops work in whatever float dtype they are
given (float32 for training, float64 in gradient checks).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .counting import tally

BN_EPSILON = 1e-5
BN_DECAY = 0.9


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2, (a.shape, b.shape)
    tally("matmul", 2 * m * n * k)
    return a @ b


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


# -- convolution ---------------------------------------------------------------

def conv2d(x: np.ndarray, filters: np.ndarray, stride: int = 1):
    """'Same'-padded cross-correlation without bias.

    x: (N, H, W, C_in); filters: (kh, kw, C_in, C_out).
    """
    n, h, w, c = x.shape
    kh, kw, cin, cout = filters.shape
    if cin != c:
        raise ValueError(f"filter expects {cin} channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("filter dimensions must be odd")
    ho, pt, pb = _same_padding(h, kh, stride)
    wo, pl, pr = _same_padding(w, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    # windows: (N, H', W', C, kh, kw) -> strided -> (N, ho, wo, kh, kw, C)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    out = _matmul(cols, filters.reshape(kh * kw * c, cout)).reshape(n, ho, wo, cout)
    cache = (x.shape, xp.shape, cols, filters, stride, (pt, pl), (ho, wo))
    return out, cache


def conv2d_backward(dout: np.ndarray, cache):
    x_shape, xp_shape, cols, filters, stride, (pt, pl), (ho, wo) = cache
    n, h, w, c = x_shape
    kh, kw, cin, cout = filters.shape
    dflat = dout.reshape(n * ho * wo, cout)
    dfilters = _matmul(cols.T, dflat).reshape(filters.shape)
    dcols = _matmul(dflat, filters.reshape(kh * kw * c, cout).T).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pt:pt + h, pl:pl + w, :]
    return np.ascontiguousarray(dx), dfilters


# -- dense ---------------------------------------------------------------------

def dense(x: np.ndarray, weights: np.ndarray, biases: np.ndarray):
    """x: (N, F) -> (N, K)."""
    out = _matmul(x, weights)
    tally("elementwise", out.size)
    return out + biases, (x, weights)


def dense_backward(dout: np.ndarray, cache):
    x, weights = cache
    tally("elementwise", dout.size)
    dbiases = dout.sum(axis=0)
    dweights = _matmul(x.T, dout)
    dx = _matmul(dout, weights.T)
    return dx, dweights, dbiases


# -- elementwise -----------------------------------------------------------------

def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    tally("elementwise", a.size)
    return a + b


def add_backward_count(grad: np.ndarray) -> None:
    # Gradient of a sum passes through unchanged; the fan-out still costs one op/element.
    tally("elementwise", grad.size)


def relu(x: np.ndarray, leakiness: float = 0.0):
    """max(x, leakiness * x)."""
    tally("unary", x.size)
    out = np.maximum(x, leakiness * x)
    return out, (x, leakiness)


def relu_backward(dout: np.ndarray, cache):
    x, leakiness = cache
    tally("unary", dout.size)
    return dout * np.where(x > 0, 1.0, leakiness).astype(dout.dtype)


# -- batch normalization -------------------------------------------------------

BN_FLOPS_PER_ELEMENT = 10


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               moving_mean: np.ndarray, moving_variance: np.ndarray, training: bool,
               decay: float = BN_DECAY, epsilon: float = BN_EPSILON):
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and the moving averages are
    updated in place with ``decay``; otherwise the moving averages are used.
    """
    tally("batch_norm", BN_FLOPS_PER_ELEMENT * x.size)
    axes = tuple(range(x.ndim - 1))
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        moving_mean *= decay
        moving_mean += (1.0 - decay) * mean.astype(moving_mean.dtype)
        moving_variance *= decay
        moving_variance += (1.0 - decay) * var.astype(moving_variance.dtype)
    else:
        mean, var = moving_mean.astype(x.dtype), moving_variance.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, training)


def batch_norm_backward(dout: np.ndarray, cache):
    xhat, inv_std, gamma, training = cache
    tally("batch_norm", BN_FLOPS_PER_ELEMENT * dout.size)
    axes = tuple(range(dout.ndim - 1))
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# -- loss ------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    tally("unary", logits.size)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    tally("unary", logits.size)  # softmax
    picked = log_probs[np.arange(n), labels]
    tally("unary", n)  # negated log-probability of the label
    tally("reduction", n)  # batch mean
    loss = -picked.mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    tally("elementwise", grad.size)
    return float(loss), grad / n


def predict_correct(logits: np.ndarray, labels: np.ndarray) -> tuple[int, np.ndarray]:
    """Number of correct top-1 predictions and the predictions themselves."""
    probs = softmax(logits)
    tally("reduction", probs.size)  # argmax
    predictions = probs.argmax(axis=1)
    tally("elementwise", predictions.size)  # comparison
    hits = predictions == labels
    tally("reduction", hits.size)  # sum
    return int(hits.sum()), predictions
