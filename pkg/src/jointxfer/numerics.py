"""Layer primitives with hand-derived backward passes.

Every layer comes as a ``*_forward`` / ``*_backward`` pair sharing an opaque
cache, plus a one-shot convenience wrapper (``conv2d``, ``fully_connected``,
...) that optionally takes an ``upstream`` gradient and returns the layer
gradients of ``sum(upstream * output)``.

Tensors are plain ``numpy.ndarray`` in float64, NCHW for images.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

DTYPE = np.float64


@dataclass
class LayerGrads:
    d_input: np.ndarray
    d_params: list = field(default_factory=list)


def _check_upstream(upstream, out):
    if upstream is not None and upstream.shape != out.shape:
        raise DimensionError(
            f"upstream shape {upstream.shape} != output shape {out.shape}")


# ---------------------------------------------------------------------------
# conv2d: 3x3, stride 1, zero padding 1
# ---------------------------------------------------------------------------

def _im2col3x3(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=x.dtype)
    for dh in range(3):
        for dw in range(3):
            cols[:, :, dh, dw] = xp[:, :, dh:dh + h, dw:dw + w]
    return cols.reshape(n, c * 9, h * w)


def conv2d_forward(x, weights, bias):
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D [N,C,H,W], got {x.shape}")
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d weights must be [F,C,3,3], got {weights.shape}")
    n, c, h, w = x.shape
    f = weights.shape[0]
    if weights.shape[1] != c:
        raise DimensionError(
            f"conv2d channel axis mismatch: input C={c}, weights C={weights.shape[1]}")
    if bias.shape != (f,):
        raise DimensionError(
            f"conv2d bias axis mismatch: expected ({f},), got {bias.shape}")
    cols = _im2col3x3(x)
    w2 = weights.reshape(f, c * 9)
    out = np.matmul(w2, cols) + bias[None, :, None]
    return out.reshape(n, f, h, w), (cols, weights, x.shape)


def conv2d_backward(dout, cache):
    cols, weights, xshape = cache
    n, c, h, w = xshape
    f = weights.shape[0]
    d2 = dout.reshape(n, f, h * w)
    dw = np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(weights.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(weights.reshape(f, c * 9).T, d2).reshape(n, c, 3, 3, h, w)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dout.dtype)
    for dh in range(3):
        for dw_ in range(3):
            dxp[:, :, dh:dh + h, dw_:dw_ + w] += dcols[:, :, dh, dw_]
    return LayerGrads(dxp[:, :, 1:-1, 1:-1].copy(), [dw, db])


def conv2d(x, weights, bias, upstream=None):
    """3x3 same-padding convolution. Returns ``(output, grads or None)``."""
    out, cache = conv2d_forward(x, weights, bias)
    _check_upstream(upstream, out)
    grads = conv2d_backward(upstream, cache) if upstream is not None else None
    return out, grads


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

def fc_forward(x, weights, bias):
    if x.ndim != 2:
        raise DimensionError(f"fully_connected input must be [N,D], got {x.shape}")
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise DimensionError(
            f"fully_connected D_in mismatch: input {x.shape[1]}, weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(
            f"fully_connected D_out mismatch: weights {weights.shape[0]}, bias {bias.shape}")
    return x @ weights.T + bias, (x, weights)


def fc_backward(dout, cache):
    x, weights = cache
    return LayerGrads(dout @ weights, [dout.T @ x, dout.sum(axis=0)])


def fully_connected(x, weights, bias, upstream=None):
    out, cache = fc_forward(x, weights, bias)
    _check_upstream(upstream, out)
    grads = fc_backward(upstream, cache) if upstream is not None else None
    return out, grads


# ---------------------------------------------------------------------------
# leaky ReLU
# ---------------------------------------------------------------------------

def leaky_relu_forward(x, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0,1), got {slope}")
    pos = x > 0
    return np.where(pos, x, slope * x), (pos, slope)


def leaky_relu_backward(dout, cache):
    pos, slope = cache
    # x == 0 takes the slope branch
    return LayerGrads(np.where(pos, dout, slope * dout), [])


def leaky_relu(x, slope=0.01, upstream=None):
    out, cache = leaky_relu_forward(x, slope)
    _check_upstream(upstream, out)
    grads = leaky_relu_backward(upstream, cache) if upstream is not None else None
    return out, grads


# ---------------------------------------------------------------------------
# group normalization
# ---------------------------------------------------------------------------

def group_norm_forward(x, gamma, beta, groups, eps=1e-5):
    if x.ndim != 4:
        raise DimensionError(f"group_norm input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if groups <= 0 or c % groups:
        raise ConfigError(f"channels ({c}) not divisible by groups ({groups})")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"group_norm gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}")
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv_std).reshape(x.shape)
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, groups)


def group_norm_backward(dout, cache):
    xhat, inv_std, gamma, groups = cache
    n = xhat.shape[0]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = (dout * gamma[None, :, None, None]).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    m = xh.shape[2]
    s1 = dxhat.sum(axis=2, keepdims=True)
    s2 = (dxhat * xh).sum(axis=2, keepdims=True)
    dx = inv_std * (dxhat - s1 / m - xh * s2 / m)
    return LayerGrads(dx.reshape(xhat.shape), [dgamma, dbeta])


def group_norm(x, gamma, beta, groups, eps=1e-5, upstream=None):
    """Per-sample normalization over channel groups.

    Statistics are computed per (sample, group), so a sample's output never
    depends on the rest of the batch.
    """
    out, cache = group_norm_forward(x, gamma, beta, groups, eps)
    _check_upstream(upstream, out)
    grads = group_norm_backward(upstream, cache) if upstream is not None else None
    return out, grads


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(x, rate, mode="train", rng=None):
    """Inverted dropout. Returns ``(output, mask)``; mask already carries the
    ``1/(1-rate)`` scale, so backward is ``dout * mask``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return LayerGrads(dout * mask, [])


# ---------------------------------------------------------------------------
# 2x2 max pooling
# ---------------------------------------------------------------------------

def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even H, W, got {(h, w)}")
    win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2x2_backward(dout, cache):
    idx, xshape = cache
    n, c, h, w = xshape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = (dwin.reshape(n, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(xshape))
    return LayerGrads(dx, [])


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(fn, x, step=1e-3, indices=None):
    """Compare an analytic gradient against central differences.

    ``fn(x)`` must return ``(scalar value, gradient w.r.t. x)``. Returns the
    max over checked coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``indices`` restricts the check to a subset of flat coordinates.
    """
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    x = np.array(x, dtype=DTYPE)
    value, analytic = fn(x.copy())
    value2, analytic2 = fn(x.copy())
    if value != value2 or not np.array_equal(analytic, analytic2):
        raise ContractError("fn is not deterministic; fix dropout masks / rng first")
    analytic = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    if analytic.size != x.size:
        raise DimensionError(
            f"analytic gradient has {analytic.size} entries, input has {x.size}")
    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp, _ = fn(xp.reshape(x.shape))
        fm, _ = fn(xm.reshape(x.shape))
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return float(worst)
