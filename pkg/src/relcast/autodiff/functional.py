"""Differentiable building blocks for the synthesis network."""
from __future__ import annotations

import warnings

import numpy as np

from .tensor import Tensor, as_tensor, matmul


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias
    return y


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply ``gain * xhat + bias``."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: affine params must have shape ({d},)")
    if d == 1:
        warnings.warn("layer_norm over a width-1 axis is degenerate; output equals bias", stacklevel=2)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    g_data = gain.data
    out = xhat * g_data + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dxhat = g * g_data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return Tensor._make(out, (x, gain, bias), backward)


def positional_encoding(length: int, d: int) -> Tensor:
    """Fixed sinusoidal encoding of shape ``(length, d)``; ``d`` must be even."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even model dim, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return Tensor(pe)


def multi_head_attention(q_in, k_in, v_in, heads: int, params: dict, return_weights: bool = False):
    """Unmasked scaled dot-product attention over the second-to-last axis.

    Inputs are ``[..., S, d]``. ``params`` maps ``wq, bq, wk, bk, wv, bv,
    wo, bo`` to tensors. With ``return_weights`` the attention matrix
    ``[..., heads, S, S]`` is returned too, as a plain array.
    """
    q_in, k_in, v_in = as_tensor(q_in), as_tensor(k_in), as_tensor(v_in)
    d = q_in.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        lead = t.shape[:-1]
        return t.reshape(*lead, heads, dh).swapaxes(-2, -3)

    q = split(linear(q_in, params["wq"], params["bq"]))
    k = split(linear(k_in, params["wk"], params["bk"]))
    v = split(linear(v_in, params["wv"], params["bv"]))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v).swapaxes(-2, -3)
    ctx = ctx.reshape(*ctx.shape[:-2], d)
    out = linear(ctx, params["wo"], params["bo"])
    if return_weights:
        return out, weights.data
    return out


def feed_forward(x, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise ``linear -> relu -> linear``."""
    return linear(linear(x, w1, b1).relu(), w2, b2)


def mse_loss(pred, truth, weight: np.ndarray | None = None) -> Tensor:
    """Mean squared error over all entries.

    With ``weight`` (a 0/1 array broadcastable to ``pred``) the mean runs over
    the selected entries only.
    """
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {truth.shape}")
    diff = pred.data - truth.data
    if weight is None:
        w = None
        count = diff.size
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), diff.shape)
        count = float(w.sum())
        if count == 0:
            raise ValueError("mse_loss: weight selects no entries")
        diff = diff * w
    out = np.asarray((diff * diff).sum() / count)

    def backward(g):
        gd = g * 2.0 * diff / count
        if w is not None:
            gd = gd * w
        return gd, -gd

    return Tensor._make(out, (pred, truth), backward)
