"""Differentiable operations on NCHW / NC tensors.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients. Shapes are checked explicitly;
there is no general broadcasting.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, emit


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _expect(cond, msg):
    if not cond:
        raise ShapeError(msg)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding. x: NCHW, w: OIKK, b: O."""
    _expect(x.data.ndim == 4 and w.data.ndim == 4, f"conv2d expects NCHW input and OIKK weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    _expect(ci == c and k == k2 and b.shape == (o,), f"conv2d shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    _expect(ho > 0 and wo > 0, f"conv2d kernel {k} too large for input {x.shape} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T + b.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for ky in range(k):
                for kx in range(k):
                    dxp[:, :, ky : ky + (ho - 1) * stride + 1 : stride, kx : kx + (wo - 1) * stride + 1 : stride] += dcols[
                        :, :, :, :, ky, kx
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        return gx, gw, gb

    return emit(np.ascontiguousarray(out), (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1 / (1 + e), e / (1 + e))
    return emit(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return emit(y, (x,), lambda g: (g * y,))


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of an N x C tensor."""
    _expect(x.data.ndim == 2, f"softmax expects N x C, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return emit(p, (x,), backward)


def avgpool_global(x: Tensor) -> Tensor:
    _expect(x.data.ndim == 4, f"avgpool_global expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),)

    return emit(x.data.mean(axis=(2, 3)), (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _expect(x.data.ndim == 4, f"upsample expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return emit(y, (x,), backward)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: N x K, w: O x K, b: O."""
    _expect(x.data.ndim == 2 and w.data.ndim == 2, f"fully_connected expects N x K and O x K, got {x.shape} and {w.shape}")
    _expect(x.shape[1] == w.shape[1] and b.shape == (w.shape[0],), f"fully_connected shape mismatch: {x.shape}, {w.shape}, {b.shape}")

    def backward(g):
        return (
            g @ w.data if x.requires_grad else None,
            g.T @ x.data if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return emit(x.data @ w.data.T + b.data, (x, w, b), backward)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of an NCHW tensor by a per-sample factor s (N x C)."""
    _expect(x.data.ndim == 4 and s.shape == x.shape[:2], f"scale_channels needs NCHW and N x C, got {x.shape} and {s.shape}")
    sb = s.data[:, :, None, None]

    def backward(g):
        return (
            g * sb if x.requires_grad else None,
            (g * x.data).sum(axis=(2, 3)) if s.requires_grad else None,
        )

    return emit(x.data * sb, (x, s), backward)


def power(x: Tensor, p: Tensor, eps: float = 1e-6) -> Tensor:
    """Elementwise max(x, eps) ** p with one exponent per sample (p: N or N x 1)."""
    _expect(p.data.ndim in (1, 2) and p.data.size == x.shape[0], f"power needs one exponent per sample, got {p.shape} for {x.shape}")
    base = np.maximum(x.data, eps)
    pb = p.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
    y = base**pb

    def backward(g):
        gx = g * pb * y / base * (x.data > eps) if x.requires_grad else None
        gp = (g * y * np.log(base)).reshape(x.shape[0], -1).sum(axis=1).reshape(p.shape) if p.requires_grad else None
        return gx, gp

    return emit(y, (x, p), backward)


def channel_mix(x: Tensor, matrix: np.ndarray) -> Tensor:
    """Apply a fixed K x C matrix across the channel axis of an NCHW tensor."""
    m = np.asarray(matrix, dtype=x.dtype)
    _expect(x.data.ndim == 4 and m.ndim == 2 and m.shape[1] == x.shape[1], f"channel_mix: matrix {m.shape} vs input {x.shape}")
    y = np.einsum("kc,nchw->nkhw", m, x.data, optimize=True)
    return emit(y, (x,), lambda g: (np.einsum("kc,nkhw->nchw", m, g, optimize=True),))


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """x * scale + shift for x of shape N x C with C-vectors scale/shift."""
    _expect(x.data.ndim == 2 and scale.shape == (x.shape[1],) and shift.shape == (x.shape[1],), f"channel_affine shapes {x.shape}, {scale.shape}, {shift.shape}")

    def backward(g):
        return (
            g * scale.data if x.requires_grad else None,
            (g * x.data).sum(axis=0) if scale.requires_grad else None,
            g.sum(axis=0) if shift.requires_grad else None,
        )

    return emit(x.data * scale.data + shift.data, (x, scale, shift), backward)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns start:stop of an N x K tensor."""
    _expect(x.data.ndim == 2 and 0 <= start < stop <= x.shape[1], f"columns {start}:{stop} out of range for {x.shape}")

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return emit(x.data[:, start:stop].copy(), (x,), backward)


def pad_zero(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad an NCHW tensor at the bottom and right edges."""
    if not bottom and not right:
        return x
    n, c, h, w = x.shape
    y = np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right)))
    return emit(y, (x,), lambda g: (g[:, :, :h, :w],))


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Top-left h x w window of an NCHW tensor."""
    _expect(x.data.ndim == 4 and h <= x.shape[2] and w <= x.shape[3], f"crop {h}x{w} larger than {x.shape}")
    if (h, w) == x.shape[2:]:
        return x

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :h, :w] = g
        return (gx,)

    return emit(x.data[:, :, :h, :w].copy(), (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _expect(a.shape == b.shape, f"add shape mismatch: {a.shape} vs {b.shape}")
    return emit(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, s: float) -> Tensor:
    return emit(a.data * s, (a,), lambda g: (g * s,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    _expect(logits.data.ndim == 2, f"cross_entropy expects N x C logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    _expect(labels.shape == (n,), f"need {n} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise DomainError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1
        return (g * d / n,)

    return emit(np.array(loss, dtype=logits.dtype), (logits,), backward)


def smooth_l1(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _expect(pred.shape == target.shape, f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    small = np.abs(d) < 1
    loss = np.where(small, 0.5 * d * d, np.abs(d) - 0.5).mean()
    inv = 1.0 / d.size

    def backward(g):
        gd = g * np.where(small, d, np.sign(d)) * inv
        return gd, -gd

    return emit(np.array(loss, dtype=pred.dtype), (pred, target), backward)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _expect(pred.shape == target.shape, f"mse shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    inv = 1.0 / d.size

    def backward(g):
        gd = g * 2 * d * inv
        return gd, -gd

    return emit(np.array((d * d).mean(), dtype=pred.dtype), (pred, target), backward)


def row_entropy(p: np.ndarray) -> np.ndarray:
    """-sum p log p per row with 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(np.where(p > 0, p, 1)), 0.0)
    return -t.sum(axis=1)


def entropy_loss(probs: Tensor, atol: float = 1e-6) -> Tensor:
    p = probs.data
    _expect(p.ndim == 2, f"entropy_loss expects N x C, got {probs.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > atol):
        raise DomainError("entropy_loss rows must be non-negative and sum to 1")
    n = p.shape[0]
    tiny = np.finfo(p.dtype).tiny

    def backward(g):
        return (-g * (np.log(np.maximum(p, tiny)) + 1) / n,)

    return emit(np.array(row_entropy(p).mean(), dtype=p.dtype), (probs,), backward)


def neighbor_penalty(w: Tensor, b: Tensor) -> Tensor:
    """(1/D) sum_l sum_{l' in {l-1, l+1}} ||theta_l - theta_l'||^2 over output channels.

    theta_l is the concatenation of ``w[l]`` and ``b[l]``; D = w.shape[0].
    Every adjacent pair is counted once from each side.
    """
    d = w.shape[0]
    _expect(b.shape == (d,), f"neighbor_penalty: bias {b.shape} does not match weight {w.shape}")
    theta = np.concatenate([w.data.reshape(d, -1), b.data[:, None]], axis=1)
    diff = theta[1:] - theta[:-1]
    val = 2.0 * (diff * diff).sum() / d

    def backward(g):
        gt = np.zeros_like(theta)
        step = g * 4.0 / d * diff
        gt[1:] += step
        gt[:-1] -= step
        return gt[:, :-1].reshape(w.shape), gt[:, -1]

    return emit(np.array(val, dtype=w.dtype), (w, b), backward)
