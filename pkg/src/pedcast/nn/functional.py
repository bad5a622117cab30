"""Differentiable layer ops on NHWC float64 tensors."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _stable_sigmoid, as_tensor


def _tap_slice(i, stride, n):
    return slice(i, i + stride * (n - 1) + 1, stride)


def _im2col(xp, k, stride, ho, wo):
    """Patches of padded NHWC ``xp`` as rows ordered (ki, kj, channel)."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, _tap_slice(i, stride, ho), _tap_slice(j, stride, wo)]
    return cols.reshape(n * ho * wo, k * k * c)


def _correlate(xp, w2, k, stride, ho, wo):
    n = xp.shape[0]
    if k == 1:
        rows = xp[:, _tap_slice(0, stride, ho), _tap_slice(0, stride, wo)].reshape(n * ho * wo, -1)
    else:
        rows = _im2col(xp, k, stride, ho, wo)
    return rows, (rows @ w2).reshape(n, ho, wo, -1)


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D convolution. ``x``: (N, H, W, Cin); ``w``: (k, k, Cin, Cout).

    Picks the cheaper of two equivalent layouts: im2col on the input, or a
    single matmul of the padded input against all taps followed by shifted
    adds of the (narrower) per-tap outputs.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3] or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    k = w.shape[0]
    pad = (k - 1) // 2 if padding is None else padding
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    hp, wp = xp.shape[1:3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    shift_mode = k > 1 and hp * wp * cout < ho * wo * cin
    if shift_mode:
        wcat = w.data.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
        taps = (xp.reshape(-1, cin) @ wcat).reshape(n, hp, wp, k, k, cout)
        out = np.zeros((n, ho, wo, cout))
        for i in range(k):
            for j in range(k):
                out += taps[:, _tap_slice(i, stride, ho), _tap_slice(j, stride, wo), i, j]
        del taps
    else:
        rows, out = _correlate(xp, w.data.reshape(k * k * cin, cout), k, stride, ho, wo)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents = (x, w, b)

    def back(g):
        g2 = g.reshape(-1, cout)
        if shift_mode:
            gtaps = np.zeros((n, hp, wp, k, k, cout))
            for i in range(k):
                for j in range(k):
                    gtaps[:, _tap_slice(i, stride, ho), _tap_slice(j, stride, wo), i, j] = g
            gtaps = gtaps.reshape(-1, k * k * cout)
            gxp = (gtaps @ wcat.T).reshape(xp.shape)
            gw = (xp.reshape(-1, cin).T @ gtaps).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        else:
            gw = (rows.T @ g2).reshape(k, k, cin, cout)
            gxp = None
            if x.requires_grad:
                # col2im: per-tap input gradients, added back at their shifts
                gcols = (g2 @ w.data.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k, k, cin)
                if k == 1 and stride == 1:
                    gxp = gcols.reshape(xp.shape)
                else:
                    gxp = np.zeros(xp.shape)
                    for i in range(k):
                        for j in range(k):
                            gxp[:, _tap_slice(i, stride, ho), _tap_slice(j, stride, wo)] += gcols[:, :, :, i, j]
        if gxp is None:
            gx = None
        else:
            gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)
    return Tensor._make(out, parents, back)


def deconv2d(x, w, b=None, stride: int = 2) -> Tensor:
    """Transposed convolution; output spatial size ``(H - 1) * stride + k``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3]:
        raise ShapeError(f"deconv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    x2 = x.data.reshape(-1, cin)
    taps = (x2 @ w.data.transpose(2, 0, 1, 3).reshape(cin, -1)).reshape(n, h, wd, kh, kw, cout)
    if kh == stride and kw == stride:
        out = taps.transpose(0, 1, 3, 2, 4, 5).reshape(n, ho, wo, cout).copy()
    else:
        out = np.zeros((n, ho, wo, cout))
        for i in range(kh):
            for j in range(kw):
                out[:, _tap_slice(i, stride, h), _tap_slice(j, stride, wd)] += taps[:, :, :, i, j]
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents = (x, w, b)

    def back(g):
        if kh == stride and kw == stride:
            gt = g.reshape(n, h, kh, wd, kw, cout).transpose(0, 1, 3, 2, 4, 5)
        else:
            gt = np.empty((n, h, wd, kh, kw, cout))
            for i in range(kh):
                for j in range(kw):
                    gt[:, :, :, i, j] = g[:, _tap_slice(i, stride, h), _tap_slice(j, stride, wd)]
        gt2 = gt.reshape(n * h * wd, kh * kw * cout)
        wmat = w.data.transpose(2, 0, 1, 3).reshape(cin, -1)
        gx = (gt2 @ wmat.T).reshape(x.shape)
        gw = (x2.T @ gt2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)
    return Tensor._make(out, parents, back)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear bias shape {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents = (x, w, b)

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)
    return Tensor._make(out.reshape(lead + (w.shape[1],)), parents, back)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes of (N, H, W, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, H, W, C), got {x.shape}")
    n, h, wd, c = x.shape
    scale = 1.0 / (h * wd)

    def back(g):
        return (np.broadcast_to(g[:, None, None, :] * scale, x.shape),)
    return Tensor._make(x.data.mean(axis=(1, 2)), (x,), back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)
    return Tensor._make(p, (x,), back)


def smooth_l1(pred, target) -> Tensor:
    """Elementwise Huber loss with unit transition point."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    e = pred.data - target.data
    ae = np.abs(e)
    small = ae < 1.0
    out = np.where(small, 0.5 * e * e, ae - 0.5)
    de = np.where(small, e, np.sign(e))
    return Tensor._make(out, (pred, target), lambda g: (g * de, -g * de))


def binary_cross_entropy(logit, target) -> Tensor:
    """Per-element sigmoid cross-entropy in its overflow-free form."""
    logit = as_tensor(logit)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    z = logit.data
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = _stable_sigmoid(z)
    return Tensor._make(out, (logit,), lambda g: (g * (p - t),))


def segment_max(x, starts) -> Tensor:
    """Max over contiguous row segments of (N, C); segment i begins at ``starts[i]``.

    Segments must be non-empty. The gradient goes to the first row attaining
    each maximum.
    """
    x = as_tensor(x)
    starts = np.asarray(starts, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"segment_max expects (N, C), got {x.shape}")
    n, c = x.shape
    if len(starts) == 0:
        return Tensor._make(np.zeros((0, c)), (x,), lambda g: (np.zeros(x.shape),))
    if starts[0] != 0 or np.any(np.diff(starts) <= 0) or starts[-1] >= n:
        raise ShapeError("segment_max needs strictly increasing, non-empty segments starting at 0")
    out = np.maximum.reduceat(x.data, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, n)))
    hit = np.where(x.data == out[seg], np.arange(n)[:, None], n)
    arg = np.minimum.reduceat(hit, starts, axis=0)
    cols = np.broadcast_to(np.arange(c), arg.shape)

    def back(g):
        gx = np.zeros(x.shape)
        gx[arg, cols] = g
        return (gx,)
    return Tensor._make(out, (x,), back)


def scatter_grid(feat, coords, shape) -> Tensor:
    """Place rows of ``feat`` (P, C) at integer cells ``coords`` (P, 2) of an (H, W, C) grid."""
    feat = as_tensor(feat)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    h, w = shape
    if feat.ndim != 2 or len(coords) != feat.shape[0]:
        raise ShapeError(f"scatter_grid: features {feat.shape} vs coords {coords.shape}")
    out = np.zeros((h, w, feat.shape[1]))
    out[coords[:, 0], coords[:, 1]] = feat.data

    def back(g):
        return (g[coords[:, 0], coords[:, 1]],)
    return Tensor._make(out, (feat,), back)


def bilinear_sample(fmaps, frame, u, v) -> Tensor:
    """Bilinear samples from ``fmaps`` (T, H, W, C) at continuous cell indices.

    ``frame``, ``u`` (axis-1 index) and ``v`` (axis-2 index) share one shape
    ``S``; integer coordinates hit cell centres exactly. Coordinates are
    clamped to the map, so constants are reproduced everywhere. Output
    shape is ``S + (C,)``.
    """
    fmaps = as_tensor(fmaps)
    if fmaps.ndim != 4:
        raise ShapeError(f"bilinear_sample expects (T, H, W, C), got {fmaps.shape}")
    t, h, w, c = fmaps.shape
    frame = np.asarray(frame, dtype=np.int64)
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, h - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, w - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(h - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(w - 2, 0))
    u1 = np.minimum(u0 + 1, h - 1)
    v1 = np.minimum(v0 + 1, w - 1)
    fu, fv = u - u0, v - v0
    weights = [((1 - fu) * (1 - fv)), ((1 - fu) * fv), (fu * (1 - fv)), (fu * fv)]
    idx = [(u0, v0), (u0, v1), (u1, v0), (u1, v1)]
    d = fmaps.data
    out = sum(wt[..., None] * d[frame, a, b] for wt, (a, b) in zip(weights, idx))

    def back(g):
        gm = np.zeros(fmaps.shape)
        for wt, (a, b) in zip(weights, idx):
            np.add.at(gm, (frame.ravel(), a.ravel(), b.ravel()),
                      (wt[..., None] * g).reshape(-1, c))
        return (gm,)
    return Tensor._make(out, (fmaps,), back)
