"""Differentiable layer kernels with hand-derived backward passes.

Every kernel is a pair of pure functions:

    y, cache = <op>_forward(inputs, params)
    grads    = <op>_backward(dy, cache)

Arrays are plain numpy ndarrays, row-major, float32 in training and float64
when gradient checking. Spatial layout is (batch, channels, time, freq) for
2-D ops and (batch, time, features) for sequence ops.
"""

import numpy as np

from .errors import InvalidInput, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LEAKY_SLOPE = 0.01
SIGMOID_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# linear / activations


def linear_forward(x, w, b=None):
    """y = x @ w + b. x: (..., d_in), w: (d_in, d_out), b: (d_out,) or None."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight dim {w.shape[0]}")
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_bias = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    return dx, dw, db


def leaky_relu_forward(x, slope=LEAKY_SLOPE):
    scale = np.where(x >= 0, np.asarray(1.0, x.dtype), np.asarray(slope, x.dtype))
    return x * scale, scale


def leaky_relu_backward(dy, cache):
    return dy * cache


def sigmoid(x):
    """Numerically stable elementwise logistic function."""
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(dy, cache):
    s = cache
    return dy * s * (1.0 - s)


def softmax_forward(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    return p, (p, axis)


def softmax_backward(dy, cache):
    p, axis = cache
    return p * (dy - (dy * p).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# conv / norm / pooling


def conv2d_forward(x, w, b=None):
    """Same-padded stride-1 2-D convolution.

    x: (B, C_in, T, F), w: (C_out, C_in, kh, kw) with odd kh/kw, b: (C_out,)
    or None for a bias-free layer (the usual choice before batch norm).
    Implemented as one shifted tensordot per kernel tap.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/kernel, got {x.shape}/{w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: {x.shape[1]} input channels vs kernel {w.shape[1]}")
    cout, _, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel sides must be odd for same padding")
    bsz, _, t, f = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.zeros((bsz, cout, t, f), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + t, j : j + f]
            y += np.tensordot(patch, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    if b is not None:
        y += b[None, :, None, None]
    return y, (xp, w.shape, w, (t, f), b is not None)


def conv2d_backward(dy, cache):
    xp, wshape, w, (t, f), has_bias = cache
    _, _, kh, kw = wshape
    ph, pw = kh // 2, kw // 2
    dw = np.zeros(wshape, dtype=dy.dtype)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + t, j : j + f]
            dw[:, :, i, j] = np.tensordot(dy, patch, axes=([0, 2, 3], [0, 2, 3]))
            dxp[:, :, i : i + t, j : j + f] += np.tensordot(
                dy, w[:, :, i, j], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph : ph + t, pw : pw + f]
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


def batch_norm_forward(x, gamma, beta, run_mean, run_var, train):
    """Per-channel batch normalization over (B, T, F).

    Train mode normalizes with batch statistics; cache carries them so the
    caller can update running stats (momentum 0.9). Eval mode uses the
    running statistics.
    """
    if x.shape[0] == 0:
        raise InvalidInput("batch_norm: empty batch")
    axes = (0, 2, 3)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = run_mean, run_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, train, mean, var, x.shape)
    return y, cache


def bn_updated_running(cache, run_mean, run_var, momentum=BN_MOMENTUM):
    """Running stats after seeing the batch in the cache (train mode only)."""
    _, _, _, train, mean, var, _ = cache
    if not train:
        return run_mean, run_var
    new_mean = momentum * run_mean + (1.0 - momentum) * mean
    new_var = momentum * run_var + (1.0 - momentum) * var
    return new_mean.astype(run_mean.dtype), new_var.astype(run_var.dtype)


def batch_norm_backward(dy, cache):
    xhat, gamma, inv_std, train, _, _, xshape = cache
    axes = (0, 2, 3)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    g = gamma[None, :, None, None] * inv_std[None, :, None, None]
    if not train:
        return dy * g, dgamma, dbeta
    n = xshape[0] * xshape[2] * xshape[3]
    dxhat = dy * gamma[None, :, None, None]
    # Standard batch-norm gradient with batch statistics.
    dx = (
        inv_std[None, :, None, None]
        / n
        * (
            n * dxhat
            - dxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        )
    )
    return dx.astype(dy.dtype), dgamma, dbeta


def max_pool2d_forward(x, kt, kf):
    """Non-overlapping max pooling with kernel (kt, kf) and equal stride."""
    bsz, c, t, f = x.shape
    if t % kt or f % kf:
        raise ShapeError(f"max_pool2d: dims ({t},{f}) not divisible by ({kt},{kf})")
    to, fo = t // kt, f // kf
    win = x.reshape(bsz, c, to, kt, fo, kf).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(bsz, c, to, fo, kt * kf)
    # argmax returns the first maximal element, which fixes tie-breaking.
    am = win.argmax(axis=-1)
    y = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    return y, (am, x.shape, kt, kf)


def max_pool2d_backward(dy, cache):
    am, xshape, kt, kf = cache
    bsz, c, t, f = xshape
    to, fo = t // kt, f // kf
    dwin = np.zeros((bsz, c, to, fo, kt * kf), dtype=dy.dtype)
    np.put_along_axis(dwin, am[..., None], dy[..., None], axis=-1)
    dx = dwin.reshape(bsz, c, to, fo, kt, kf).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(bsz, c, t, f)


def global_max_pool_forward(x):
    """Per-channel max over all time-freq positions. (B, C, T, F) -> (B, C)."""
    bsz, c, t, f = x.shape
    flat = x.reshape(bsz, c, t * f)
    am = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    return y, (am, x.shape)


def global_max_pool_backward(dy, cache):
    am, xshape = cache
    bsz, c, t, f = xshape
    dflat = np.zeros((bsz, c, t * f), dtype=dy.dtype)
    np.put_along_axis(dflat, am[..., None], dy[..., None], axis=-1)
    return dflat.reshape(xshape)


# ---------------------------------------------------------------------------
# GRU

# Gate layout inside the packed weight matrices: update (z), reset (r),
# candidate (c), each of width H. Recurrence:
#   z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
#   r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
#   c_t = tanh(x_t Wc + (r_t * h_{t-1}) Uc + bc)
#   h_t = (1 - z_t) * h_{t-1} + z_t * c_t


def gru_forward(x, w_x, w_h, b):
    """Unidirectional GRU with zero initial state.

    x: (B, T, d_in), w_x: (d_in, 3H), w_h: (H, 3H), b: (3H,). Returns (B, T, H).
    """
    if x.ndim != 3:
        raise ShapeError(f"gru: expected (B, T, d_in) input, got {x.shape}")
    if x.shape[1] == 0:
        raise InvalidInput("gru: zero-length sequence")
    if x.shape[-1] != w_x.shape[0] or 3 * w_h.shape[0] != w_h.shape[1]:
        raise ShapeError("gru: parameter shapes inconsistent with input")
    bsz, t, _ = x.shape
    h_size = w_h.shape[0]
    xw = x @ w_x + b  # (B, T, 3H), input part of all gates
    h = np.zeros((bsz, h_size), dtype=x.dtype)
    hs = np.empty((bsz, t, h_size), dtype=x.dtype)
    steps = []
    for step in range(t):
        hw = h @ w_h
        z = sigmoid(xw[:, step, :h_size] + hw[:, :h_size])
        r = sigmoid(xw[:, step, h_size : 2 * h_size] + hw[:, h_size : 2 * h_size])
        rh = r * h
        c = np.tanh(xw[:, step, 2 * h_size :] + rh @ w_h[:, 2 * h_size :])
        steps.append((h, z, r, c))
        h = (1.0 - z) * h + z * c
        hs[:, step] = h
    return hs, (x, w_x, w_h, steps, h_size)


def gru_backward(dhs, cache):
    x, w_x, w_h, steps, hd = cache
    bsz, t, _ = x.shape
    dx = np.empty_like(x)
    dw_x = np.zeros_like(w_x)
    dw_h = np.zeros_like(w_h)
    db = np.zeros(w_h.shape[1], dtype=w_h.dtype)
    dh = np.zeros((bsz, hd), dtype=x.dtype)
    da = np.empty((bsz, 3 * hd), dtype=x.dtype)
    for step in reversed(range(t)):
        h_prev, z, r, c = steps[step]
        dh_t = dhs[:, step] + dh
        dz = dh_t * (c - h_prev)
        dc = dh_t * z
        dh = dh_t * (1.0 - z)
        dac = dc * (1.0 - c * c)
        drh = dac @ w_h[:, 2 * hd :].T
        dr = drh * h_prev
        dh += drh * r
        da[:, :hd] = dz * z * (1.0 - z)
        da[:, hd : 2 * hd] = dr * r * (1.0 - r)
        da[:, 2 * hd :] = dac
        dw_x += x[:, step].T @ da
        db += da.sum(axis=0)
        dw_h[:, : 2 * hd] += h_prev.T @ da[:, : 2 * hd]
        dw_h[:, 2 * hd :] += (r * h_prev).T @ dac
        dx[:, step] = da @ w_x.T
        dh += da[:, : 2 * hd] @ w_h[:, : 2 * hd].T
    return dx, dw_x, dw_h, db


def gru_bidirectional_forward(x, params_fwd, params_bwd):
    """Forward- and reverse-time GRU, outputs concatenated to (B, T, 2H).

    params_*: (w_x, w_h, b) triples for each direction.
    """
    hs_f, cache_f = gru_forward(x, *params_fwd)
    hs_b, cache_b = gru_forward(x[:, ::-1], *params_bwd)
    y = np.concatenate([hs_f, hs_b[:, ::-1]], axis=-1)
    return y, (cache_f, cache_b, hs_f.shape[-1])


def gru_bidirectional_backward(dy, cache):
    cache_f, cache_b, hd = cache
    dx_f, dwx_f, dwh_f, db_f = gru_backward(np.ascontiguousarray(dy[..., :hd]), cache_f)
    dhs_b = np.ascontiguousarray(dy[:, ::-1, hd:])
    dx_b, dwx_b, dwh_b, db_b = gru_backward(dhs_b, cache_b)
    dx = dx_f + dx_b[:, ::-1]
    return dx, (dwx_f, dwh_f, db_f), (dwx_b, dwh_b, db_b)
