"""Multiple-instance-learning pooling: frame logits to bag (clip) logits.

Four operators over the time axis, applied independently per event class:

    MP  y = max_t x_t
    AP  y = mean_t x_t
    ES  y = sum_t x_t exp(x_t) / sum_t exp(x_t)
    AT  y = sum_t w_t x_t / sum_t w_t,  w_t = exp(clamp(a_t))

All are convex combinations of the frame logits, so min x <= y <= max x.
Forward functions return (value, cache); *_backward consumes the cache.
"""

from enum import Enum

import numpy as np

from .errors import InvalidInput

ATTENTION_CLAMP = 10.0


class PoolingKind(str, Enum):
    MP = "mp"
    AP = "ap"
    ES = "es"
    AT = "at"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise InvalidInput(
                f"unknown pooling kind {name!r}; expected one of mp, ap, es, at"
            ) from None


def _check_frames(x):
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise InvalidInput("pooling requires at least one frame")
    return x


# Columnwise cores. x has shape (T,) or (T, K); pooling is over axis 0.


def pool_max_forward(x):
    x = _check_frames(x)
    am = x.argmax(axis=0)
    y = np.take_along_axis(x, np.expand_dims(am, 0), axis=0)[0] if x.ndim > 1 else x[am]
    return y, (am, x.shape, x.dtype)


def pool_max_backward(dy, cache):
    am, shape, dtype = cache
    dx = np.zeros(shape, dtype=dtype)
    if len(shape) > 1:
        np.put_along_axis(dx, np.expand_dims(am, 0), np.expand_dims(dy, 0), axis=0)
    else:
        dx[am] = dy
    return dx


def pool_avg_forward(x):
    x = _check_frames(x)
    return x.mean(axis=0), (x.shape, x.dtype)


def pool_avg_backward(dy, cache):
    shape, dtype = cache
    t = shape[0]
    return np.broadcast_to(np.asarray(dy, dtype) / t, shape).copy()


def pool_expsoftmax_forward(x):
    """Softmax-weighted mean of the logits, computed with max subtraction."""
    x = _check_frames(x)
    e = np.exp(x - x.max(axis=0, keepdims=True))
    p = e / e.sum(axis=0, keepdims=True)
    y = (p * x).sum(axis=0)
    return y, (x, p, y)


def pool_expsoftmax_backward(dy, cache):
    x, p, y = cache
    # dy/dx_j = p_j * (1 + x_j - y)
    return dy * p * (1.0 + x - y)


def pool_attention_forward(x, a):
    """Attention-weighted mean; weights exp(a) with a clamped to +-10."""
    x = _check_frames(x)
    a = np.asarray(a)
    if a.shape != x.shape:
        raise InvalidInput(f"attention logits shape {a.shape} != frame logits {x.shape}")
    inside = (a > -ATTENTION_CLAMP) & (a < ATTENTION_CLAMP)
    ac = np.clip(a, -ATTENTION_CLAMP, ATTENTION_CLAMP)
    # Normalize by the max weight for overflow safety; the quotient is invariant.
    w = np.exp(ac - ac.max(axis=0, keepdims=True))
    p = w / w.sum(axis=0, keepdims=True)
    y = (p * x).sum(axis=0)
    return y, (x, p, y, inside)


def pool_attention_backward(dy, cache):
    x, p, y, inside = cache
    dx = dy * p
    da = dy * p * (x - y) * inside
    return dx, da


def pool_max(x):
    """Max pooling of a logit vector."""
    return float(pool_max_forward(np.asarray(x, dtype=np.float64))[0])


def pool_avg(x):
    """Average pooling of a logit vector."""
    return float(pool_avg_forward(np.asarray(x, dtype=np.float64))[0])


def pool_expsoftmax(x):
    """Exponential softmax pooling of a logit vector."""
    return float(pool_expsoftmax_forward(np.asarray(x, dtype=np.float64))[0])


def pool_attention(x, a):
    """Attention pooling of a logit vector with attention logits a."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return float(pool_attention_forward(x, a)[0])


def pool_forward(kind, frame_logits, attention_logits=None):
    """Pool a (T, M) matrix of frame logits into M bag logits.

    attention_logits is required for AT and must be co-indexed with
    frame_logits; it is rejected otherwise.
    """
    kind = PoolingKind.parse(kind)
    if kind is PoolingKind.AT:
        if attention_logits is None:
            raise InvalidInput("attention pooling needs attention logits")
        y, cache = pool_attention_forward(frame_logits, attention_logits)
    else:
        if attention_logits is not None:
            raise InvalidInput(f"{kind.value} pooling takes no attention logits")
        fwd = {
            PoolingKind.MP: pool_max_forward,
            PoolingKind.AP: pool_avg_forward,
            PoolingKind.ES: pool_expsoftmax_forward,
        }[kind]
        y, cache = fwd(frame_logits)
    return y, (kind, cache)


def pool_backward(dy, cache):
    """Gradients (d_frame_logits, d_attention_logits or None)."""
    kind, inner = cache
    if kind is PoolingKind.AT:
        return pool_attention_backward(dy, inner)
    bwd = {
        PoolingKind.MP: pool_max_backward,
        PoolingKind.AP: pool_avg_backward,
        PoolingKind.ES: pool_expsoftmax_backward,
    }[kind]
    return bwd(dy, inner), None


def pool(kind, frame_logits, attention_logits=None):
    """Forward-only convenience wrapper returning the bag logit vector."""
    return pool_forward(kind, frame_logits, attention_logits)[0]
