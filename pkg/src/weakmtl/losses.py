"""Scene cross-entropy, event binary cross-entropy, and their weighted sums.

All losses use sum reduction over classes/frames and mean reduction over the
batch axis when one is present. Probabilities are clamped to
[PROB_EPS, 1 - PROB_EPS] before any log.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, ShapeError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights: alpha * scene + beta * (gamma * frame + zeta * bag)."""

    alpha: float = 0.001
    beta: float = 1.0
    gamma: float = 0.5
    zeta: float = 0.05

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "zeta"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"loss weight {name} must be >= 0")


def _clamp(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def _clamp_mask(p):
    return (p > PROB_EPS) & (p < 1.0 - PROB_EPS)


def _batchmean(per_item_sum, batched):
    return float(per_item_sum.mean()) if batched else float(per_item_sum)


def scene_ce(probs, target):
    """Cross entropy -sum_n z_n log y_n; probs (N,) or (B, N), target one-hot."""
    probs = np.asarray(probs)
    target = np.asarray(target)
    if probs.shape != target.shape:
        raise ShapeError(f"scene_ce: probs {probs.shape} vs target {target.shape}")
    term = -(target * np.log(_clamp(probs))).sum(axis=-1)
    return _batchmean(term, probs.ndim == 2)


def scene_ce_grad(probs, target):
    """d scene_ce / d probs, zero outside the clamp interval."""
    probs = np.asarray(probs)
    target = np.asarray(target)
    if probs.shape != target.shape:
        raise ShapeError(f"scene_ce: probs {probs.shape} vs target {target.shape}")
    g = -(target / _clamp(probs)) * _clamp_mask(probs)
    if probs.ndim == 2:
        g = g / probs.shape[0]
    return g


def _bce_sum(probs, target):
    p = _clamp(probs)
    return -(target * np.log(p) + (1.0 - target) * np.log1p(-p))


def _bce_grad(probs, target):
    p = _clamp(probs)
    return (-(target / p) + (1.0 - target) / (1.0 - p)) * _clamp_mask(probs)


def event_bce_strong(probs, roll):
    """BCE summed over frames and classes; probs/roll (T, M) or (B, T, M)."""
    probs = np.asarray(probs)
    roll = np.asarray(roll)
    if probs.shape != roll.shape:
        raise ShapeError(f"event_bce_strong: probs {probs.shape} vs roll {roll.shape}")
    term = _bce_sum(probs, roll).sum(axis=(-1, -2))
    return _batchmean(term, probs.ndim == 3)


def event_bce_strong_grad(probs, roll):
    probs = np.asarray(probs)
    roll = np.asarray(roll)
    if probs.shape != roll.shape:
        raise ShapeError(f"event_bce_strong: probs {probs.shape} vs roll {roll.shape}")
    g = _bce_grad(probs, roll)
    if probs.ndim == 3:
        g = g / probs.shape[0]
    return g


def event_weak_loss(frame_probs, bag_probs, z_weak, gamma, zeta):
    """Weak-label event loss: the clip tag supervises every frame and the bag.

    frame_probs: (T, M) or (B, T, M); bag_probs: (M,) or (B, M); z_weak same
    shape as bag_probs with entries in {0, 1}. Returns
    gamma * frame_term + zeta * bag_term.
    """
    frame_probs = np.asarray(frame_probs)
    bag_probs = np.asarray(bag_probs)
    z_weak = np.asarray(z_weak)
    batched = frame_probs.ndim == 3
    if bag_probs.shape != z_weak.shape:
        raise ShapeError(f"event_weak_loss: bag {bag_probs.shape} vs weak {z_weak.shape}")
    if frame_probs.shape[:-2] != bag_probs.shape[:-1] or frame_probs.shape[-1] != bag_probs.shape[-1]:
        raise ShapeError(
            f"event_weak_loss: frame {frame_probs.shape} vs bag {bag_probs.shape}"
        )
    z_frames = np.expand_dims(z_weak, -2)  # broadcast the tag over frames
    frame_term = _bce_sum(frame_probs, z_frames).sum(axis=(-1, -2))
    bag_term = _bce_sum(bag_probs, z_weak).sum(axis=-1)
    return gamma * _batchmean(frame_term, batched) + zeta * _batchmean(bag_term, batched)


def event_weak_loss_grads(frame_probs, bag_probs, z_weak, gamma, zeta):
    """(d/d frame_probs, d/d bag_probs) of event_weak_loss."""
    frame_probs = np.asarray(frame_probs)
    bag_probs = np.asarray(bag_probs)
    z_weak = np.asarray(z_weak)
    batched = frame_probs.ndim == 3
    z_frames = np.expand_dims(z_weak, -2)
    d_frame = gamma * _bce_grad(frame_probs, z_frames)
    d_bag = zeta * _bce_grad(bag_probs, z_weak)
    if batched:
        d_frame = d_frame / frame_probs.shape[0]
        d_bag = d_bag / bag_probs.shape[0]
    return d_frame, d_bag


def total_loss(l_scene, l_event, weights: LossWeights):
    """alpha * L_scene + beta * L_event."""
    return weights.alpha * l_scene + weights.beta * l_event
