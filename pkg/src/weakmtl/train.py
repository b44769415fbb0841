"""Training loop (rectified Adam), per-mode losses, and evaluation.

Modes:
    mtl-weak    scene CE + weak event loss (frame term + pooled bag term)
    mtl-strong  scene CE + frame BCE against the strong event roll
    asc-only    scene branch alone (CE)
    sed-only    event branch alone, trained with the weak event loss
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, losses, metrics, model
from .errors import InvalidConfig, InvalidInput, NumericsError
from .losses import LossWeights
from .milpool import PoolingKind

MODES = ("mtl-weak", "mtl-strong", "asc-only", "sed-only")


@dataclass
class TrainConfig:
    mode: str = "mtl-weak"
    pooling: object = PoolingKind.AT  # PoolingKind, or None to disable the bag head
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rectified: bool = True
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    grad_clip: float = 5.0  # global norm; 0 disables
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pooling is not None:
            self.pooling = PoolingKind.parse(self.pooling)
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("lr, epochs, and batch_size must be positive")

    @property
    def effective_pooling(self):
        # The strong-label mode has no MIL head at all.
        return None if self.mode == "mtl-strong" else self.pooling


class OptimizerState:
    """First/second moment per parameter array plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def optimizer_step(params, grads, state, cfg: TrainConfig):
    """One (R)Adam update in place; only arrays present in grads move."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2**t / bias2
    if rho_t > 4.0:
        rect = np.sqrt(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
    else:
        rect = None  # variance rectification undefined; momentum-style step

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r} at step {t}")
        p = params.arrays[name]
        g = np.asarray(g, dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bias1
        if not cfg.rectified:
            p -= (cfg.lr * m_hat / (np.sqrt(v / bias2) + cfg.eps)).astype(p.dtype)
        elif rect is None:
            p -= (cfg.lr * m_hat).astype(p.dtype)
        else:
            p -= (cfg.lr * rect * m_hat / (np.sqrt(v / bias2) + cfg.eps)).astype(p.dtype)


def mode_branches(mode):
    """(scene_branch, event_branch) run by a mode."""
    return mode != "sed-only", mode != "asc-only"


def compute_loss_and_grads(out, batch, mode, weights: LossWeights, want_grads=True):
    """Per-mode loss values and the gradients w.r.t. the model's outputs.

    Reads only the targets the mode consumes: asc-only never touches event
    labels, sed-only never touches the scene labels.
    """
    l_scene = 0.0
    l_event = 0.0
    d_scene = d_frame = d_bag = None

    if mode != "sed-only":
        l_scene = losses.scene_ce(out.scene_probs, batch.scene_onehot)
        if want_grads:
            d_scene = losses.scene_ce_grad(out.scene_probs, batch.scene_onehot)

    if mode == "mtl-strong":
        l_event = losses.event_bce_strong(out.frame_probs, batch.strong)
        if want_grads:
            d_frame = losses.event_bce_strong_grad(out.frame_probs, batch.strong)
    elif mode in ("mtl-weak", "sed-only"):
        if out.bag_probs is None:
            # Bag head disabled: the weak loss reduces to its frame term.
            z = np.broadcast_to(batch.weak[:, None, :], out.frame_probs.shape)
            l_event = weights.gamma * losses.event_bce_strong(out.frame_probs, z)
            if want_grads:
                d_frame = weights.gamma * losses.event_bce_strong_grad(out.frame_probs, z)
        else:
            l_event = losses.event_weak_loss(
                out.frame_probs, out.bag_probs, batch.weak, weights.gamma, weights.zeta
            )
            if want_grads:
                d_frame, d_bag = losses.event_weak_loss_grads(
                    out.frame_probs, out.bag_probs, batch.weak, weights.gamma, weights.zeta
                )

    if mode == "asc-only":
        total = l_scene
    elif mode == "sed-only":
        total = l_event
    else:
        total = losses.total_loss(l_scene, l_event, weights)
        if want_grads:
            if d_scene is not None:
                d_scene = weights.alpha * d_scene
            if d_frame is not None:
                d_frame = weights.beta * d_frame
            if d_bag is not None:
                d_bag = weights.beta * d_bag
    return total, l_scene, l_event, (d_scene, d_frame, d_bag)


def _dataset_loss(params, anns, feature_dir, vocab, cfg, hop_s):
    """Mean per-clip training objective in eval mode (for model selection)."""
    scene_b, event_b = mode_branches(cfg.mode)
    total = 0.0
    count = 0
    for batch in data.make_batches(
        anns,
        feature_dir,
        cfg.batch_size,
        vocab,
        with_strong=cfg.mode == "mtl-strong",
        hop_s=hop_s,
    ):
        out, _ = model.forward(
            params, batch.features, mode="eval", scene_branch=scene_b, event_branch=event_b
        )
        loss, _, _, _ = compute_loss_and_grads(out, batch, cfg.mode, cfg.loss_weights, False)
        total += loss * len(batch.clip_ids)
        count += len(batch.clip_ids)
    return total / max(1, count)


def train_loop(
    train_anns,
    eval_anns,
    feature_dir,
    arch,
    cfg: TrainConfig,
    vocab,
    out_dir,
    hop_s=None,
    max_steps=None,
    log_every=1,
):
    """Train per the config; writes log.csv, best.ckpt and final.ckpt.

    Returns (params, history) where history is the list of logged rows.
    eval_anns may be None, in which case the final model is also the best.
    """
    if cfg.mode == "mtl-strong" and hop_s is None:
        raise InvalidConfig("mtl-strong training requires hop_s for roll rasterization")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_b, event_b = mode_branches(cfg.mode)
    params = model.init_params(arch, cfg.effective_pooling, cfg.seed)
    state = OptimizerState()
    history = []
    best_loss = np.inf
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"
    step = 0
    done = False

    for epoch in range(cfg.epochs):
        for batch in data.make_batches(
            train_anns,
            feature_dir,
            cfg.batch_size,
            vocab,
            seed=cfg.seed,
            epoch=epoch,
            shuffle=True,
            with_strong=cfg.mode == "mtl-strong",
            hop_s=hop_s,
        ):
            out, cache = model.forward(
                params, batch.features, mode="train", scene_branch=scene_b, event_branch=event_b
            )
            loss, l_scene, l_event, (d_scene, d_frame, d_bag) = compute_loss_and_grads(
                out, batch, cfg.mode, cfg.loss_weights
            )
            if not np.isfinite(loss):
                raise NumericsError(
                    f"non-finite loss {loss} at epoch {epoch} step {step}; aborting"
                )
            grads = model.backward(
                params, cache, d_scene_probs=d_scene, d_frame_probs=d_frame, d_bag_probs=d_bag
            )
            grads, _ = clip_global_norm(grads, cfg.grad_clip)
            optimizer_step(params, grads, state, cfg)
            step += 1
            if step % log_every == 0 or step == 1:
                history.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "loss_total": loss,
                        "loss_scene": l_scene,
                        "loss_event": l_event,
                        "lr": cfg.lr,
                    }
                )
            if max_steps is not None and step >= max_steps:
                done = True
                break
        if eval_anns:
            eval_loss = _dataset_loss(params, eval_anns, feature_dir, vocab, cfg, hop_s)
            if eval_loss < best_loss:
                best_loss = eval_loss
                model.save_checkpoint(best_path, params)
        if done:
            break

    model.save_checkpoint(final_path, params)
    if not best_path.exists():
        model.save_checkpoint(best_path, params)

    with open(out_dir / "log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "step", "loss_total", "loss_scene", "loss_event", "lr"]
        )
        writer.writeheader()
        writer.writerows(history)
    return params, history


def evaluate(
    params,
    annotations,
    feature_dir,
    vocab,
    hop_s,
    batch_size=8,
    threshold=0.5,
    mode=None,
):
    """Eval-mode forward over all clips, scored against the annotations.

    Scene predictions are the softmax argmax; event predictions are the
    thresholded frame probabilities compared against rasterized strong rolls.
    mode limits the report to the branches that mode trains.
    """
    if not annotations:
        raise InvalidInput("evaluate: empty annotation list")
    scene_b, event_b = mode_branches(mode) if mode else (True, True)
    scene_pred, scene_true = [], []
    frame_pred, frame_true = [], []
    for batch in data.make_batches(
        annotations,
        feature_dir,
        batch_size,
        vocab,
        with_strong=event_b,
        hop_s=hop_s,
    ):
        out, _ = model.forward(
            params, batch.features, mode="eval", scene_branch=scene_b, event_branch=event_b
        )
        if scene_b:
            scene_pred.extend(np.argmax(out.scene_probs, axis=1).tolist())
            scene_true.extend(np.argmax(batch.scene_onehot, axis=1).tolist())
        if event_b:
            binary = metrics.binarize_frames(out.frame_probs, threshold)
            for j in range(binary.shape[0]):
                frame_pred.append(binary[j])
                frame_true.append(batch.strong[j].astype(np.uint8))
    return metrics.build_report(
        scene_pred if scene_b else None,
        scene_true if scene_b else None,
        np.concatenate(frame_pred, axis=0) if event_b else None,
        np.concatenate(frame_true, axis=0) if event_b else None,
        vocab.events,
    )
