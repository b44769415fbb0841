"""Clip-level scene scores and frame-based event scores.

Counts are accumulated as integers and turned into F-scores with a single
division at the end, so results are exactly reproducible.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInput, ShapeError, VocabularyError


@dataclass
class MetricsReport:
    scene_micro_f: float | None = None
    scene_macro_f: float | None = None
    event_micro_f: float | None = None
    event_macro_f: float | None = None
    per_event_f: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2.0 * tp / denom


def scene_scores(pred_classes, true_classes):
    """Micro and macro F over single-label multiclass predictions.

    Micro-F pools per-class TP/FP/FN, which for single-label data equals
    accuracy; macro-F is the unweighted mean of per-class F1.
    """
    pred = np.asarray(pred_classes, dtype=np.int64)
    true = np.asarray(true_classes, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ShapeError(f"scene_scores: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise InvalidInput("scene_scores: empty input")
    classes = np.unique(np.concatenate([pred, true]))
    tp = fp = fn = 0
    per_class = []
    for c in classes:
        ctp = int(np.sum((pred == c) & (true == c)))
        cfp = int(np.sum((pred == c) & (true != c)))
        cfn = int(np.sum((pred != c) & (true == c)))
        tp, fp, fn = tp + ctp, fp + cfp, fn + cfn
        per_class.append(_f1(ctp, cfp, cfn))
    return _f1(tp, fp, fn), float(np.mean(per_class))


def binarize_frames(frame_probs, threshold=0.5):
    """Probabilities >= threshold become 1, else 0."""
    return (np.asarray(frame_probs) >= threshold).astype(np.uint8)


def event_frame_scores(pred_binary, true_roll):
    """Frame-based event F-scores.

    pred_binary/true_roll: (T, M) binary. Micro pools counts over all frames
    and classes; macro averages per-class F1 with F1 := 0 for classes that
    never occur and are never predicted.
    """
    pred = np.asarray(pred_binary).astype(bool)
    true = np.asarray(true_roll).astype(bool)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ShapeError(f"event_frame_scores: {pred.shape} vs {true.shape}")
    tp = (pred & true).sum(axis=0).astype(np.int64)
    fp = (pred & ~true).sum(axis=0).astype(np.int64)
    fn = (~pred & true).sum(axis=0).astype(np.int64)
    per_class = np.array([_f1(tp[m], fp[m], fn[m]) for m in range(pred.shape[1])])
    micro = _f1(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    return micro, float(per_class.mean()), per_class


def rasterize_roll(events, n_frames, hop_s, event_names):
    """Convert (event, onset_s, offset_s) triples to a (T, M) binary roll.

    Frame t is active for an event iff [t*hop, (t+1)*hop) overlaps
    [onset, offset).
    """
    index = {name: m for m, name in enumerate(event_names)}
    roll = np.zeros((n_frames, len(event_names)), dtype=np.uint8)
    t_lo = np.arange(n_frames) * hop_s
    t_hi = t_lo + hop_s
    for name, onset, offset in events:
        if name not in index:
            raise VocabularyError(f"unknown event name {name!r}")
        if not (0 <= onset < offset):
            raise InvalidInput(f"bad event interval [{onset}, {offset}) for {name!r}")
        active = (t_lo < offset) & (t_hi > onset)
        roll[active, index[name]] = 1
    return roll


def build_report(scene_pred, scene_true, event_pred, event_roll, event_names):
    """Assemble a MetricsReport; either side may be None for single-task runs."""
    report = MetricsReport()
    if scene_pred is not None:
        report.scene_micro_f, report.scene_macro_f = scene_scores(scene_pred, scene_true)
    if event_pred is not None:
        micro, macro, per_class = event_frame_scores(event_pred, event_roll)
        report.event_micro_f = micro
        report.event_macro_f = macro
        report.per_event_f = {name: float(per_class[m]) for m, name in enumerate(event_names)}
    return report
