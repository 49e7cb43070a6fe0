# metrics.py - Segment-based F1 and error rate
# Frame t covers [t*hop, (t+1)*hop); an event is active in a segment when
# any overlapping frame is active. Counts are micro-averaged over classes
# and segments; error rate decomposes into substitutions, deletions and
# insertions segment by segment.
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import pandas as pd

from pipeline.decision import EventRoll
from pipeline.errors import MetricInputMismatch


@dataclass
class SegmentScores:
    tp: int
    fp: int
    fn: int
    s: int
    d: int
    i: int
    n: int
    precision: float
    recall: float
    f1: float
    error_rate: float  # None when the reference has no active entries
    average: str = "micro"
    per_class: dict = field(default_factory=dict)


def _ms(value):
    return Fraction(str(value))


def segment_count(frames, hop_ms, segment_ms):
    return math.ceil(frames * _ms(hop_ms) / _ms(segment_ms))


def to_segments(roll, cfg):
    """M x S binary segment activity by any-overlap."""
    hop, seg = _ms(roll.hop_ms), _ms(cfg.segment_ms)
    M, T = roll.activity.shape
    S = segment_count(T, roll.hop_ms, cfg.segment_ms)
    out = np.zeros((M, S), dtype=np.int8)
    for s in range(S):
        t_lo = math.floor(s * seg / hop)
        t_hi = min(T, math.ceil((s + 1) * seg / hop))
        if t_hi > t_lo:
            out[:, s] = roll.activity[:, t_lo:t_hi].max(axis=1)
    return out


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def score(pred, ref, cfg):
    if tuple(pred.labels) != tuple(ref.labels):
        raise MetricInputMismatch(f"vocabularies differ: {pred.labels} vs {ref.labels}")
    if _ms(pred.hop_ms) != _ms(ref.hop_ms):
        raise MetricInputMismatch(f"hop sizes differ: {pred.hop_ms} vs {ref.hop_ms} ms")
    if pred.frames != ref.frames:
        raise MetricInputMismatch(f"durations differ: {pred.frames} vs {ref.frames} frames")

    P = to_segments(pred, cfg).astype(bool)
    R = to_segments(ref, cfg).astype(bool)

    tp_seg = (P & R).sum(axis=0)
    fp_seg = (P & ~R).sum(axis=0)
    fn_seg = (~P & R).sum(axis=0)
    subs = np.minimum(fn_seg, fp_seg)

    tp, fp, fn = int(tp_seg.sum()), int(fp_seg.sum()), int(fn_seg.sum())
    s = int(subs.sum())
    d, i = fn - s, fp - s
    n = int(R.sum())

    per_class = {}
    for m, label in enumerate(ref.labels):
        c_tp = int((P[m] & R[m]).sum())
        c_fp = int((P[m] & ~R[m]).sum())
        c_fn = int((~P[m] & R[m]).sum())
        c_n = int(R[m].sum())
        c_p, c_r, c_f1 = _prf(c_tp, c_fp, c_fn)
        per_class[label] = {
            "tp": c_tp, "fp": c_fp, "fn": c_fn, "n": c_n,
            "precision": c_p, "recall": c_r, "f1": c_f1,
            "er": (c_fn + c_fp) / c_n if c_n > 0 else None,
        }

    precision, recall, f1 = _prf(tp, fp, fn)
    error_rate = (s + d + i) / n if n > 0 else None
    if cfg.average == "macro":
        f1 = float(np.mean([c["f1"] for c in per_class.values()])) if per_class else 0.0
        class_er = [c["er"] for c in per_class.values() if c["er"] is not None]
        error_rate = float(np.mean(class_er)) if class_er else None

    return SegmentScores(tp=tp, fp=fp, fn=fn, s=s, d=d, i=i, n=n,
                         precision=precision, recall=recall, f1=f1,
                         error_rate=error_rate, average=cfg.average, per_class=per_class)


def score_many(pairs, cfg):
    """Pool segments of several (pred, ref) clips, then score once."""
    pairs = list(pairs)
    if not pairs:
        raise MetricInputMismatch("nothing to score")
    labels = tuple(pairs[0][1].labels)
    for p, r in pairs:
        if tuple(p.labels) != labels or tuple(r.labels) != labels:
            raise MetricInputMismatch("all clips must share one vocabulary")
        if p.frames != r.frames:
            raise MetricInputMismatch("prediction and reference durations differ")
    pred = np.concatenate([to_segments(p, cfg) for p, _ in pairs], axis=1)
    ref = np.concatenate([to_segments(r, cfg) for _, r in pairs], axis=1)
    # one frame per segment, so segmentation is the identity
    return score(EventRoll(pred, cfg.segment_ms, labels), EventRoll(ref, cfg.segment_ms, labels), cfg)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def scores_to_dict(scores):
    data = asdict(scores)
    return {
        "overall": {
            "f1": data["f1"], "er": data["error_rate"],
            "precision": data["precision"], "recall": data["recall"],
            "tp": data["tp"], "fp": data["fp"], "fn": data["fn"],
            "s": data["s"], "d": data["d"], "i": data["i"], "n": data["n"],
        },
        "average": data["average"],
        "per_class": data["per_class"],
    }


def write_report_json(path, scores, extra=None):
    report = scores_to_dict(scores)
    report.update(extra or {})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, ensure_ascii=False, indent=2)


def write_report_csv(path, scores):
    rows = [{"class": label, **values} for label, values in scores.per_class.items()]
    rows.append({
        "class": "overall", "tp": scores.tp, "fp": scores.fp, "fn": scores.fn, "n": scores.n,
        "precision": scores.precision, "recall": scores.recall, "f1": scores.f1,
        "er": scores.error_rate,
    })
    pd.DataFrame(rows).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Co-occurrence analysis
# ---------------------------------------------------------------------------

def aggregate_frequency_gap(Y, labels, pairs, mask=None):
    """Mean |sum_t y_i - sum_t y_j| over the given label pairs."""
    values = np.asarray(getattr(Y, "values", Y), dtype=np.float64)
    if mask is not None:
        values = values[:, np.asarray(mask, dtype=bool)]
    v = values.sum(axis=1)
    labels = list(labels)
    gaps = [abs(v[labels.index(a)] - v[labels.index(b)]) for a, b in pairs]
    return float(np.mean(gaps)) if gaps else 0.0
