# decision.py - Posteriorgram -> binary event roll
# Fixed threshold, or the per-event max-relative adaptive rule
# theta_m = max(adaptive_low, ratio * max_t y_mt), with optional median
# smoothing and minimum run length.
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.ndimage import median_filter

from pipeline.errors import ShapeError


@dataclass
class EventRoll:
    activity: np.ndarray  # M x T in {0, 1}
    hop_ms: float
    labels: tuple

    def __post_init__(self):
        self.activity = np.asarray(self.activity, dtype=np.int8)
        self.labels = tuple(getattr(self.labels, "labels", self.labels))
        if self.activity.ndim != 2 or self.activity.shape[0] != len(self.labels):
            raise ShapeError(f"roll {self.activity.shape} does not match {len(self.labels)} labels")

    @property
    def frames(self):
        return self.activity.shape[1]


def event_thresholds(Y, cfg):
    """Per-event threshold vector used by threshold()."""
    if cfg.mode == "fixed":
        return np.full(Y.shape[0], cfg.fixed_theta)
    peak = Y.max(axis=1) if Y.shape[1] else np.zeros(Y.shape[0])
    return np.maximum(cfg.adaptive_low, cfg.adaptive_ratio * peak)


def _drop_short_runs(row, min_frames):
    edges = np.diff(np.concatenate([[0], row, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    for s, e in zip(starts, ends):
        if e - s < min_frames:
            row[s:e] = 0
    return row


def threshold(Y, cfg, labels=None):
    values = np.asarray(getattr(Y, "values", Y), dtype=np.float64)
    hop_ms = getattr(Y, "hop_ms", 20.0)
    if labels is None:
        labels = tuple(f"event_{m}" for m in range(values.shape[0]))

    theta = event_thresholds(values, cfg)
    activity = (values >= theta[:, None]).astype(np.int8)

    if cfg.smoothing_window > 1:
        activity = median_filter(activity, size=(1, cfg.smoothing_window), mode="nearest")
    if cfg.min_event_frames > 1:
        for m in range(activity.shape[0]):
            activity[m] = _drop_short_runs(activity[m], cfg.min_event_frames)
    return EventRoll(activity=activity, hop_ms=hop_ms, labels=labels)


def roll_to_events(roll):
    """Binary roll -> sorted (onset_s, offset_s, label) intervals."""
    events = []
    hop_s = roll.hop_ms / 1000.0
    for m, label in enumerate(roll.labels):
        edges = np.diff(np.concatenate([[0], roll.activity[m].astype(np.int64), [0]]))
        for s, e in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            events.append((round(s * hop_s, 6), round(e * hop_s, 6), label))
    events.sort(key=lambda ev: (ev[0], ev[1], ev[2]))
    return events


def roll_to_csv(path, roll):
    df = pd.DataFrame(roll.activity.T, columns=list(roll.labels))
    df.insert(0, "time_s", np.arange(roll.frames) * roll.hop_ms / 1000.0)
    df.to_csv(path, index=False)


def posteriorgram_to_csv(path, Y, labels):
    values = np.asarray(getattr(Y, "values", Y))
    hop_ms = getattr(Y, "hop_ms", 20.0)
    df = pd.DataFrame(values.T, columns=list(labels))
    df.insert(0, "time_s", np.arange(values.shape[1]) * hop_ms / 1000.0)
    df.to_csv(path, index=False, float_format="%.9g")
