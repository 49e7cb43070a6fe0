# objective.py - Training objective: sigmoid cross-entropy plus the
# co-occurrence Laplacian penalty on per-clip aggregate event activity.
from dataclasses import dataclass

import numpy as np

from pipeline.errors import DimensionError, ShapeError


@dataclass
class TrainingTarget:
    Z: np.ndarray  # M x T binary event roll
    mask: np.ndarray  # T, True on real (unpadded) frames

    def __post_init__(self):
        self.Z = np.asarray(self.Z)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.Z.ndim != 2 or self.mask.shape != (self.Z.shape[1],):
            raise ShapeError(f"target roll {self.Z.shape} and mask {self.mask.shape} disagree")
        if not np.all((self.Z == 0) | (self.Z == 1)):
            raise ShapeError("target roll must be binary")


def _values(Y):
    return np.asarray(getattr(Y, "values", Y), dtype=np.float64)


def bce_loss(Y, target, clip_eps=1e-12):
    """Masked sigmoid cross-entropy summed over events and valid frames.

    y is clamped to [clip_eps, 1 - clip_eps] inside the loss only.
    """
    Y = _values(Y)
    if Y.shape != target.Z.shape:
        raise ShapeError(f"posteriorgram {Y.shape} does not match target {target.Z.shape}")
    z = target.Z.astype(np.float64)
    y = np.clip(Y, clip_eps, 1.0 - clip_eps)
    per_entry = -(z * np.log(y) + (1.0 - z) * np.log(1.0 - y))
    valid = target.mask[None, :]
    loss = float(np.sum(per_entry, where=np.broadcast_to(valid, Y.shape)))
    grad = np.where(valid, -(z / y - (1.0 - z) / (1.0 - y)), 0.0)
    return loss, grad


def glr_term(Y, L, alpha, mask=None):
    """alpha * v^T L v with v = sum of y_t over valid frames.

    The gradient alpha * 2Lv is broadcast to every valid frame.
    """
    Y = _values(Y)
    L = np.asarray(L, dtype=np.float64)
    M, T = Y.shape
    if L.shape != (M, M):
        raise DimensionError(f"Laplacian {L.shape} does not match {M} event classes")
    mask = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    v = Y[:, mask].sum(axis=1)
    term = alpha * float(v @ L @ v)
    grad = np.zeros_like(Y)
    grad[:, mask] = (alpha * 2.0 * (L @ v))[:, None]
    return term, grad


def total_loss(Y, target, L, cfg):
    """Returns (total, dLoss/dY, {"bce": ..., "glr": ...}).

    The penalty is skipped entirely when use_glr is off or alpha is 0, so
    both settings give bit-identical values.
    """
    bce, grad = bce_loss(Y, target, clip_eps=cfg.clip_eps)
    glr = 0.0
    if cfg.use_glr and cfg.alpha > 0:
        if L is None:
            raise DimensionError("GLR is enabled but no Laplacian was supplied")
        glr, glr_grad = glr_term(Y, L, cfg.alpha, mask=target.mask)
        grad = grad + glr_grad
    return bce + glr, grad, {"bce": bce, "glr": glr}
