# train.py - Adam / BPTT training loop for the CNN-BiGRU detector
# One clip per optimizer step; clip order reshuffled every epoch from the
# run seed, so identical seed + config + corpus gives identical results.
import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from pipeline.decision import EventRoll, threshold
from pipeline.errors import ConfigError, DimensionError, DivergenceError, EmptyCorpus, ShapeError
from pipeline.features import fit_sequence
from pipeline.metrics import score_many
from pipeline.network import Posteriorgram, init_params, model_backward, model_forward, n_params
from pipeline.objective import total_loss

HISTORY_COLUMNS = ["epoch", "bce", "glr", "total", "val_f1"]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def init_adam_state(params):
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
    )


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam update. Returns new (params, state); inputs untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}", last_good=params)

    t = state.t + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _check_corpus(corpus):
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    dims = {feat.dim for feat, _ in corpus}
    events = {target.Z.shape[0] for _, target in corpus}
    if len(dims) != 1 or len(events) != 1:
        raise ShapeError(f"clips disagree on feature dims {sorted(dims)} or event counts {sorted(events)}")
    for feat, target in corpus:
        if feat.frames != target.Z.shape[1]:
            raise ShapeError(f"features have {feat.frames} frames, target has {target.Z.shape[1]}")
    return dims.pop(), events.pop()


def predict_posteriors(feat, params, model_cfg, dtype=np.float64):
    Y, _ = model_forward(feat, params, model_cfg, dtype=dtype)
    return Y


def predict_clip(feat, params, model_cfg, seq_len, log_floor, dtype=np.float64):
    """Posteriorgram over a whole clip, run seq_len frames at a time."""
    parts = []
    for chunk, mask in fit_sequence(feat, seq_len, log_floor):
        Y = predict_posteriors(chunk, params, model_cfg, dtype=dtype)
        parts.append(Y.values[:, mask])
    return Posteriorgram(values=np.concatenate(parts, axis=1)[:, :feat.frames], hop_ms=feat.hop_ms)


def validation_f1(validation, params, model_cfg, threshold_cfg, segment_cfg, labels):
    pairs = []
    for feat, target in validation:
        Y = predict_posteriors(feat, params, model_cfg)
        valid = target.mask
        pred = threshold(Posteriorgram(Y.values[:, valid], feat.hop_ms), threshold_cfg, labels=labels)
        ref = EventRoll(target.Z[:, valid], feat.hop_ms, labels)
        pairs.append((pred, ref))
    return score_many(pairs, segment_cfg).f1


def train(corpus, graph, model_cfg, loss_cfg, validation=None, threshold_cfg=None,
          segment_cfg=None, labels=None, verbose=True):
    """Train on (FeatureMatrix, TrainingTarget) clips.

    Returns (params, history). With a validation split the returned params are
    the best-by-validation-F1 epoch (earliest on ties); otherwise the last.
    """
    corpus = list(corpus)
    n_features, n_events = _check_corpus(corpus)
    if model_cfg.n_events == 0:
        model_cfg = dataclasses.replace(model_cfg, n_events=n_events)
    if model_cfg.n_events != n_events:
        raise ShapeError(f"model has {model_cfg.n_events} outputs, targets have {n_events} events")

    L = None
    if loss_cfg.use_glr and loss_cfg.alpha > 0:
        if graph is None:
            raise ConfigError("GLR is enabled but no co-occurrence graph was given")
        L = np.asarray(graph.laplacian)
        if L.shape != (n_events, n_events):
            raise DimensionError(f"graph has {L.shape[0]} nodes, targets have {n_events} events")
    labels = tuple(labels) if labels else tuple(f"event_{m}" for m in range(n_events))
    if validation and (threshold_cfg is None or segment_cfg is None):
        raise ConfigError("validation needs threshold and segment configs")

    params = init_params(model_cfg, n_features, seed=loss_cfg.seed)
    state = init_adam_state(params)
    rng = np.random.default_rng(loss_cfg.seed)
    history = []
    best = (None, params)

    if verbose:
        print(f"  Training: {len(corpus)} clips, {n_params(params)} parameters, "
              f"{loss_cfg.epochs} epochs, recurrent={model_cfg.recurrent_mode}, "
              f"glr={'on' if L is not None else 'off'} (alpha={loss_cfg.alpha})")

    for epoch in range(1, loss_cfg.epochs + 1):
        bce_sum = 0.0
        glr_sum = 0.0
        for k in rng.permutation(len(corpus)):
            feat, target = corpus[k]
            Y, cache = model_forward(feat, params, model_cfg)
            loss, dY, terms = total_loss(Y, target, L, loss_cfg)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch}",
                                      last_good=params, history=history)
            grads = model_backward(cache, dY)
            try:
                params, state = adam_step(params, grads, state, loss_cfg)
            except DivergenceError as e:
                raise DivergenceError(f"{e} in epoch {epoch}", last_good=params, history=history)
            bce_sum += terms["bce"]
            glr_sum += terms["glr"]

        bce = bce_sum / len(corpus)
        glr = glr_sum / len(corpus)
        entry = {"epoch": epoch, "bce": bce, "glr": glr, "total": bce + glr, "val_f1": None}
        if validation:
            entry["val_f1"] = validation_f1(validation, params, model_cfg, threshold_cfg,
                                            segment_cfg, labels)
            if best[0] is None or entry["val_f1"] > best[0]:
                best = (entry["val_f1"], params)
        history.append(entry)

        if verbose and (epoch == 1 or epoch % loss_cfg.log_every == 0 or epoch == loss_cfg.epochs):
            val = f", val_f1={entry['val_f1']:.4f}" if entry["val_f1"] is not None else ""
            print(f"    epoch {epoch:4d}: bce={bce:.4f} glr={glr:.6f} total={entry['total']:.4f}{val}")

    if validation:
        if verbose:
            print(f"  Best validation F1: {best[0]:.4f}")
        return best[1], history
    return params, history


def history_to_csv(path, history):
    df = pd.DataFrame(history, columns=HISTORY_COLUMNS)
    df.to_csv(path, index=False, float_format="%.17g")
