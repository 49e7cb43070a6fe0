# gradcheck.py - Central finite-difference check of every parameter gradient
# on a tiny CNN-BiGRU, with the Laplacian penalty on and off.
from dataclasses import dataclass

import numpy as np
import pandas as pd

from pipeline.config import LossConfig, ModelConfig
from pipeline.errors import GradientCheckFailure
from pipeline.features import FeatureMatrix
from pipeline.network import init_params, model_backward, model_forward
from pipeline.objective import TrainingTarget, total_loss

SETTINGS = (
    ("glr_off", False, 0.0),
    ("glr_1e-5", True, 1e-5),
    ("glr_0.1", True, 0.1),
)


@dataclass
class TinyProblem:
    feat: FeatureMatrix
    target: TrainingTarget
    laplacian: np.ndarray
    model_cfg: ModelConfig
    loss_cfg: LossConfig
    params: dict


def tiny_problem(seed=0, use_glr=True, alpha=1e-5, recurrent_mode="bidirectional",
                 D=8, T=12, M=3, channels=2, units=4):
    rng = np.random.default_rng(seed)
    model_cfg = ModelConfig(conv_layers=1, conv_channels=(channels,), gru_units=units,
                            recurrent_mode=recurrent_mode, n_events=M)
    loss_cfg = LossConfig(alpha=alpha, use_glr=use_glr, seed=seed)
    params = init_params(model_cfg, D, seed=seed)
    # nonzero biases so every term of the backward pass is exercised
    params = {k: p + 0.1 * rng.standard_normal(p.shape) if k.endswith(("_b", "bg", "br", "bh")) else p
              for k, p in params.items()}
    feat = FeatureMatrix(values=rng.standard_normal((D, T)), hop_ms=20.0)
    mask = np.ones(T, dtype=bool)
    mask[-2:] = False
    target = TrainingTarget(Z=(rng.random((M, T)) < 0.4).astype(np.int8), mask=mask)
    B = rng.random((M, M))
    A = np.triu(B, 1) + np.triu(B, 1).T
    laplacian = np.diag(A.sum(axis=1)) - A
    return TinyProblem(feat, target, laplacian, model_cfg, loss_cfg, params)


def _loss(problem, params):
    Y, _ = model_forward(problem.feat, params, problem.model_cfg)
    return total_loss(Y, problem.target, problem.laplacian, problem.loss_cfg)[0]


def analytic_gradients(problem):
    Y, cache = model_forward(problem.feat, problem.params, problem.model_cfg)
    _, dY, _ = total_loss(Y, problem.target, problem.laplacian, problem.loss_cfg)
    return model_backward(cache, dY)


def numeric_gradient(problem, name, eps=1e-5):
    base = problem.params[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = dict(problem.params)
        minus = dict(problem.params)
        plus[name] = base.copy()
        minus[name] = base.copy()
        plus[name][idx] += eps
        minus[name][idx] -= eps
        grad[idx] = (_loss(problem, plus) - _loss(problem, minus)) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def check_problem(problem, eps=1e-5, tol=1e-4, corrupt=None, setting=""):
    analytic = analytic_gradients(problem)
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] * 1.5
    rows = []
    for name in problem.params:
        numeric = numeric_gradient(problem, name, eps=eps)
        err = relative_error(analytic[name], numeric)
        rows.append({"setting": setting, "tensor": name, "size": int(numeric.size),
                     "max_rel_err": err, "passed": err < tol})
    return rows


def run_gradcheck(seed=0, eps=1e-5, tol=1e-4, corrupt=None, recurrent_mode="bidirectional"):
    """Check every tensor under each GLR setting. Returns a list of report rows."""
    rows = []
    for setting, use_glr, alpha in SETTINGS:
        problem = tiny_problem(seed=seed, use_glr=use_glr, alpha=alpha, recurrent_mode=recurrent_mode)
        if corrupt is not None and corrupt not in problem.params:
            raise KeyError(f"no tensor named {corrupt!r}")
        rows.extend(check_problem(problem, eps=eps, tol=tol, corrupt=corrupt, setting=setting))
    return rows


def format_report(rows):
    df = pd.DataFrame(rows)
    df["result"] = np.where(df["passed"], "PASS", "FAIL")
    return df.drop(columns=["passed"]).to_string(index=False, float_format=lambda x: f"{x:.3e}")


def require_pass(rows):
    failed = [r["tensor"] + "@" + r["setting"] for r in rows if not r["passed"]]
    if failed:
        raise GradientCheckFailure(f"{len(failed)} tensor checks failed: {', '.join(failed)}")
    return rows
