import dataclasses

import numpy as np
import pandas as pd
import pytest

from pipeline.config import LossConfig, SegmentConfig, ThresholdConfig
from pipeline.errors import ConfigError, DivergenceError, EmptyCorpus
from pipeline.eventgraph import EventVocabulary, build_cooccurrence
from pipeline.features import FeatureMatrix
from pipeline.objective import TrainingTarget
from pipeline.train import HISTORY_COLUMNS, history_to_csv, predict_clip, train

LABELS = ("a", "b", "c")


def _clip(seed, T=12):
    rng = np.random.default_rng(seed)
    feat = FeatureMatrix(rng.standard_normal((8, T)), 20.0)
    Z = np.zeros((3, T), dtype=np.int8)
    Z[0, 2:7] = 1
    Z[1, 4:9] = 1
    return feat, TrainingTarget(Z=Z, mask=np.ones(T, dtype=bool))


def _graph():
    return build_cooccurrence([{"a", "b"}, {"a", "b"}, {"c"}], EventVocabulary(LABELS))


class TestTrain:

    def test_single_clip_overfits(self, tiny_model_cfg):
        params, history = train([_clip(0)], None, tiny_model_cfg,
                                LossConfig(use_glr=False, epochs=200, learning_rate=1e-2), verbose=False)
        assert len(history) == 200
        assert history[-1]["bce"] < history[0]["bce"]

    def test_alpha_zero_equals_glr_off(self, tiny_model_cfg):
        corpus = [_clip(0), _clip(1)]
        a, ha = train(corpus, _graph(), tiny_model_cfg, LossConfig(alpha=0.0, epochs=5), verbose=False)
        b, hb = train(corpus, None, tiny_model_cfg, LossConfig(use_glr=False, epochs=5), verbose=False)
        for name in a:
            assert a[name].tobytes() == b[name].tobytes()
        assert ha == hb

    def test_reproducible(self, tiny_model_cfg):
        corpus = [_clip(0), _clip(1), _clip(2)]
        cfg = LossConfig(alpha=0.1, epochs=4, seed=11)
        a, ha = train(corpus, _graph(), tiny_model_cfg, cfg, verbose=False)
        b, hb = train(corpus, _graph(), tiny_model_cfg, cfg, verbose=False)
        assert ha == hb
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_loss_decomposition(self, tiny_model_cfg):
        _, history = train([_clip(0), _clip(1)], _graph(), tiny_model_cfg,
                           LossConfig(alpha=0.1, epochs=3), verbose=False)
        for entry in history:
            assert abs(entry["total"] - (entry["bce"] + entry["glr"])) <= 1e-12
            assert entry["glr"] >= -1e-9

    def test_validation_keeps_best_epoch(self, tiny_model_cfg):
        corpus = [_clip(0), _clip(1)]
        best, history = train(corpus, None, tiny_model_cfg,
                              LossConfig(use_glr=False, epochs=8, learning_rate=1e-2, seed=3),
                              validation=[_clip(5)], threshold_cfg=ThresholdConfig(),
                              segment_cfg=SegmentConfig(), labels=LABELS, verbose=False)
        val_f1 = [h["val_f1"] for h in history]
        assert all(0.0 <= f <= 1.0 for f in val_f1)
        k = int(np.argmax(val_f1)) + 1  # earliest best epoch
        replay, _ = train(corpus, None, tiny_model_cfg,
                          LossConfig(use_glr=False, epochs=k, learning_rate=1e-2, seed=3), verbose=False)
        assert best.keys() == replay.keys()
        for name in best:
            np.testing.assert_array_equal(best[name], replay[name])

    def test_n_events_taken_from_targets(self, tiny_model_cfg):
        cfg = dataclasses.replace(tiny_model_cfg, n_events=0)
        params, _ = train([_clip(0)], None, cfg, LossConfig(use_glr=False, epochs=1), verbose=False)
        assert params["out_W"].shape[0] == 3

    def test_errors(self, tiny_model_cfg):
        with pytest.raises(EmptyCorpus):
            train([], None, tiny_model_cfg, LossConfig(), verbose=False)
        with pytest.raises(ConfigError):
            train([_clip(0)], None, tiny_model_cfg, LossConfig(alpha=0.1), verbose=False)

    def test_divergence_keeps_last_good(self, tiny_model_cfg):
        bad_feat = FeatureMatrix(np.full((8, 12), np.nan), 20.0)
        bad = (bad_feat, _clip(1)[1])
        with pytest.raises(DivergenceError) as info:
            train([_clip(0), bad], None, tiny_model_cfg, LossConfig(use_glr=False, epochs=2), verbose=False)
        assert info.value.last_good is not None
        assert all(np.all(np.isfinite(p)) for p in info.value.last_good.values())


class TestInference:

    def test_predict_clip_covers_every_frame(self, tiny_model_cfg):
        params, _ = train([_clip(0)], None, tiny_model_cfg, LossConfig(use_glr=False, epochs=1), verbose=False)
        feat = FeatureMatrix(np.random.default_rng(9).standard_normal((8, 30)), 20.0)
        Y = predict_clip(feat, params, tiny_model_cfg, seq_len=12, log_floor=1e-10)
        assert Y.values.shape == (3, 30)
        assert np.all((Y.values > 0) & (Y.values < 1))


def test_history_csv(tmp_path, tiny_model_cfg):
    _, history = train([_clip(0)], _graph(), tiny_model_cfg, LossConfig(alpha=0.1, epochs=2), verbose=False)
    path = tmp_path / "history.csv"
    history_to_csv(path, history)
    df = pd.read_csv(path)
    assert list(df.columns) == HISTORY_COLUMNS
    assert list(df["epoch"]) == [1, 2]
    assert df["bce"].iloc[0] == history[0]["bce"]
