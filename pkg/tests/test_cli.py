import json
import os

import numpy as np
import pandas as pd
import pytest
import soundfile as sf

from pipeline.runlog import load_run_log
from run_sed import main

FEATURES = ["--sample-rate", "8000", "--n-mels", "16", "--seq-len", "50"]
MODEL = ["--conv-layers", "1", "--conv-channels", "2", "--gru-units", "4", "--epochs", "2"]


@pytest.fixture(autouse=True)
def run_log(tmp_path, monkeypatch):
    path = tmp_path / "run_log.json"
    monkeypatch.setenv("CSED_RUN_LOG", str(path))
    monkeypatch.setenv("CSED_SEED", "0")
    return path


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(["synth", "--out", str(out), "--n-clips", "8", "--clip-seconds", "1",
                 "--event-labels", "a,b,c", "--pairs", "a:b:1.0", "--min-event-s", "0.1",
                 "--max-event-s", "0.4", "--test-fraction", "0.25",
                 "--run-log", str(out / "synth_log.json"), *FEATURES])
    assert code == 0
    return out


def _train(corpus, out, *extra):
    return main(["train", "--corpus", str(corpus), "--out", str(out), *FEATURES, *MODEL, *extra])


class TestPipeline:

    def test_end_to_end(self, corpus_dir, tmp_path, run_log):
        graph = tmp_path / "graph.json"
        assert main(["build-graph", "--annotations", str(corpus_dir), "--out", str(graph)]) == 0
        with open(graph) as f:
            assert json.load(f)["labels"] == ["a", "b", "c"]
        assert (tmp_path / "graph.csv").exists()

        model = tmp_path / "model.csm"
        assert _train(corpus_dir, model, "--graph", str(graph)) == 0
        history = pd.read_csv(tmp_path / "model_history.csv")
        assert list(history["epoch"]) == [1, 2]
        assert (history["glr"] >= 0).all()

        preds = tmp_path / "preds"
        assert main(["predict", "--checkpoint", str(model), "--input", str(corpus_dir),
                     "--out-dir", str(preds), *FEATURES]) == 0
        posteriors = sorted(p for p in os.listdir(preds) if p.endswith("_posteriorgram.csv"))
        assert len(posteriors) == 2
        Y = pd.read_csv(preds / posteriors[0])
        assert {"a", "b", "c"} <= set(Y.columns)
        assert len(Y) == 49

        metrics = tmp_path / "metrics.json"
        assert main(["evaluate", "--pred", str(preds), "--ref", str(corpus_dir),
                     "--gap-pairs", "a:b", "--out", str(metrics)]) == 0
        with open(metrics) as f:
            report = json.load(f)
        overall = report["overall"]
        assert 0.0 <= overall["f1"] <= 1.0
        assert overall["tp"] + overall["fn"] == overall["n"]
        assert report["gap_pairs"] == [["a", "b"]]
        assert 0.0 <= report["aggregate_gap"] <= 49

        entries = load_run_log(str(run_log))
        assert [e["command"] for e in entries] == ["build-graph", "train", "predict", "evaluate"]
        assert all(e["exit_code"] == 0 and e["status"] == "completed" for e in entries)

    def test_alpha_zero_matches_glr_off(self, corpus_dir, tmp_path):
        assert _train(corpus_dir, tmp_path / "off.csm", "--no-glr") == 0
        assert _train(corpus_dir, tmp_path / "zero.csm", "--alpha", "0") == 0
        assert _train(corpus_dir, tmp_path / "again.csm", "--no-glr") == 0
        off = (tmp_path / "off.csm").read_bytes()
        assert off == (tmp_path / "zero.csm").read_bytes()
        assert off == (tmp_path / "again.csm").read_bytes()
        assert (tmp_path / "off_history.csv").read_bytes() == (tmp_path / "zero_history.csv").read_bytes()

    def test_training_reduces_bce(self, corpus_dir, tmp_path):
        model = tmp_path / "model.csm"
        assert _train(corpus_dir, model, "--no-glr", "--epochs", "12", "--learning-rate", "0.01") == 0
        bce = pd.read_csv(tmp_path / "model_history.csv")["bce"].to_numpy()
        assert len(bce) == 12
        assert bce[-1] < bce[0]

    def test_overfit_clip_scores_near_perfectly(self, tmp_path):
        sr = 8000
        t = np.arange(sr) / sr
        rng = np.random.default_rng(0)
        samples = 0.01 * rng.standard_normal(sr)
        samples += np.where((t >= 0.2) & (t < 0.6), 0.5 * np.sin(2 * np.pi * 500 * t), 0.0)
        samples += np.where((t >= 0.48) & (t < 0.88), 0.5 * np.sin(2 * np.pi * 2000 * t), 0.0)
        sf.write(tmp_path / "clip.wav", samples, sr, subtype="FLOAT")
        ref = tmp_path / "clip_ref.tsv"
        ref.write_text("clip.wav\t0.20\t0.60\ta\nclip.wav\t0.48\t0.88\tb\n", encoding="utf-8")

        model = tmp_path / "model.csm"
        assert main(["train", "--corpus", str(ref), "--out", str(model), "--no-glr", *FEATURES,
                     "--conv-layers", "1", "--conv-channels", "4", "--gru-units", "8",
                     "--epochs", "300", "--learning-rate", "0.01"]) == 0
        preds = tmp_path / "preds"
        assert main(["predict", "--checkpoint", str(model), "--input", str(tmp_path / "clip.wav"),
                     "--out-dir", str(preds), *FEATURES]) == 0
        metrics = tmp_path / "metrics.json"
        assert main(["evaluate", "--pred", str(preds / "clip.tsv"), "--ref", str(ref),
                     "--duration", "1.0", "--out", str(metrics)]) == 0
        with open(metrics) as f:
            overall = json.load(f)["overall"]
        assert overall["f1"] >= 0.85

    def test_saved_features_feed_predict(self, corpus_dir, tmp_path):
        model = tmp_path / "model.csm"
        assert _train(corpus_dir, model, "--no-glr") == 0
        first = tmp_path / "first"
        assert main(["predict", "--checkpoint", str(model), "--input", str(corpus_dir),
                     "--out-dir", str(first), "--save-features", *FEATURES]) == 0
        saved = sorted(p for p in os.listdir(first) if p.endswith(".csf"))
        assert len(saved) == 2
        clip_id = saved[0][:-len(".csf")]
        table = pd.read_csv(first / f"{clip_id}_features.csv")
        assert list(table.columns[:2]) == ["frame", "time_s"] and table.shape == (49, 2 + 16)

        second = tmp_path / "second"
        assert main(["predict", "--checkpoint", str(model), "--input", str(first / saved[0]),
                     "--out-dir", str(second), *FEATURES]) == 0
        name = f"{clip_id}_posteriorgram.csv"
        assert (second / name).read_bytes() == (first / name).read_bytes()

    def test_synth_settings_from_config_file(self, tmp_path):
        conf = tmp_path / "synth.conf"
        conf.write_text("n_clips=5\nclip_seconds=1\nevent_labels=x,y\npairs=x:y:1.0\n"
                        "min_event_s=0.1\nmax_event_s=0.3\nsample_rate=8000\n", encoding="utf-8")
        out = tmp_path / "corpus"
        assert main(["synth", "--config", str(conf), "--clips", "3", "--out", str(out)]) == 0
        with open(out / "manifest.json") as f:
            manifest = json.load(f)
        assert manifest["labels"] == ["x", "y"]
        assert len(manifest["clips"]) == 3
        assert manifest["settings"]["pairs"] == [["x", "y", 1.0]]
        assert manifest["settings"]["sample_rate"] == 8000

    def test_identical_annotations_score_perfectly(self, tmp_path):
        ref = tmp_path / "ref.tsv"
        ref.write_text("0.10\t0.50\ta\n0.30\t0.90\tb\n", encoding="utf-8")
        out = tmp_path / "m.json"
        assert main(["evaluate", "--pred", str(ref), "--ref", str(ref), "--out", str(out)]) == 0
        with open(out) as f:
            overall = json.load(f)["overall"]
        assert overall["f1"] == 1.0
        assert overall["er"] == 0.0

    def test_gradcheck_passes(self):
        assert main(["gradcheck"]) == 0


class TestExitCodes:

    def test_usage_errors(self):
        with pytest.raises(SystemExit) as info:
            main(["train"])
        assert info.value.code == 1
        with pytest.raises(SystemExit) as info:
            main(["nonsense"])
        assert info.value.code == 1

    def test_bad_config_value(self, tmp_path):
        assert main(["build-graph", "--annotations", str(tmp_path), "--n-mels", "many"]) == 1

    def test_infeasible_synth(self, tmp_path):
        code = main(["synth", "--out", str(tmp_path / "c"), "--clip-seconds", "1", "--max-event-s", "2"])
        assert code == 2

    def test_empty_annotation_directory(self, tmp_path, run_log):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["build-graph", "--annotations", str(empty), "--out", str(tmp_path / "g.json")]) == 2
        [entry] = load_run_log(str(run_log))
        assert entry["status"] == "failed" and entry["exit_code"] == 2 and entry["error"]

    def test_glr_without_graph(self, corpus_dir, tmp_path):
        assert _train(corpus_dir, tmp_path / "m.csm") == 1

    def test_missing_graph_file(self, corpus_dir, tmp_path):
        assert _train(corpus_dir, tmp_path / "m.csm", "--graph", str(tmp_path / "nope.json")) == 2

    def test_graph_vocabulary_mismatch(self, corpus_dir, tmp_path):
        other = tmp_path / "other.tsv"
        other.write_text("x.wav\t0\t1\tx\ny.wav\t0\t1\ty\n", encoding="utf-8")
        graph = tmp_path / "xy.json"
        assert main(["build-graph", "--annotations", str(other), "--out", str(graph)]) == 0
        assert _train(corpus_dir, tmp_path / "m.csm", "--graph", str(graph)) == 2

    def test_corrupt_checkpoint(self, corpus_dir, tmp_path):
        bad = tmp_path / "bad.csm"
        bad.write_bytes(b"NOPE" + bytes(32))
        code = main(["predict", "--checkpoint", str(bad), "--input", str(corpus_dir),
                     "--out-dir", str(tmp_path / "p"), *FEATURES])
        assert code == 2

    def test_missing_checkpoint(self, corpus_dir, tmp_path, run_log):
        code = main(["predict", "--checkpoint", str(tmp_path / "missing.csm"), "--input", str(corpus_dir),
                     "--out-dir", str(tmp_path / "p"), *FEATURES])
        assert code == 2
        [entry] = load_run_log(str(run_log))
        assert entry["command"] == "predict" and entry["status"] == "failed" and entry["exit_code"] == 2

    def test_corrupt_graph_json(self, corpus_dir, tmp_path, run_log):
        graph = tmp_path / "graph.json"
        graph.write_text("{not json", encoding="utf-8")
        assert _train(corpus_dir, tmp_path / "m.csm", "--graph", str(graph)) == 2
        [entry] = load_run_log(str(run_log))
        assert entry["command"] == "train" and entry["status"] == "failed" and "not a graph" in entry["error"]

    def test_non_utf8_annotation_file(self, tmp_path, run_log):
        ann = tmp_path / "ann.tsv"
        ann.write_bytes(b"x.wav\t0\t1\t\xff\xfe\n")
        assert main(["build-graph", "--annotations", str(ann), "--out", str(tmp_path / "g.json")]) == 2
        [entry] = load_run_log(str(run_log))
        assert entry["exit_code"] == 2

    def test_missing_or_corrupt_manifest(self, tmp_path):
        assert _train(tmp_path / "nope.json", tmp_path / "m.csm", "--no-glr") == 2
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        (corpus / "manifest.json").write_text("[]", encoding="utf-8")
        assert _train(corpus, tmp_path / "m.csm", "--no-glr") == 2

    def test_unreadable_run_log_is_moved_aside(self, tmp_path, run_log):
        run_log.write_text("{broken", encoding="utf-8")
        assert main(["gradcheck"]) == 0
        [entry] = load_run_log(str(run_log))
        assert entry["command"] == "gradcheck"
        assert (tmp_path / "run_log.json.bad").read_text(encoding="utf-8") == "{broken"

    def test_gap_pair_with_unknown_label(self, tmp_path):
        ref = tmp_path / "ref.tsv"
        ref.write_text("0.10\t0.50\ta\n", encoding="utf-8")
        code = main(["evaluate", "--pred", str(ref), "--ref", str(ref), "--gap-pairs", "a:zebra",
                     "--out", str(tmp_path / "m.json")])
        assert code == 2

    def test_gradcheck_negative_control(self):
        assert main(["gradcheck", "--corrupt", "out_b"]) == 3

    def test_gradcheck_unknown_tensor(self):
        assert main(["gradcheck", "--corrupt", "no_such_tensor"]) == 1


class TestHelp:

    def test_help_lists_defaults(self, capsys, monkeypatch):
        monkeypatch.setenv("COLUMNS", "200")
        with pytest.raises(SystemExit) as info:
            main(["train", "--help"])
        assert info.value.code == 0
        out = capsys.readouterr().out
        assert "--n-mels" in out and "(default: 64)" in out
        assert "--no-glr" in out and "(default: 1e-05)" in out
