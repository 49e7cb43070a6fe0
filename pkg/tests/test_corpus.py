import os

import numpy as np
import pytest

from corpus.annotations import (
    ClipAnnotation, annotation_from_roll, event_roll_from_annotation, load_annotations,
    parse_annotations, write_annotations,
)
from corpus.dataset import clip_examples, clip_frames, is_manifest, load_corpus
from corpus.synthesize import (
    SynthConfig, assign_splits, load_manifest, manifest_clips, place_events,
    synthesize_corpus, write_corpus,
)
from pipeline.config import FeatureConfig
from pipeline.decision import EventRoll
from pipeline.errors import EmptyCorpus, InvalidInterval, InvalidSynthConfig, ParseError, UnknownEvent
from pipeline.eventgraph import EventVocabulary, build_cooccurrence
from pipeline.features import FeatureMatrix


def _small_synth(**overrides):
    settings = dict(n_clips=6, clip_seconds=1.0, event_labels=("a", "b", "c"), event_rate=1.0,
                    min_event_s=0.1, max_event_s=0.4, sample_rate=8000, seed=7)
    settings.update(overrides)
    return SynthConfig(**settings)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestParse:

    def test_three_columns(self, tmp_path):
        path = _write(tmp_path / "street.txt", "0.5\t1.25\tcar\n2.0\t3.0\tdog\n")
        [ann] = parse_annotations(path)
        assert ann.clip_id == "street"
        assert ann.events == [(0.5, 1.25, "car"), (2.0, 3.0, "dog")]

    def test_five_columns_group_by_clip(self, tmp_path):
        path = _write(tmp_path / "all.tsv",
                      "audio/x.wav\thome\t0\t1\tdog\n"
                      "audio/y.wav\thome\t0.2\t0.4\tcat\n"
                      "audio/x.wav\thome\t2\t3\tcat\n")
        anns = parse_annotations(path)
        assert [a.clip_id for a in anns] == ["x", "y"]
        assert anns[0].scene == "home"
        assert anns[0].labels == {"dog", "cat"}

    def test_mixed_columns_report_line(self, tmp_path):
        path = _write(tmp_path / "bad.tsv", "0\t1\tdog\n\nx.wav\t0.5\t1\tcat\n")
        with pytest.raises(ParseError) as info:
            parse_annotations(path)
        assert info.value.line_no == 3

    def test_bad_time(self, tmp_path):
        with pytest.raises(ParseError):
            parse_annotations(_write(tmp_path / "bad.tsv", "zero\t1\tdog\n"))

    def test_reversed_interval(self, tmp_path):
        with pytest.raises(InvalidInterval) as info:
            parse_annotations(_write(tmp_path / "bad.tsv", "0\t1\tdog\n1.0\t1.0\tcat\n"))
        assert info.value.line_no == 2

    def test_empty_directory(self, tmp_path):
        with pytest.raises(EmptyCorpus):
            load_annotations(str(tmp_path))

    @pytest.mark.parametrize("audio_path,scene,n_cols", [
        (None, None, 3),
        ("clip.wav", None, 4),
        ("clip.wav", "park", 5),
    ])
    def test_write_then_parse(self, tmp_path, audio_path, scene, n_cols):
        events = [(0.1234567, 0.5, "dog"), (0.25, 1.75, "bird")]
        ann = ClipAnnotation(clip_id="clip", events=events, scene=scene, audio_path=audio_path)
        path = tmp_path / "clip.tsv"
        write_annotations(path, [ann])
        first = path.read_text().splitlines()[0]
        assert len(first.split("\t")) == n_cols
        [back] = parse_annotations(str(path))
        assert [ev[2] for ev in back.events] == ["dog", "bird"]
        np.testing.assert_allclose([ev[:2] for ev in back.events], [ev[:2] for ev in events], atol=1e-6)
        assert back.scene == scene


class TestEventRoll:

    def test_frame_centers_decide_activity(self):
        ann = ClipAnnotation(clip_id="c", events=[(0.0, 0.1, "a")])
        target = event_roll_from_annotation(ann, EventVocabulary(("a", "b")), 20.0, 10)
        np.testing.assert_array_equal(target.Z[0], [1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
        assert not target.Z[1].any()
        assert target.mask.all()

    def test_duration_masks_tail(self):
        ann = ClipAnnotation(clip_id="c", events=[(0.0, 0.05, "a")], duration_s=0.1)
        target = event_roll_from_annotation(ann, EventVocabulary(("a",)), 20.0, 8)
        np.testing.assert_array_equal(target.mask, [True] * 5 + [False] * 3)

    def test_overlapping_classes(self):
        ann = ClipAnnotation(clip_id="c", events=[(0.0, 0.1, "a"), (0.04, 0.2, "b")])
        target = event_roll_from_annotation(ann, EventVocabulary(("a", "b")), 20.0, 10)
        both = target.Z[0] & target.Z[1]
        np.testing.assert_array_equal(np.flatnonzero(both), [2, 3, 4])

    def test_unknown_label(self):
        ann = ClipAnnotation(clip_id="c", events=[(0.0, 0.1, "zebra")])
        with pytest.raises(UnknownEvent):
            event_roll_from_annotation(ann, EventVocabulary(("a",)), 20.0, 10)

    def test_roll_back_to_annotation_within_one_hop(self):
        vocab = EventVocabulary(("a", "b"))
        ann = ClipAnnotation(clip_id="c", events=[(0.123, 0.987, "a"), (0.5, 0.61, "b")])
        target = event_roll_from_annotation(ann, vocab, 20.0, 60)
        back = annotation_from_roll(EventRoll(target.Z, 20.0, vocab), "c")
        assert [ev[2] for ev in back.events] == ["a", "b"]
        for (on, off, _), (on2, off2, _) in zip(ann.events, back.events):
            assert abs(on - on2) <= 0.02 and abs(off - off2) <= 0.02
        assert back.events[0][:2] == (0.12, 0.98)

    def test_clip_frames(self):
        assert clip_frames(ClipAnnotation(clip_id="c", duration_s=1.0), 20.0) == 50
        assert clip_frames(ClipAnnotation(clip_id="c", events=[(0.0, 0.31, "a")]), 20.0) == 16

    def test_clip_examples_chunk_and_mask(self):
        cfg = FeatureConfig(seq_len=8)
        feat = FeatureMatrix(values=np.zeros((4, 12)), hop_ms=20.0)
        ann = ClipAnnotation(clip_id="c", events=[(0.1, 0.2, "a")], duration_s=0.2)
        examples = clip_examples(feat, ann, EventVocabulary(("a",)), cfg)
        assert len(examples) == 2
        first, second = examples
        np.testing.assert_array_equal(first[1].Z[0], [0, 0, 0, 0, 0, 1, 1, 1])
        np.testing.assert_array_equal(second[1].Z[0], [1, 1, 0, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(second[1].mask, [True, True] + [False] * 6)


class TestSynthesis:

    @pytest.mark.parametrize("overrides", [
        dict(event_labels=("a",)),
        dict(event_labels=("a", "a")),
        dict(max_event_s=2.0),
        dict(min_event_s=0.5, max_event_s=0.2),
        dict(pairs=(("a", "z", 1.0),)),
        dict(pairs=(("a", "a", 1.0),)),
        dict(pairs=(("a", "b", 1.5),)),
        dict(val_fraction=0.5, test_fraction=0.5),
        dict(template="chirp"),
        dict(n_clips=0),
    ])
    def test_infeasible_settings(self, overrides):
        with pytest.raises(InvalidSynthConfig):
            _small_synth(**overrides).validate()

    def test_forced_pair_always_co_occurs(self):
        cfg = _small_synth(pairs=(("a", "b", 1.0),))
        rng = np.random.default_rng(0)
        for _ in range(300):
            events = place_events(cfg, rng)
            a_events = [ev for ev in events if ev[2] == "a"]
            b_events = [ev for ev in events if ev[2] == "b"]
            for on, off, _ in a_events:
                assert any(on2 < off and off2 > on for on2, off2, _ in b_events)
            for on, off, _ in events:
                assert 0.0 <= on < off <= cfg.clip_seconds + 1e-9

    def test_forced_pairs_give_unit_edge(self):
        cfg = _small_synth(n_clips=30, pairs=(("a", "b", 1.0), ("b", "a", 1.0)))
        _, anns = synthesize_corpus(cfg)
        vocab = EventVocabulary(cfg.labels)
        graph = build_cooccurrence([a.labels for a in anns], vocab)
        assert graph.adjacency[0, 1] == 1.0

    def test_unpaired_classes_independent(self):
        cfg = _small_synth(event_labels=("a", "b"), event_rate=0.6)
        rng = np.random.default_rng(1)
        n = 4000
        present = np.zeros((n, 2), dtype=bool)
        for k in range(n):
            labels = {ev[2] for ev in place_events(cfg, rng)}
            present[k] = ["a" in labels, "b" in labels]
        p = 1.0 - np.exp(-0.6)
        joint = np.mean(present[:, 0] & present[:, 1])
        sigma = np.sqrt(p * p * (1 - p * p) / n)
        assert abs(joint - p * p) < 4 * sigma

    def test_partial_pair_matches_probability(self):
        # long clips with short events keep chance overlaps of independent b rare
        cfg = _small_synth(event_labels=("a", "b"), clip_seconds=100.0, min_event_s=0.1, max_event_s=0.2,
                           pairs=(("a", "b", 0.5),))
        rng = np.random.default_rng(3)
        hits, n = 0, 0
        for _ in range(2000):
            events = place_events(cfg, rng)
            b_events = [ev for ev in events if ev[2] == "b"]
            for on, off, label in events:
                if label == "a":
                    n += 1
                    hits += any(on2 < off and off2 > on for on2, off2, _ in b_events)
        sigma = np.sqrt(0.5 * 0.5 / n)
        assert n > 1500
        assert abs(hits / n - 0.5) < 3 * sigma

    def test_caller_config_untouched(self):
        cfg = _small_synth(event_labels=["a", "b", "c"], n_clips=2)
        synthesize_corpus(cfg)
        assert cfg.event_labels == ["a", "b", "c"]
        assert cfg.labels == ("a", "b", "c")

    def test_same_seed_identical(self):
        w1, a1 = synthesize_corpus(_small_synth())
        w2, a2 = synthesize_corpus(_small_synth(), workers=3)
        for x, y in zip(w1, w2):
            np.testing.assert_array_equal(x.samples, y.samples)
        assert [a.events for a in a1] == [a.events for a in a2]
        _, a3 = synthesize_corpus(_small_synth(seed=8))
        assert [a.events for a in a1] != [a.events for a in a3]

    def test_splits(self):
        splits = assign_splits(_small_synth(n_clips=10, test_fraction=0.2, val_fraction=0.1))
        assert splits.count("test") == 2 and splits.count("val") == 1 and splits.count("train") == 7
        assert splits == assign_splits(_small_synth(n_clips=10, test_fraction=0.2, val_fraction=0.1))


class TestCorpusOnDisk:

    def test_write_and_load(self, tmp_path):
        cfg = _small_synth(n_clips=5, test_fraction=0.4)
        manifest = write_corpus(str(tmp_path), cfg)
        assert is_manifest(str(tmp_path))
        assert len(manifest["clips"]) == 5
        loaded = load_manifest(str(tmp_path))
        for clip in manifest_clips(loaded):
            assert os.path.exists(clip["audio"]) and os.path.exists(clip["annotation"])

        train, labels = load_corpus(str(tmp_path), "train")
        test, _ = load_corpus(str(tmp_path), "test")
        assert labels == ("a", "b", "c")
        assert len(train) == 3 and len(test) == 2
        assert all(os.path.isabs(a.audio_path) and a.duration_s == 1.0 for a in train)

        _, anns = synthesize_corpus(cfg)
        by_id = {a.clip_id: a for a in anns}
        for ann in train + test:
            np.testing.assert_allclose([ev[:2] for ev in ann.events],
                                       [ev[:2] for ev in by_id[ann.clip_id].events], atol=1e-6)

    def test_annotation_directory_corpus(self, tmp_path):
        _write(tmp_path / "one.tsv", "one.wav\t0\t1\tdog\n")
        _write(tmp_path / "two.tsv", "two.wav\t0\t1\tcat\n")
        anns, labels = load_corpus(str(tmp_path))
        assert labels == ("cat", "dog")
        assert anns[0].audio_path == os.path.join(str(tmp_path), "one.wav")

    def test_empty_split(self, tmp_path):
        write_corpus(str(tmp_path), _small_synth(n_clips=3, test_fraction=0.0))
        with pytest.raises(EmptyCorpus):
            load_corpus(str(tmp_path), "test")
