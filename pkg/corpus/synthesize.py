# synthesize.py - Seeded synthetic corpus with controllable co-occurrence
# Each class has its own narrowband template (a tone or band-passed noise).
# A configured pair (a, b, p) co-places an overlapping b event with
# probability p every time a is placed; co-placements cascade along pairs.
import json
import os
from dataclasses import asdict, dataclass

import librosa
import numpy as np
from scipy import signal

from corpus.annotations import ClipAnnotation, write_annotations
from pipeline.config import CorpusConfig
from pipeline.errors import FormatError, InvalidSynthConfig, MissingInput
from pipeline.features import Waveform, write_wav
from pipeline.loader import prefetch_map

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")
MANIFEST_CLIP_KEYS = ("clip_id", "audio", "annotation", "split")
FADE_S = 0.01


@dataclass
class SynthConfig(CorpusConfig):
    sample_rate: int = 16000
    seed: int = 0

    @classmethod
    def from_run_config(cls, cfg):
        return cls(**asdict(cfg.corpus), sample_rate=cfg.features.sample_rate, seed=cfg.seed)

    @property
    def labels(self):
        return tuple(self.event_labels)

    def validate(self):
        labels = self.labels
        if len(labels) < 2 or len(set(labels)) != len(labels):
            raise InvalidSynthConfig("need at least two distinct event labels")
        if self.n_clips < 1:
            raise InvalidSynthConfig("n_clips must be >= 1")
        if self.sample_rate <= 0 or self.clip_seconds <= 0:
            raise InvalidSynthConfig("sample_rate and clip_seconds must be positive")
        if not 0 < self.min_event_s <= self.max_event_s:
            raise InvalidSynthConfig("need 0 < min_event_s <= max_event_s")
        if self.max_event_s > self.clip_seconds:
            raise InvalidSynthConfig(
                f"events up to {self.max_event_s} s do not fit in {self.clip_seconds} s clips")
        if self.event_rate < 0:
            raise InvalidSynthConfig("event_rate must be >= 0")
        if len(self.snr_db) != 2 or self.snr_db[0] > self.snr_db[1]:
            raise InvalidSynthConfig("snr_db must be a (low, high) range")
        if self.template not in ("tone", "noise", "mixed"):
            raise InvalidSynthConfig(f"unknown template {self.template!r}")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise InvalidSynthConfig("val_fraction + test_fraction must lie in [0, 1)")
        for a, b, p in self.pairs:
            if a not in labels or b not in labels:
                raise InvalidSynthConfig(f"pair {a}:{b} names an unknown label")
            if a == b:
                raise InvalidSynthConfig(f"pair {a}:{b} links a class to itself")
            if not 0 <= p <= 1:
                raise InvalidSynthConfig(f"pair {a}:{b} probability {p} outside [0, 1]")
        return self


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

def class_frequencies(cfg):
    """Center frequency per class, evenly spaced on the mel scale."""
    M = len(cfg.labels)
    fmax = min(6000.0, 0.4 * cfg.sample_rate)
    return librosa.mel_frequencies(n_mels=M + 2, fmin=200.0, fmax=fmax, htk=True)[1:-1]


def _template_kind(cfg, m):
    if cfg.template == "mixed":
        return "tone" if m % 2 == 0 else "noise"
    return cfg.template


def render_event(cfg, m, n_samples, rng):
    """Unit-RMS template of class m with faded edges."""
    freq = class_frequencies(cfg)[m]
    t = np.arange(n_samples) / cfg.sample_rate
    if _template_kind(cfg, m) == "tone":
        x = np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    else:
        nyq = cfg.sample_rate / 2.0
        band = (freq / 1.12 / nyq, min(freq * 1.12 / nyq, 0.99))
        sos = signal.butter(4, band, btype="bandpass", output="sos")
        x = signal.sosfilt(sos, rng.standard_normal(n_samples))
    x = x / max(np.sqrt(np.mean(x ** 2)), 1e-12)
    n_fade = min(int(FADE_S * cfg.sample_rate), n_samples // 2)
    if n_fade:
        ramp = np.hanning(2 * n_fade)
        x[:n_fade] *= ramp[:n_fade]
        x[-n_fade:] *= ramp[n_fade:]
    return x


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------

def _overlapping_onset(cfg, onset, offset, dur, rng):
    lo = max(0.0, onset - 0.5 * dur)
    hi = min(cfg.clip_seconds - dur, onset + 0.5 * (offset - onset))
    if lo > hi:
        return cfg.clip_seconds - dur
    return rng.uniform(lo, hi)


def place_events(cfg, rng):
    """Draw (onset, offset, label) placements for one clip."""
    partners = {}
    for a, b, p in cfg.pairs:
        partners.setdefault(a, []).append((b, p))

    events = []
    for label in cfg.labels:
        for _ in range(rng.poisson(cfg.event_rate)):
            dur = rng.uniform(cfg.min_event_s, cfg.max_event_s)
            onset = rng.uniform(0.0, cfg.clip_seconds - dur)
            queue = [(label, onset, onset + dur)]
            visited = {label}
            while queue:
                lab, on, off = queue.pop(0)
                events.append((on, off, lab))
                for partner, p in partners.get(lab, ()):
                    if partner in visited or rng.random() >= p:
                        continue
                    visited.add(partner)
                    d = rng.uniform(cfg.min_event_s, cfg.max_event_s)
                    o = _overlapping_onset(cfg, on, off, d, rng)
                    queue.append((partner, o, o + d))
    events.sort(key=lambda ev: (ev[0], ev[1], ev[2]))
    return events


def synthesize_clip(cfg, clip_index, seed_seq):
    rng = np.random.default_rng(seed_seq)
    n = int(round(cfg.clip_seconds * cfg.sample_rate))
    samples = cfg.noise_rms * rng.standard_normal(n)
    events = place_events(cfg, rng)
    rounded = []
    for onset, offset, label in events:
        onset, offset = round(onset, 6), round(offset, 6)
        start = int(round(onset * cfg.sample_rate))
        stop = min(int(round(offset * cfg.sample_rate)), n)
        snr = rng.uniform(*cfg.snr_db)
        gain = cfg.noise_rms * 10.0 ** (snr / 20.0)
        samples[start:stop] += gain * render_event(cfg, cfg.labels.index(label), stop - start, rng)
        rounded.append((onset, offset, label))
    clip_id = f"clip_{clip_index:04d}"
    ann = ClipAnnotation(clip_id=clip_id, events=rounded, scene=cfg.scene,
                         audio_path=f"audio/{clip_id}.wav", duration_s=cfg.clip_seconds)
    return Waveform(samples=samples, sample_rate=cfg.sample_rate), ann


def synthesize_corpus(cfg, workers=1):
    """Return (waveforms, annotations). Clip k draws from the k-th spawned seed."""
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_clips)
    clips = list(prefetch_map(lambda k: synthesize_clip(cfg, k, seeds[k]),
                              range(cfg.n_clips), workers=workers))
    return [w for w, _ in clips], [a for _, a in clips]


def assign_splits(cfg):
    """Seeded train/val/test assignment by fraction."""
    n_test = int(round(cfg.test_fraction * cfg.n_clips))
    n_val = int(round(cfg.val_fraction * cfg.n_clips))
    order = np.random.default_rng([cfg.seed, 1]).permutation(cfg.n_clips)
    splits = ["train"] * cfg.n_clips
    for k in order[:n_test]:
        splits[k] = "test"
    for k in order[n_test:n_test + n_val]:
        splits[k] = "val"
    return splits


# ---------------------------------------------------------------------------
# Corpus on disk
# ---------------------------------------------------------------------------

def write_corpus(out_dir, cfg, workers=1):
    """Write audio/*.wav, meta/*.tsv and manifest.json under out_dir."""
    waveforms, annotations = synthesize_corpus(cfg, workers=workers)
    splits = assign_splits(cfg)
    os.makedirs(os.path.join(out_dir, "audio"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "meta"), exist_ok=True)

    clips = []
    for w, ann, split in zip(waveforms, annotations, splits):
        write_wav(os.path.join(out_dir, ann.audio_path), w)
        meta = f"meta/{ann.clip_id}.tsv"
        write_annotations(os.path.join(out_dir, meta), [ann])
        clips.append({
            "clip_id": ann.clip_id,
            "audio": ann.audio_path,
            "annotation": meta,
            "scene": ann.scene,
            "split": split,
            "duration_s": cfg.clip_seconds,
            "labels": sorted(ann.labels),
        })

    settings = asdict(cfg)
    settings["pairs"] = [list(p) for p in cfg.pairs]
    manifest = {"labels": list(cfg.labels), "settings": settings, "clips": clips}
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise MissingInput(path, "manifest", e.strerror or e)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: not a manifest JSON file ({e})")
    if not isinstance(manifest, dict) or not isinstance(manifest.get("labels"), list) \
            or not isinstance(manifest.get("clips"), list):
        raise FormatError(f"{path}: manifest needs 'labels' and 'clips' lists")
    for k, clip in enumerate(manifest["clips"]):
        missing = [key for key in MANIFEST_CLIP_KEYS if not isinstance(clip, dict) or key not in clip]
        if missing:
            raise FormatError(f"{path}: clip {k} lacks {missing}")
    manifest["root"] = os.path.dirname(os.path.abspath(path))
    return manifest


def manifest_clips(manifest, split=None):
    """Clip entries of one split (all when None) with absolute paths."""
    root = manifest["root"]
    out = []
    for clip in manifest["clips"]:
        if split is not None and clip["split"] != split:
            continue
        entry = dict(clip)
        entry["audio"] = os.path.join(root, clip["audio"])
        entry["annotation"] = os.path.join(root, clip["annotation"])
        out.append(entry)
    return out
