# dataset.py - Annotated clips -> (FeatureMatrix, TrainingTarget) examples
# A corpus is either a synthesized manifest (directory or manifest.json) or
# an annotation file / directory whose lines carry audio paths.
import math
import os

import numpy as np

from corpus.annotations import ClipAnnotation, event_roll_from_annotation, load_annotations, parse_annotations
from corpus.synthesize import MANIFEST_NAME, load_manifest, manifest_clips
from pipeline.errors import EmptyCorpus, InvalidAudio
from pipeline.features import extract_file, fit_sequence
from pipeline.loader import load_all
from pipeline.objective import TrainingTarget


def is_manifest(path):
    if os.path.isdir(path):
        return os.path.exists(os.path.join(path, MANIFEST_NAME))
    return path.endswith(".json")


def load_corpus(path, split=None):
    """Returns (annotations, labels). `split` only applies to manifests."""
    if is_manifest(path):
        manifest = load_manifest(path)
        annotations = []
        for clip in manifest_clips(manifest, split):
            parsed = parse_annotations(clip["annotation"], clip_id=clip["clip_id"])
            ann = parsed[0] if parsed else ClipAnnotation(clip_id=clip["clip_id"])
            ann.clip_id = clip["clip_id"]
            ann.audio_path = clip["audio"]
            ann.scene = clip.get("scene")
            ann.duration_s = clip.get("duration_s")
            annotations.append(ann)
        labels = tuple(manifest["labels"])
    else:
        annotations = load_annotations(path)
        base = path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))
        for ann in annotations:
            if ann.audio_path and not os.path.isabs(ann.audio_path):
                ann.audio_path = os.path.join(base, ann.audio_path)
        labels = tuple(sorted({label for ann in annotations for label in ann.labels}))
    if not annotations:
        where = f"{split} split of " if split else ""
        raise EmptyCorpus(f"no clips in {where}{path}")
    return annotations, labels


def clip_frames(ann, hop_ms):
    """Frame count covering the clip: its duration, else its last offset."""
    duration = ann.duration_s
    if duration is None:
        duration = max((off for _, off, _ in ann.events), default=0.0)
    return max(1, math.ceil(duration * 1000.0 / hop_ms))


def clip_examples(feat, ann, vocab, cfg):
    """Split one clip into seq_len training examples under a FeatureConfig."""
    target = event_roll_from_annotation(ann, vocab, feat.hop_ms, feat.frames)
    examples = []
    for k, (chunk, mask) in enumerate(fit_sequence(feat, cfg.seq_len, cfg.log_floor)):
        start = k * cfg.seq_len
        Z = np.zeros((len(vocab), cfg.seq_len), dtype=np.int8)
        part = target.Z[:, start:start + cfg.seq_len]
        Z[:, :part.shape[1]] = part
        mask = mask.copy()
        mask[:part.shape[1]] &= target.mask[start:start + cfg.seq_len]
        examples.append((chunk, TrainingTarget(Z=Z, mask=mask)))
    return examples


def extract_clip(ann, cfg):
    if not ann.audio_path:
        raise InvalidAudio(f"clip {ann.clip_id} has no audio path")
    return extract_file(ann.audio_path, cfg.features)


def load_features(annotations, cfg):
    """Features for every clip, loaded ahead through the configured pool."""
    return load_all(lambda ann: extract_clip(ann, cfg), annotations, cfg.loader)


def load_examples(annotations, vocab, cfg):
    feats = load_features(annotations, cfg)
    return [ex for feat, ann in zip(feats, annotations)
            for ex in clip_examples(feat, ann, vocab, cfg.features)]
