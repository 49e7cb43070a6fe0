# annotations.py - TUT-style event annotation files
# Lines are tab separated, one of:
#   onset  offset  label
#   audio_path  onset  offset  label
#   audio_path  scene  onset  offset  label
# Every line of a file must use the same layout.
import os
from dataclasses import dataclass, field

import numpy as np

from pipeline.decision import roll_to_events
from pipeline.errors import EmptyCorpus, FormatError, InvalidInterval, MissingInput, ParseError
from pipeline.objective import TrainingTarget

ANNOTATION_SUFFIXES = (".tsv", ".txt", ".ann")


@dataclass
class ClipAnnotation:
    clip_id: str
    events: list = field(default_factory=list)  # (onset_s, offset_s, label)
    scene: str = None
    audio_path: str = None
    duration_s: float = None

    @property
    def labels(self):
        return {label for _, _, label in self.events}


def clip_id_from_path(path):
    return os.path.splitext(os.path.basename(path))[0]


def _parse_time(text, line_no):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(line_no, f"not a time in seconds: {text!r}")
    if not np.isfinite(value) or value < 0:
        raise ParseError(line_no, f"time must be finite and >= 0: {text!r}")
    return value


def parse_annotations(path, clip_id=None):
    """Parse one annotation file into ClipAnnotations, grouped by clip.

    Three-column files describe a single clip whose id is `clip_id` or the
    file stem. Clips come back in order of first appearance.
    """
    clips = {}
    n_cols = None
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().split("\n")
    except OSError as e:
        raise MissingInput(path, "annotation file", e.strerror or e)
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 text ({e})")
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        cols = [c.strip() for c in line.split("\t")]
        if len(cols) not in (3, 4, 5):
            raise ParseError(line_no, f"expected 3, 4 or 5 tab-separated fields, found {len(cols)}")
        if n_cols is None:
            n_cols = len(cols)
        elif len(cols) != n_cols:
            raise ParseError(line_no, f"{len(cols)} fields where earlier lines have {n_cols}")

        audio_path = cols[0] if n_cols >= 4 else None
        scene = cols[1] if n_cols == 5 else None
        onset = _parse_time(cols[-3], line_no)
        offset = _parse_time(cols[-2], line_no)
        label = cols[-1]
        if not label:
            raise ParseError(line_no, "empty event label")
        if offset <= onset:
            raise InvalidInterval(line_no, onset, offset)

        key = clip_id_from_path(audio_path) if audio_path else (clip_id or clip_id_from_path(path))
        ann = clips.get(key)
        if ann is None:
            ann = clips[key] = ClipAnnotation(clip_id=key, scene=scene, audio_path=audio_path)
        ann.events.append((onset, offset, label))
    return list(clips.values())


def load_annotations(path):
    """Annotations from a file, or from every annotation file in a directory."""
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, name) for name in os.listdir(path)
            if name.lower().endswith(ANNOTATION_SUFFIXES)
        )
        annotations = [ann for fp in files for ann in parse_annotations(fp)]
    elif os.path.exists(path):
        annotations = parse_annotations(path)
    else:
        raise EmptyCorpus(f"annotation path not found: {path}")
    if not annotations:
        raise EmptyCorpus(f"no annotations under {path}")
    return annotations


def _fmt(seconds):
    return f"{seconds:.6f}"


def write_annotations(path, annotations):
    """Write the layout that keeps every field the annotations carry."""
    annotations = list(annotations)
    with_scene = any(a.scene for a in annotations)
    with_path = with_scene or len(annotations) > 1 or any(a.audio_path for a in annotations)
    lines = []
    for ann in annotations:
        audio_path = ann.audio_path or f"{ann.clip_id}.wav"
        for onset, offset, label in ann.events:
            if "\t" in label:
                raise FormatError(f"label {label!r} contains a tab")
            cols = [_fmt(onset), _fmt(offset), label]
            if with_scene:
                cols = [audio_path, ann.scene or ""] + cols
            elif with_path:
                cols = [audio_path] + cols
            lines.append("\t".join(cols))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def clip_label_sets(annotations):
    return [ann.labels for ann in annotations]


def frame_centers(hop_ms, T):
    return (np.arange(T) + 0.5) * hop_ms / 1000.0


def event_roll_from_annotation(ann, vocab, hop_ms, T, duration_s=None):
    """Frame t is active for class m when its center lies in [onset, offset)."""
    centers = frame_centers(hop_ms, T)
    Z = np.zeros((len(vocab), T), dtype=np.int8)
    for onset, offset, label in ann.events:
        m = vocab.index(label)
        Z[m, (centers >= onset) & (centers < offset)] = 1
    duration_s = duration_s if duration_s is not None else ann.duration_s
    mask = centers < duration_s if duration_s is not None else np.ones(T, dtype=bool)
    return TrainingTarget(Z=Z, mask=mask)


def annotation_from_roll(roll, clip_id, audio_path=None, scene=None):
    return ClipAnnotation(clip_id=clip_id, events=roll_to_events(roll),
                          scene=scene, audio_path=audio_path)
