# run_sed.py - Command-line runner for glr-sed
# Commands: synth -> build-graph -> train -> predict -> evaluate, plus gradcheck.
# Every config key is also a flag (--n-mels, --gru-units, ...); flags
# override --config FILE, which overrides the built-in defaults.
import argparse
import dataclasses
import os
import sys
import traceback
from datetime import datetime

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from corpus.annotations import (
    ClipAnnotation, annotation_from_roll, clip_label_sets, event_roll_from_annotation,
    parse_annotations, write_annotations,
)
from corpus.dataset import clip_frames, extract_clip, is_manifest, load_corpus, load_examples, load_features
from corpus.synthesize import SynthConfig, write_corpus
from pipeline.config import flat_keys, load_run_config, model_config_from_dict
from pipeline.decision import EventRoll, posteriorgram_to_csv, threshold
from pipeline.errors import (
    ConfigError, DataError, DimensionError, DivergenceError, FormatError, MetricInputMismatch, SedError,
)
from pipeline.eventgraph import (
    EventVocabulary, build_cooccurrence, build_cooccurrence_frames, check_graph,
    load_graph_json, save_graph_csv, save_graph_json,
)
from pipeline.features import features_to_csv, read_features, write_features
from pipeline.gradcheck import format_report, require_pass, run_gradcheck
from pipeline.metrics import aggregate_frequency_gap, score_many, write_report_csv, write_report_json
from pipeline.network import load_checkpoint, save_checkpoint
from pipeline.runlog import record_run
from pipeline.train import history_to_csv, predict_clip, train

DATA_DIR = "data"
FLAG_ALIASES = {"n_clips": ("--clips",)}


class SedArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _banner(title):
    print(f"\n{'=' * 60}")
    print(f"  GLR-SED - {title.upper()}")
    print(f"  {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"{'=' * 60}\n")


def _show_default(value):
    if isinstance(value, tuple):
        return ",".join(":".join(map(str, v)) if isinstance(v, tuple) else str(v) for v in value)
    return value


def _add_config_flags(parser):
    group = parser.add_argument_group("configuration (flags override --config)")
    group.add_argument("--config", help="flat key=value config file")
    group.add_argument("--run-log", help="run log path (default: $CSED_RUN_LOG or data/run_log.json)")
    for key, (section, f) in flat_keys().items():
        flags = ["--" + key.replace("_", "-"), *FLAG_ALIASES.get(key, ())]
        help_text = f"[{section}] (default: {_show_default(f.default)})"
        if isinstance(f.default, bool):
            group.add_argument(*flags, dest=key, action=argparse.BooleanOptionalAction,
                               default=None, help=help_text)
        else:
            group.add_argument(*flags, dest=key, default=None, metavar=key.upper(), help=help_text)
    group.add_argument("--glr", dest="use_glr", action="store_const", const=True,
                       help="enable the co-occurrence penalty (same as --use-glr)")
    group.add_argument("--no-glr", dest="use_glr", action="store_const", const=False,
                       help="disable the co-occurrence penalty (same as --no-use-glr)")


def build_parser():
    parser = SedArgumentParser(
        prog="run_sed.py",
        description="Polyphonic sound event detection with co-occurrence graph regularization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a corpus with controlled co-occurrence")
    p.add_argument("--out", default=os.path.join(DATA_DIR, "corpus"), help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("build-graph", help="build the co-occurrence graph from annotations")
    p.add_argument("--annotations", required=True, help="corpus manifest, annotation file or directory")
    p.add_argument("--split", default="train", help="manifest split to count (default: train)")
    p.add_argument("--out", default=os.path.join(DATA_DIR, "graph.json"), help="graph JSON path")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train the detector")
    p.add_argument("--corpus", required=True, help="corpus manifest or annotation file/directory")
    p.add_argument("--graph", help="graph JSON from build-graph (required with GLR)")
    p.add_argument("--out", default=os.path.join(DATA_DIR, "model.csm"), help="checkpoint path")
    p.add_argument("--history", help="history CSV (default: <out>_history.csv)")
    p.add_argument("--split", default="train", help="manifest training split (default: train)")
    p.add_argument("--val-split", default="val", help="manifest validation split (default: val)")
    _add_config_flags(p)

    p = sub.add_parser("predict", help="posteriorgram and event list for audio or features")
    p.add_argument("--checkpoint", required=True, help="CSM1 checkpoint from train")
    p.add_argument("--input", required=True, help="WAV, CSF1 feature file, or corpus manifest")
    p.add_argument("--split", default="test", help="manifest split to predict (default: test)")
    p.add_argument("--out-dir", default=os.path.join(DATA_DIR, "predictions"), help="output directory")
    p.add_argument("--float32", action="store_true", help="run inference in float32")
    p.add_argument("--save-features", action="store_true",
                   help="also write <clip>.csf and <clip>_features.csv to --out-dir")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="segment-based F1 / error rate of predictions")
    p.add_argument("--pred", required=True, help="predicted event TSV (file or directory)")
    p.add_argument("--ref", required=True, help="reference annotations (file, directory or manifest)")
    p.add_argument("--split", default="test", help="manifest split of the reference (default: test)")
    p.add_argument("--labels", help="comma-separated vocabulary (default: from the reference)")
    p.add_argument("--duration", type=float, help="clip duration in seconds (default: from data)")
    p.add_argument("--out", default=os.path.join(DATA_DIR, "metrics.json"), help="report JSON path")
    p.add_argument("--gap-pairs", nargs="*", default=[], metavar="A:B",
                   help="also report the mean aggregate-frequency gap of these label pairs, "
                        "read from the posteriorgram CSVs next to --pred")
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--corrupt", metavar="TENSOR", help="scale one analytic gradient by 1.5")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step (default: 1e-5)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default: 1e-4)")
    _add_config_flags(p)

    return parser


def config_overrides(args):
    keys = flat_keys()
    return {key: getattr(args, key) for key in keys if getattr(args, key, None) is not None}


def _ensure_parent(path):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg):
    synth = SynthConfig.from_run_config(cfg)
    print(f"  Synthesizing {synth.n_clips} clips of {synth.clip_seconds:g} s "
          f"over {len(synth.labels)} classes (seed {synth.seed})")
    for a, b, prob in synth.pairs:
        print(f"    pair {a} -> {b}: p={prob:g}")
    manifest = write_corpus(args.out, synth, workers=cfg.loader.workers)
    counts = {s: sum(1 for c in manifest["clips"] if c["split"] == s) for s in ("train", "val", "test")}
    print(f"  Wrote {args.out}: " + ", ".join(f"{n} {s}" for s, n in counts.items()))
    return {"out": args.out, "clips": synth.n_clips, **counts}


def cmd_build_graph(args, cfg):
    annotations, labels = load_corpus(args.annotations, split=args.split)
    vocab = EventVocabulary(labels)
    if cfg.graph.cooccurrence == "frame":
        hop = cfg.features.hop_ms
        rolls = []
        for ann in annotations:
            target = event_roll_from_annotation(ann, vocab, hop, clip_frames(ann, hop))
            rolls.append(target.Z[:, target.mask])
        graph = build_cooccurrence_frames(rolls, vocab)
    else:
        graph = build_cooccurrence(clip_label_sets(annotations), vocab)
    check_graph(graph)

    _ensure_parent(args.out)
    save_graph_json(args.out, graph)
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    save_graph_csv(csv_path, graph)

    print(f"  {len(annotations)} clips, {len(vocab)} classes, {cfg.graph.cooccurrence}-level counts")
    upper = np.triu(graph.adjacency, 1)
    for i, j in zip(*np.nonzero(upper)):
        print(f"    {labels[i]} - {labels[j]}: A={upper[i, j]:.4f} (count {int(graph.raw_counts[i, j])})")
    print(f"  Wrote {args.out} and {csv_path}")
    return {"out": args.out, "clips": len(annotations), "classes": len(vocab)}


def cmd_train(args, cfg):
    glr = cfg.loss.use_glr and cfg.loss.alpha > 0
    if glr and not args.graph:
        raise ConfigError("GLR is enabled: pass --graph, or --no-glr / --alpha 0")
    if glr and not os.path.exists(args.graph):
        raise DataError(f"graph file not found: {args.graph}")

    annotations, labels = load_corpus(args.corpus, split=args.split)
    vocab = EventVocabulary(labels)
    graph = None
    if glr:
        graph = load_graph_json(args.graph)
        if tuple(graph.labels) != vocab.labels:
            raise DimensionError(f"graph labels {graph.labels} differ from corpus labels {vocab.labels}")

    print(f"  Extracting features for {len(annotations)} training clips...")
    corpus = load_examples(annotations, vocab, cfg)
    validation = None
    if is_manifest(args.corpus) and args.val_split != args.split:
        try:
            val_annotations, _ = load_corpus(args.corpus, split=args.val_split)
        except SedError:
            val_annotations = []
        if val_annotations:
            print(f"  Extracting features for {len(val_annotations)} validation clips...")
            validation = load_examples(val_annotations, vocab, cfg)

    model_cfg = dataclasses.replace(cfg.model, n_events=len(vocab))
    meta = {
        "n_features": cfg.features.n_mels,
        "labels": list(vocab.labels),
        "features": dataclasses.asdict(cfg.features),
    }
    history_path = args.history or os.path.splitext(args.out)[0] + "_history.csv"
    _ensure_parent(args.out)
    _ensure_parent(history_path)

    try:
        params, history = train(corpus, graph, model_cfg, cfg.loss, validation=validation,
                                threshold_cfg=cfg.threshold, segment_cfg=cfg.segment,
                                labels=vocab.labels)
    except DivergenceError as e:
        if e.last_good is not None:
            save_checkpoint(args.out, e.last_good, model_cfg, meta=meta)
            history_to_csv(history_path, e.history)
            print(f"  Diverged; last good parameters written to {args.out}")
        raise

    save_checkpoint(args.out, params, model_cfg, meta=meta)
    history_to_csv(history_path, history)
    print(f"  Wrote {args.out} and {history_path}")
    last = history[-1]
    return {"out": args.out, "epochs": len(history), "bce": last["bce"], "glr": last["glr"],
            "val_f1": last["val_f1"]}


def _predict_inputs(args, cfg):
    """(clip_id, FeatureMatrix, audio_path) for every input clip."""
    path = args.input
    if path.lower().endswith(".csf"):
        return [(os.path.splitext(os.path.basename(path))[0], read_features(path), None)]
    if path.lower().endswith(".wav"):
        ann = ClipAnnotation(clip_id=os.path.splitext(os.path.basename(path))[0], audio_path=path)
        return [(ann.clip_id, extract_clip(ann, cfg), path)]
    annotations, _ = load_corpus(path, split=args.split)
    feats = load_features(annotations, cfg)
    return [(ann.clip_id, feat, ann.audio_path) for ann, feat in zip(annotations, feats)]


def cmd_predict(args, cfg):
    params, header = load_checkpoint(args.checkpoint)
    model_cfg = model_config_from_dict(header.get("model", {}))
    labels = tuple(header.get("labels") or [f"event_{m}" for m in range(model_cfg.n_events)])
    for key, value in header.get("features", {}).items():
        if key not in ("seq_len",) and getattr(cfg.features, key) != value:
            print(f"  [WARN] checkpoint was trained with {key}={value}, current config has "
                  f"{getattr(cfg.features, key)}")
    dtype = np.float32 if args.float32 else np.float64

    os.makedirs(args.out_dir, exist_ok=True)
    inputs = _predict_inputs(args, cfg)
    predicted = []
    for clip_id, feat, audio_path in inputs:
        if feat.dim != header.get("n_features", feat.dim):
            raise DimensionError(f"{clip_id}: features have {feat.dim} dims, model expects "
                                 f"{header.get('n_features')}")
        if args.save_features:
            write_features(os.path.join(args.out_dir, f"{clip_id}.csf"), feat)
            features_to_csv(os.path.join(args.out_dir, f"{clip_id}_features.csv"), feat)
        Y = predict_clip(feat, params, model_cfg, cfg.features.seq_len, cfg.features.log_floor,
                         dtype=dtype)
        roll = threshold(Y, cfg.threshold, labels=labels)
        ann = annotation_from_roll(roll, clip_id)
        posteriorgram_to_csv(os.path.join(args.out_dir, f"{clip_id}_posteriorgram.csv"), Y, labels)
        write_annotations(os.path.join(args.out_dir, f"{clip_id}.tsv"), [ann])
        ann.audio_path = audio_path
        predicted.append(ann)
        print(f"    {clip_id}: {feat.frames} frames, {len(ann.events)} events")

    if len(predicted) > 1:
        combined = os.path.join(args.out_dir, "events.tsv")
        write_annotations(combined, [a for a in predicted if a.events])
        print(f"  Combined event list: {combined}")
    print(f"  Wrote {len(predicted)} predictions to {args.out_dir}")
    return {"out_dir": args.out_dir, "clips": len(predicted),
            "events": sum(len(a.events) for a in predicted)}


def _reference(args):
    annotations, labels = load_corpus(args.ref, split=args.split)
    if args.labels:
        labels = tuple(x.strip() for x in args.labels.split(",") if x.strip())
    return annotations, labels


def _load_predictions(path):
    """Per-clip prediction TSVs (file or directory); empty files mean no events."""
    if not os.path.isdir(path):
        if not os.path.exists(path):
            raise DataError(f"prediction path not found: {path}")
        return parse_annotations(path)
    names = sorted(n for n in os.listdir(path) if n.endswith(".tsv") and n != "events.tsv")
    preds = [a for n in names
             for a in parse_annotations(os.path.join(path, n), clip_id=os.path.splitext(n)[0])]
    if not names and os.path.exists(os.path.join(path, "events.tsv")):
        preds = parse_annotations(os.path.join(path, "events.tsv"))
    return preds


def _parse_gap_pairs(texts, labels):
    pairs = []
    for text in texts:
        parts = [p.strip() for p in text.split(":")]
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"--gap-pairs entries look like a:b, got {text!r}")
        for label in parts:
            if label not in labels:
                raise MetricInputMismatch(f"--gap-pairs names unknown label {label!r}")
        pairs.append(tuple(parts))
    return pairs


def _posteriorgram_gap(pred_path, clip_ids, pairs):
    """Mean aggregate-frequency gap over the clips' posteriorgram CSVs."""
    root = pred_path if os.path.isdir(pred_path) else os.path.dirname(pred_path)
    gaps = []
    for clip_id in clip_ids:
        path = os.path.join(root, f"{clip_id}_posteriorgram.csv")
        if not os.path.exists(path):
            raise DataError(f"no posteriorgram for {clip_id}: {path}")
        try:
            df = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise FormatError(f"{path}: unreadable posteriorgram CSV ({e})")
        columns = [c for c in df.columns if c != "time_s"]
        missing = sorted({label for pair in pairs for label in pair} - set(columns))
        if missing:
            raise MetricInputMismatch(f"{path} has no column for {missing}")
        gaps.append(aggregate_frequency_gap(df[columns].to_numpy().T, columns, pairs))
    return float(np.mean(gaps))


def cmd_evaluate(args, cfg):
    refs, labels = _reference(args)
    gap_pairs = _parse_gap_pairs(args.gap_pairs, labels)
    vocab = EventVocabulary(labels)
    preds = _load_predictions(args.pred)
    hop = cfg.features.hop_ms

    if len(refs) == 1 and len(preds) == 1:
        pairs = [(preds[0], refs[0])]
    else:
        by_id = {a.clip_id: a for a in preds}
        unknown = sorted(set(by_id) - {a.clip_id for a in refs})
        if unknown:
            raise MetricInputMismatch(f"predictions for clips missing from the reference: {unknown[:5]}")
        pairs = [(by_id.get(r.clip_id, ClipAnnotation(clip_id=r.clip_id)), r) for r in refs]

    rolls = []
    for pred, ref in pairs:
        for _, _, label in pred.events:
            if label not in vocab.labels:
                raise MetricInputMismatch(f"{pred.clip_id}: predicted label {label!r} not in the reference vocabulary")
        if args.duration is not None:
            T = max(1, int(np.ceil(args.duration * 1000.0 / hop)))
        else:
            T = max(clip_frames(ref, hop), clip_frames(pred, hop))
        z_pred = event_roll_from_annotation(pred, vocab, hop, T).Z
        z_ref = event_roll_from_annotation(ref, vocab, hop, T).Z
        rolls.append((EventRoll(z_pred, hop, vocab.labels), EventRoll(z_ref, hop, vocab.labels)))

    scores = score_many(rolls, cfg.segment)
    gap, extra = None, None
    if gap_pairs:
        gap = _posteriorgram_gap(args.pred, [ref.clip_id for _, ref in pairs], gap_pairs)
        extra = {"aggregate_gap": gap, "gap_pairs": [list(p) for p in gap_pairs]}
    _ensure_parent(args.out)
    write_report_json(args.out, scores, extra=extra)
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    write_report_csv(csv_path, scores)

    er = f"{scores.error_rate:.4f}" if scores.error_rate is not None else "undefined"
    print(f"  {len(rolls)} clips, {len(vocab)} classes, {cfg.segment.segment_ms:g} ms segments, "
          f"{scores.average} average")
    print(f"  F1 = {scores.f1:.4f}   ER = {er}")
    print(f"  TP={scores.tp} FP={scores.fp} FN={scores.fn}  S={scores.s} D={scores.d} I={scores.i} N={scores.n}")
    if gap is not None:
        print(f"  Aggregate-frequency gap over {len(gap_pairs)} pair(s): {gap:.4f}")
    print(f"  Wrote {args.out} and {csv_path}")
    return {"out": args.out, "f1": scores.f1, "er": scores.error_rate, "aggregate_gap": gap}


def cmd_gradcheck(args, cfg):
    try:
        rows = run_gradcheck(seed=cfg.seed, eps=args.eps, tol=args.tol, corrupt=args.corrupt)
    except KeyError as e:
        raise ConfigError(f"--corrupt: {e.args[0]}")
    print(format_report(rows))
    failed = sum(1 for r in rows if not r["passed"])
    print(f"\n  {len(rows) - failed}/{len(rows)} tensor checks passed")
    require_pass(rows)
    return {"checks": len(rows), "failed": failed}


HANDLERS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    started_at = datetime.now().isoformat()
    _banner(args.command)

    status, exit_code, error, summary = "completed", 0, None, None
    try:
        cfg = load_run_config(args.config, config_overrides(args))
        summary = HANDLERS[args.command](args, cfg)
    except SedError as e:
        status, exit_code, error = "failed", e.exit_code, str(e)
        print(f"\n  ERROR: {e}")
    except OSError as e:
        status, exit_code, error = "failed", DataError.exit_code, str(e)
        print(f"\n  ERROR: {e}")
    except Exception as e:
        status, exit_code, error = "failed", DataError.exit_code, f"{type(e).__name__}: {e}"
        print(f"\n  {args.command.upper()} FAILED: {error}")
        traceback.print_exc()

    record_run(args.command, started_at, status, exit_code, error=error, summary=summary,
               path=args.run_log)

    print(f"\n{'=' * 60}")
    print(f"  {args.command} {status} (exit {exit_code})")
    print(f"{'=' * 60}\n")
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
