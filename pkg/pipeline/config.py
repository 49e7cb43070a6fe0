# config.py - Run configuration for glr-sed
# Component dataclasses with reference defaults, flat key=value file loading
# and the flag <-> key mapping used by run_sed.py.
import dataclasses
import math
import os
from dataclasses import dataclass, field

from dotenv import dotenv_values

from pipeline.errors import ConfigError

SEED_ENV = "CSED_SEED"


def _int_list(text):
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _str_list(text):
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _float_list(text):
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _pair_list(text):
    """'a:b:1.0,c:d:0.5' -> (('a', 'b', 1.0), ('c', 'd', 0.5))"""
    pairs = []
    for item in _str_list(text):
        parts = [p.strip() for p in item.split(":")]
        if len(parts) != 3:
            raise ValueError(f"pairs look like a:b:p, got {item!r}")
        pairs.append((parts[0], parts[1], float(parts[2])))
    return tuple(pairs)


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# ---------------------------------------------------------------------------
# Component configs
# ---------------------------------------------------------------------------

@dataclass
class FeatureConfig:
    sample_rate: int = 44100
    n_mels: int = 64
    frame_len_ms: float = 40.0
    hop_ms: float = 20.0
    fft_size: int = 0  # 0 = next power of two >= frame samples
    fmin_hz: float = 0.0
    fmax_hz: float = 0.0  # 0 = Nyquist
    log_floor: float = 1e-10
    window: str = "hann"
    seq_len: int = 500

    def frame_samples(self, sample_rate=None):
        return int(round(self.frame_len_ms * (sample_rate or self.sample_rate) / 1000.0))

    def hop_samples(self, sample_rate=None):
        return int(round(self.hop_ms * (sample_rate or self.sample_rate) / 1000.0))

    def resolved_fft_size(self, sample_rate=None):
        if self.fft_size:
            return self.fft_size
        return 1 << max(0, math.ceil(math.log2(self.frame_samples(sample_rate))))

    def resolved_fmax(self, sample_rate=None):
        return self.fmax_hz or (sample_rate or self.sample_rate) / 2.0

    def validate(self, sample_rate=None):
        sr = sample_rate or self.sample_rate
        if sr <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.hop_ms <= 0 or self.hop_ms > self.frame_len_ms:
            raise ConfigError("need 0 < hop_ms <= frame_len_ms")
        if self.frame_samples(sr) < 1 or self.hop_samples(sr) < 1:
            raise ConfigError("frame and hop must span at least one sample")
        if not 0 <= self.fmin_hz < self.resolved_fmax(sr) <= sr / 2.0:
            raise ConfigError("need 0 <= fmin_hz < fmax_hz <= sample_rate/2")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.fft_size and self.fft_size < self.frame_samples(sr):
            raise ConfigError("fft_size must be >= frame samples")
        if self.window not in ("hann", "boxcar"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        return self


RECURRENT_MODES = ("none", "forward_only", "bidirectional")


@dataclass
class ModelConfig:
    conv_layers: int = 3
    conv_channels: tuple = field(default=(128, 128, 128), metadata={"parse": _int_list})
    kernel: tuple = field(default=(3, 3), metadata={"parse": _int_list})
    pool: tuple = field(default=(3, 1), metadata={"parse": _int_list})
    activation: str = "relu"
    gru_units: int = 32
    recurrent_mode: str = "bidirectional"
    n_events: int = 0  # taken from the vocabulary when 0

    def validate(self):
        if self.conv_layers < 0:
            raise ConfigError("conv_layers must be >= 0")
        if len(self.conv_channels) != self.conv_layers:
            raise ConfigError(
                f"conv_channels has {len(self.conv_channels)} entries for {self.conv_layers} layers")
        if len(self.kernel) != 2 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError("kernel must be two odd sizes")
        if len(self.pool) != 2 or self.pool[0] < 1 or self.pool[1] != 1:
            raise ConfigError("pool must be (k, 1): pooling runs along frequency only")
        if self.activation != "relu":
            raise ConfigError("only relu activation is supported")
        if self.recurrent_mode not in RECURRENT_MODES:
            raise ConfigError(f"recurrent_mode must be one of {RECURRENT_MODES}")
        if self.recurrent_mode != "none" and self.gru_units < 1:
            raise ConfigError("gru_units must be >= 1 with a recurrent layer")
        return self


@dataclass
class LossConfig:
    alpha: float = 1.0e-5
    use_glr: bool = True
    epochs: int = 150
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_eps: float = 1e-12
    seed: int = 0
    log_every: int = 10

    def validate(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        return self


@dataclass
class ThresholdConfig:
    mode: str = "adaptive"
    fixed_theta: float = 0.5
    adaptive_low: float = 0.2
    adaptive_ratio: float = 0.5
    min_event_frames: int = 1
    smoothing_window: int = 1

    def validate(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ConfigError("threshold mode must be fixed or adaptive")
        if not 0 < self.fixed_theta < 1:
            raise ConfigError("fixed_theta must lie in (0, 1)")
        if not 0 <= self.adaptive_low < 1:
            raise ConfigError("adaptive_low must lie in [0, 1)")
        if not 0 < self.adaptive_ratio <= 1:
            raise ConfigError("adaptive_ratio must lie in (0, 1]")
        if self.min_event_frames < 1:
            raise ConfigError("min_event_frames must be >= 1")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ConfigError("smoothing_window must be an odd frame count")
        return self


@dataclass
class SegmentConfig:
    segment_ms: float = 40.0
    average: str = "micro"

    def validate(self):
        if self.segment_ms <= 0:
            raise ConfigError("segment_ms must be positive")
        if self.average not in ("micro", "macro"):
            raise ConfigError("average must be micro or macro")
        return self


@dataclass
class GraphConfig:
    cooccurrence: str = "clip"

    def validate(self):
        if self.cooccurrence not in ("clip", "frame"):
            raise ConfigError("cooccurrence must be clip or frame")
        return self


@dataclass
class LoaderConfig:
    workers: int = 1
    prefetch: int = 8

    def validate(self):
        if self.workers < 1 or self.prefetch < 1:
            raise ConfigError("workers and prefetch must be >= 1")
        return self


@dataclass
class CorpusConfig:
    """Synthetic corpus settings. Feasibility is checked when synthesizing."""
    n_clips: int = 200
    clip_seconds: float = 10.0
    event_labels: tuple = field(default=("a", "b", "c", "d", "e", "f"), metadata={"parse": _str_list})
    pairs: tuple = field(default=(), metadata={"parse": _pair_list})  # (label_i, label_j, probability)
    event_rate: float = 0.6  # mean placements per class per clip
    min_event_s: float = 0.5
    max_event_s: float = 2.0
    snr_db: tuple = field(default=(6.0, 20.0), metadata={"parse": _float_list})
    noise_rms: float = 0.01
    template: str = "mixed"  # tone | noise | mixed
    val_fraction: float = 0.0
    test_fraction: float = 0.2
    scene: str = "synthetic"

    def validate(self):
        return self


# ---------------------------------------------------------------------------
# RunConfig: the flat union of every component
# ---------------------------------------------------------------------------

SECTIONS = {
    "features": FeatureConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "threshold": ThresholdConfig,
    "segment": SegmentConfig,
    "graph": GraphConfig,
    "loader": LoaderConfig,
    "corpus": CorpusConfig,
}


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    loader: LoaderConfig = field(default_factory=LoaderConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    @property
    def seed(self):
        return self.loss.seed

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_flat(self):
        flat = {}
        for name in SECTIONS:
            flat.update(dataclasses.asdict(getattr(self, name)))
        return flat


def flat_keys():
    """Map every flat key to (section, dataclass field)."""
    keys = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name in keys:
                raise RuntimeError(f"duplicate config key {f.name}")
            keys[f.name] = (section, f)
    return keys


def coerce_value(f, raw):
    """Convert a raw string (file or flag) to the field's type."""
    parse = f.metadata.get("parse")
    try:
        if parse is not None:
            return parse(raw) if isinstance(raw, str) else tuple(raw)
        default = f.default
        if isinstance(default, bool):
            return _bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {f.name}: {raw!r} ({e})")


def apply_flat(cfg, values):
    """Apply a {key: raw value} mapping onto a RunConfig in place."""
    keys = flat_keys()
    for key, raw in values.items():
        if key not in keys:
            raise ConfigError(f"unknown config key: {key}")
        section, f = keys[key]
        setattr(getattr(cfg, section), key, coerce_value(f, raw))
    return cfg


def read_config_file(path):
    """Read a flat key=value file; values stay strings."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        values = dotenv_values(path, encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    return {k.strip().lower(): v for k, v in values.items() if v is not None}


def load_run_config(path=None, overrides=None):
    """Defaults < file < overrides. CSED_SEED fills the seed when unset."""
    cfg = RunConfig()
    file_values = read_config_file(path) if path else {}
    apply_flat(cfg, file_values)
    overrides = overrides or {}
    apply_flat(cfg, overrides)
    if "seed" not in file_values and "seed" not in overrides and os.environ.get(SEED_ENV):
        apply_flat(cfg, {"seed": os.environ[SEED_ENV]})
    return cfg.validate()


def model_config_from_dict(data):
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name in data:
            value = data[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    return ModelConfig(**kwargs).validate()
