# features.py - Log mel-band energy front end for glr-sed
# Waveform -> power spectrogram -> mel filterbank -> log, plus the
# fixed-length sequence policy and the CSF1 feature file format.
import struct
import warnings
from dataclasses import dataclass

import librosa
import numpy as np
import pandas as pd
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from pipeline.errors import DegenerateFilterbank, EmptyInput, FormatError, InvalidAudio, MissingInput

FEATURE_MAGIC = b"CSF1"
_HEADER = struct.Struct("<4sIII")
FLOAT_MAX = np.finfo(np.float64).max
# frames louder than this are rescaled before the FFT
RESCALE_ABOVE = 1e100


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration_s(self):
        return len(self.samples) / float(self.sample_rate)


@dataclass
class FeatureMatrix:
    values: np.ndarray  # D x T
    hop_ms: float

    @property
    def dim(self):
        return self.values.shape[0]

    @property
    def frames(self):
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Spectral front end
# ---------------------------------------------------------------------------

def _check_waveform(w):
    samples = np.asarray(w.samples, dtype=np.float64)
    if samples.ndim != 1:
        raise InvalidAudio("waveform must be mono (1-D)")
    if samples.size == 0:
        raise EmptyInput("empty waveform")
    if not np.all(np.isfinite(samples)):
        raise InvalidAudio("waveform contains NaN or Inf samples")
    if w.sample_rate <= 0:
        raise InvalidAudio("sample_rate must be positive")
    return samples


def frame_count(n_samples, frame, hop):
    """Frames left-aligned at multiples of hop; a short signal still gives one frame."""
    if n_samples <= frame:
        return 1
    return 1 + (n_samples - frame) // hop


def stft_power(w, cfg):
    """Squared magnitude of the windowed DFT, fft_bins x T."""
    samples = _check_waveform(w)
    cfg.validate(w.sample_rate)
    frame = cfg.frame_samples(w.sample_rate)
    hop = cfg.hop_samples(w.sample_rate)
    n_fft = cfg.resolved_fft_size(w.sample_rate)

    n_frames = frame_count(len(samples), frame, hop)
    if len(samples) < frame:
        samples = np.pad(samples, (0, frame - len(samples)))
    frames = sliding_window_view(samples, frame)[::hop][:n_frames]

    if cfg.window == "boxcar":
        window = np.ones(frame)
    else:
        window = get_window("hann", frame, fftbins=True)

    peak = float(np.max(np.abs(frames)))
    if peak <= RESCALE_ABOVE:
        spectrum = np.fft.rfft(frames * window, n=n_fft, axis=1)
        power = spectrum.real ** 2 + spectrum.imag ** 2
    else:
        spectrum = np.fft.rfft(frames * (window / peak), n=n_fft, axis=1)
        with np.errstate(over="ignore"):
            power = (np.abs(spectrum) * peak) ** 2
    # saturate instead of overflowing to inf
    return np.minimum(power, FLOAT_MAX).T


def mel_filterbank(cfg, sample_rate):
    """HTK-mel triangular filters (n_mels x fft_bins), unnormalized."""
    cfg.validate(sample_rate)
    with warnings.catch_warnings():
        # empty filters are reported below as DegenerateFilterbank
        warnings.simplefilter("ignore", UserWarning)
        fb = librosa.filters.mel(
            sr=sample_rate,
            n_fft=cfg.resolved_fft_size(sample_rate),
            n_mels=cfg.n_mels,
            fmin=cfg.fmin_hz,
            fmax=cfg.resolved_fmax(sample_rate),
            htk=True,
            norm=None,
            dtype=np.float64,
        )
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise DegenerateFilterbank(
            f"{empty.size} of {cfg.n_mels} mel filters cover no FFT bin "
            f"(fft_size={cfg.resolved_fft_size(sample_rate)}); lower n_mels")
    return fb


def log_mel_energy(w, cfg):
    power = stft_power(w, cfg)
    fb = mel_filterbank(cfg, w.sample_rate)
    with np.errstate(over="ignore"):
        energy = np.minimum(fb @ power, FLOAT_MAX)
    values = np.log(np.maximum(energy, cfg.log_floor))
    return FeatureMatrix(values=values, hop_ms=cfg.hop_ms)


def fit_sequence(feat, seq_len, log_floor):
    """Split into seq_len-frame chunks; the tail chunk is padded with ln(log_floor).

    Returns a list of (FeatureMatrix, mask) with mask True on real frames.
    """
    D, T = feat.values.shape
    pad_value = np.log(log_floor)
    chunks = []
    for start in range(0, max(T, 1), seq_len):
        part = feat.values[:, start:start + seq_len]
        n_valid = part.shape[1]
        mask = np.zeros(seq_len, dtype=bool)
        mask[:n_valid] = True
        if n_valid < seq_len:
            part = np.concatenate([part, np.full((D, seq_len - n_valid), pad_value)], axis=1)
        chunks.append((FeatureMatrix(values=part, hop_ms=feat.hop_ms), mask))
    return chunks


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def read_wav(path):
    """Read a PCM / float WAV as float64 mono; channels are averaged."""
    try:
        data, sr = sf.read(path, dtype="float64", always_2d=True)
    except (RuntimeError, ValueError) as e:
        raise InvalidAudio(f"cannot read {path}: {e}")
    return Waveform(samples=data.mean(axis=1), sample_rate=int(sr))


def write_wav(path, w, subtype="PCM_16"):
    sf.write(path, np.asarray(w.samples), w.sample_rate, subtype=subtype)


def extract_file(path, cfg):
    w = read_wav(path)
    if w.sample_rate != cfg.sample_rate:
        print(f"  [WARN] {path}: {w.sample_rate} Hz differs from configured "
              f"{cfg.sample_rate} Hz; features use the file's rate")
    return log_mel_energy(w, cfg)


def write_features(path, feat):
    if float(feat.hop_ms) != int(feat.hop_ms) or feat.hop_ms <= 0:
        raise FormatError(f"{path}: CSF1 stores whole-millisecond hops, got {feat.hop_ms}")
    values = np.ascontiguousarray(feat.values, dtype="<f8")
    D, T = values.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, D, T, int(feat.hop_ms)))
        f.write(values.tobytes(order="C"))


def read_features(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise MissingInput(path, "feature file", e.strerror or e)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, D, T, hop_ms = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    body = raw[_HEADER.size:]
    if len(body) != D * T * 8:
        raise FormatError(f"{path}: expected {D * T * 8} data bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").reshape(D, T).astype(np.float64)
    return FeatureMatrix(values=values, hop_ms=float(hop_ms))


def features_to_csv(path, feat):
    df = pd.DataFrame(feat.values.T, columns=[f"mel_{d}" for d in range(feat.dim)])
    df.insert(0, "time_s", np.arange(feat.frames) * feat.hop_ms / 1000.0)
    df.insert(0, "frame", np.arange(feat.frames))
    df.to_csv(path, index=False)
