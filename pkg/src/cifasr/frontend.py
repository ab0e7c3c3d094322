"""Waveform-to-feature frontend: log-mel filterbanks, SpecAugment, feature files.

Synthetic corpora write feature files directly and skip the DSP path; the
model consumes :class:`FeatureSequence` either way.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-10
FEATURE_MAGIC = b"VLSF"
FEATURE_VERSION = 1


class FeatureFileError(ValueError):
    """Malformed feature file (bad magic, version, or payload size)."""


@dataclass
class FeatureSequence:
    """T x F matrix of log-mel frames plus frame metadata."""

    frames: np.ndarray
    sample_rate: int = 16000
    frame_shift_ms: float = 10.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a T x F matrix with T >= 1, "
                             f"got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SpecAugmentPolicy:
    num_freq_masks: int = 2
    max_freq_width: int = 10
    num_time_masks: int = 2
    max_time_width_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_freq_masks < 0 or self.num_time_masks < 0:
            raise ValueError("mask counts must be >= 0")
        if self.max_freq_width < 0:
            raise ValueError("max_freq_width must be >= 0")
        if not 0.0 <= self.max_time_width_fraction <= 1.0:
            raise ValueError("max_time_width_fraction must lie in [0, 1]")


@dataclass
class FbankConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    num_mels: int = 80
    preemphasis: float = 0.97
    fmin: float = 20.0
    fmax: float = 7600.0


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_mels: int, n_fft: int, sample_rate: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filters, (num_mels, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.arange(n_bins) * sample_rate / n_fft
    fb = np.zeros((num_mels, n_bins))
    for m in range(num_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(cfg: FbankConfig, n_fft: int | None = None) -> np.ndarray:
    """Center frequency (Hz) of each mel filter under `cfg`."""
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.num_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def fbank(waveform: np.ndarray, sample_rate: int = 16000,
          cfg: FbankConfig | None = None, source_id: str = "") -> FeatureSequence:
    """Log-mel filterbank features: Hamming window, 25 ms / 10 ms by default.

    T = 1 + floor((len - window) / hop); cell values are
    log(mel energy + 1e-10).
    """
    if cfg is None:
        cfg = FbankConfig(sample_rate=sample_rate)
    if sample_rate <= 0:
        raise ValueError(f"sample rate must be positive, got {sample_rate}")
    wav = np.asarray(waveform, dtype=np.float64).reshape(-1)
    win = int(round(cfg.window_ms * sample_rate / 1000.0))
    hop = int(round(cfg.hop_ms * sample_rate / 1000.0))
    if wav.size < win:
        raise ValueError(f"waveform of {wav.size} samples shorter than one "
                         f"{win}-sample window")
    # pre-emphasis with y[0] = x[0] so a hop of leading silence shifts frames cleanly
    emph = np.empty_like(wav)
    emph[0] = wav[0]
    emph[1:] = wav[1:] - cfg.preemphasis * wav[:-1]

    n_frames = 1 + (wav.size - win) // hop
    n_fft = _next_pow2(win)
    window = np.hamming(win)
    fb = mel_filterbank(cfg.num_mels, n_fft, sample_rate, cfg.fmin, cfg.fmax)

    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    framed = emph[idx] * window
    spec = np.abs(np.fft.rfft(framed, n=n_fft, axis=1)) ** 2
    mel = spec @ fb.T
    feats = np.log(mel + LOG_FLOOR).astype(np.float32)
    return FeatureSequence(frames=feats, sample_rate=sample_rate,
                           frame_shift_ms=cfg.hop_ms, source_id=source_id)


def spec_augment(feat: FeatureSequence, policy: SpecAugmentPolicy) -> FeatureSequence:
    """Mask random frequency rows / time spans with the per-utterance mean."""
    x = feat.frames.copy()
    t, f = x.shape
    fill = float(feat.frames.mean())
    rng = np.random.default_rng(policy.seed)
    for _ in range(policy.num_freq_masks):
        width = int(rng.integers(0, policy.max_freq_width + 1))
        width = min(width, f)
        if width == 0:
            continue
        start = int(rng.integers(0, f - width + 1))
        x[:, start:start + width] = fill
    max_t = int(policy.max_time_width_fraction * t)
    for _ in range(policy.num_time_masks):
        width = int(rng.integers(0, max_t + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, t - width + 1))
        x[start:start + width, :] = fill
    return FeatureSequence(frames=x, sample_rate=feat.sample_rate,
                           frame_shift_ms=feat.frame_shift_ms,
                           source_id=feat.source_id)


def write_feature_file(path: str, feat: FeatureSequence | np.ndarray) -> None:
    frames = feat.frames if isinstance(feat, FeatureSequence) else np.asarray(feat)
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, frames.shape[0], frames.shape[1]))
        fh.write(frames.tobytes())


def read_feature_file(path: str, source_id: str = "") -> FeatureSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic (expected {FEATURE_MAGIC!r})")
    version, n_frames, dim = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * n_frames * dim
    if len(blob) != expected:
        raise FeatureFileError(f"{path}: payload is {len(blob) - 16} bytes, header "
                               f"promises {n_frames}x{dim} floats")
    frames = np.frombuffer(blob[16:], dtype="<f4").reshape(n_frames, dim).copy()
    return FeatureSequence(frames=frames, source_id=source_id or path)


def read_feature_matrix(path: str) -> np.ndarray:
    """Raw matrix variant for cue files (rows need not be speech frames)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic (expected {FEATURE_MAGIC!r})")
    version, n_rows, dim = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if len(blob) != 16 + 4 * n_rows * dim:
        raise FeatureFileError(f"{path}: truncated payload")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(n_rows, dim).copy()
