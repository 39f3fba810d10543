"""Log-Mel filterbank features and a fixed-length speaker embedding."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10
EMBEDDING_DIM = 100
_PROJECTION_SEED = 20190406


@dataclass(eq=False)
class FeatureMatrix:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("feature matrix must be 2-D with at least one frame")
        if not np.isfinite(self.values).all():
            raise ValueError("feature matrix contains non-finite values")

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class FbankConfig:
    num_mel_bins: int = 40
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    low_freq: float = 20.0
    high_freq: float | None = None
    preemphasis: float = 0.97
    remove_dc: bool = True


def _mel(f):
    return 1127.0 * np.log1p(np.asarray(f) / 700.0)


@lru_cache(maxsize=16)
def mel_filterbank(num_bins, nfft, sample_rate, low_freq, high_freq):
    """Triangular filters, equally spaced on the mel scale, over rfft bins."""
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    edges = np.linspace(_mel(low_freq), _mel(high_freq), num_bins + 2)
    m = _mel(freqs)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (m[None, :] - left) / (center - left)
    down = (right - m[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def fbank(signal, config=FbankConfig()):
    """Log-Mel filterbank energies, frames x ``num_mel_bins``; no normalization."""
    sr = signal.sample_rate
    if sr < 8000:
        raise ValueError("sample rate must be at least 8 kHz")
    win = int(round(sr * config.frame_length_ms / 1000.0))
    hop = int(round(sr * config.frame_shift_ms / 1000.0))
    x = signal.samples
    if len(x) < win:
        raise ValueError(f"signal of {len(x)} samples is shorter than one {win}-sample window")
    n_frames = (len(x) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx]
    if config.remove_dc:
        frames = frames - frames.mean(axis=1, keepdims=True)
    if config.preemphasis:
        frames = np.concatenate(
            [frames[:, :1] * (1.0 - config.preemphasis), frames[:, 1:] - config.preemphasis * frames[:, :-1]],
            axis=1)
    frames = frames * np.hamming(win)
    nfft = 1 << (win - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, nfft)) ** 2
    fb = mel_filterbank(config.num_mel_bins, nfft, sr, config.low_freq, config.high_freq or sr / 2.0)
    return FeatureMatrix(np.log(np.maximum(power @ fb.T, LOG_FLOOR)))


@dataclass(eq=False)
class SpeakerEmbedding:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or not np.isfinite(self.values).all():
            raise ValueError("embedding must be a finite vector")

    @property
    def dim(self):
        return len(self.values)


@lru_cache(maxsize=8)
def _projection(dim, stats_dim):
    """Fixed matrix with orthonormal columns (or rows, if ``dim < stats_dim``)."""
    rng = np.random.default_rng(_PROJECTION_SEED)
    a = rng.standard_normal((max(dim, stats_dim), min(dim, stats_dim)))
    q, _ = np.linalg.qr(a)
    return q if dim >= stats_dim else q.T


def speaker_embedding(enrollment, dim=EMBEDDING_DIM, config=FbankConfig()):
    """Pooled FBANK statistics of the enrollment audio, projected to ``dim``.

    Per-bin mean and standard deviation over all frames are each centred
    across bins (which removes overall level), concatenated, mapped through
    a fixed orthonormal projection and scaled to unit norm.
    """
    if not enrollment:
        raise ValueError("empty enrollment")
    feats = np.concatenate([fbank(s, config).values for s in enrollment])
    mean, std = feats.mean(axis=0), feats.std(axis=0)
    stats = np.concatenate([mean - mean.mean(), std - std.mean()])
    v = _projection(dim, len(stats)) @ stats
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("degenerate enrollment statistics")
    return SpeakerEmbedding(v / norm)


def cosine(a, b):
    a, b = np.asarray(getattr(a, "values", a)), np.asarray(getattr(b, "values", b))
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def write_feature_archive(path, matrix, utterance_id):
    """Little-endian float32 matrix plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.write_bytes(np.asarray(matrix.values, dtype="<f4").tobytes())
    meta = {"frames": matrix.frames, "dims": matrix.dims, "utterance_id": utterance_id}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_feature_archive(path):
    meta = json.loads(Path(str(path) + ".json").read_text())
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return FeatureMatrix(data.reshape(meta["frames"], meta["dims"]).astype(np.float64)), meta["utterance_id"]
