from __future__ import annotations

import logging
import wave
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(eq=False)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or len(self.samples) < 1:
            raise ValueError("audio must be a non-empty 1-D sample array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ValueError("audio contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    @property
    def power(self):
        return float(np.mean(self.samples ** 2))

    def scaled(self, gain):
        return AudioSignal(self.samples * gain, self.sample_rate)


def write_wav(path, signal):
    """16-bit little-endian mono PCM.  Samples outside [-1, 1] are clipped."""
    x = signal.samples
    peak = np.abs(x).max()
    if peak > 1.0:
        log.warning("clipping %s (peak %.3f)", path, peak)
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(signal.sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return AudioSignal(pcm.astype(np.float64) / 32767.0, rate)
