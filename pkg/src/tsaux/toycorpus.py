"""Synthetic speakers and utterances for desk-scale experiments.

A phone is rendered as the harmonics of the speaker's fundamental that fall
near the phone's formant centres; each speaker scales the formant table by
a vocal-tract factor, so the same phone sounds different per speaker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioSignal, write_wav
from .mixer import UtteranceRecord, write_records

PHONES = ("a", "e", "i", "o", "u", "m", "n", "l")
SILENCE = "sil"
PHONE_SET = PHONES + (SILENCE,)

# (F1, F2, F3) in Hz before speaker scaling
BASE_FORMANTS = {
    "a": (730, 1090, 2440),
    "e": (530, 1840, 2480),
    "i": (270, 2290, 3010),
    "o": (570, 840, 2410),
    "u": (300, 870, 2240),
    "m": (250, 1200, 2200),
    "n": (260, 1700, 2600),
    "l": (360, 1300, 2900),
}
# phone-independent fourth resonance; scaled by the speaker's warp like the others
SPEAKER_FORMANT = 3500.0
FORMANT_GAINS = (1.0, 0.5, 1.0 / 3.0, 0.5)
FORMANT_BANDWIDTH = 90.0
SAMPLE_RATE = 16000
FRAME_SHIFT = 160
SPEECH_RMS = 0.05
NOISE_RMS = 5e-4
F0_RANGE = (90.0, 260.0)
WARP_RANGE = (0.7, 1.45)
RATE_RANGE = (8.0, 13.0)
DURATION_JITTER = 0.3
SILENCE_FRAMES = (10, 25)


def phone_id(symbol):
    return PHONE_SET.index(symbol)


def phone_ids(symbols):
    return [PHONE_SET.index(s) for s in symbols]


@dataclass(frozen=True)
class ToySpeaker:
    speaker_id: str
    f0: float
    warp: float
    rate: float
    formants: dict = field(repr=False, hash=False, compare=False)


def _spread(n, draw, far_enough, max_draws=100000):
    out = []
    for _ in range(max_draws):
        if len(out) == n:
            break
        x = draw()
        if all(far_enough(x, y) for y in out):
            out.append(x)
    if len(out) < n:
        raise ValueError(f"could not draw {n} sufficiently distinct speaker parameters")
    return out


def make_speakers(num_speakers, rng, prefix="spk", min_f0_gap=2.0, min_warp_ratio=1.005):
    """Speakers whose fundamentals differ pairwise by at least ``min_f0_gap``
    Hz and whose vocal-tract warps differ by at least ``min_warp_ratio``."""
    f0s = _spread(num_speakers, lambda: float(rng.uniform(*F0_RANGE)), lambda a, b: abs(a - b) >= min_f0_gap)
    warps = _spread(num_speakers, lambda: float(rng.uniform(*WARP_RANGE)),
                    lambda a, b: max(a, b) / min(a, b) >= min_warp_ratio)
    speakers = []
    for i, (f0, warp) in enumerate(zip(f0s, warps)):
        rate = float(rng.uniform(*RATE_RANGE))
        formants = {p: tuple(warp * f for f in BASE_FORMANTS[p] + (SPEAKER_FORMANT,)) for p in PHONES}
        speakers.append(ToySpeaker(f"{prefix}{i:02d}", f0, warp, rate, formants))
    return speakers


def _ramp(n, sr):
    r = min(n // 2, int(0.005 * sr))
    env = np.ones(n)
    if r > 0:
        w = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = w
        env[n - r:] = w[::-1]
    return env


def _phone_segment(speaker, phone, n, rng, sr):
    t = np.arange(n) / sr
    f0 = speaker.f0 * (1.0 + 0.01 * rng.standard_normal())
    out = np.zeros(n)
    bw = FORMANT_BANDWIDTH * speaker.warp
    for k, fc in enumerate(speaker.formants[phone]):
        lo = max(1, int(np.floor((fc - 3 * bw) / f0)))
        hi = int(np.ceil((fc + 3 * bw) / f0))
        for h in range(lo, hi + 1):
            f = h * f0
            if f >= sr / 2:
                break
            amp = np.exp(-0.5 * ((f - fc) / bw) ** 2) * FORMANT_GAINS[k]
            out += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return out * _ramp(n, sr)


def synth_utterance(speaker, transcript, rng, sample_rate=SAMPLE_RATE, silence_frames=SILENCE_FRAMES):
    """Phones as formant-shaped harmonic segments between short silences,
    plus low-level white noise.  Returns the audio and per-phone frame spans."""
    for p in transcript:
        if p not in BASE_FORMANTS:
            raise ValueError(f"unknown phone {p!r}")
    hop = sample_rate * FRAME_SHIFT // SAMPLE_RATE
    lead = int(rng.integers(silence_frames[0], silence_frames[1] + 1)) * hop
    trail = int(rng.integers(silence_frames[0], silence_frames[1] + 1)) * hop
    pieces = [np.zeros(lead)]
    spans = []
    pos = lead
    for p in transcript:
        frames = max(3, int(round(speaker.rate * (1.0 + DURATION_JITTER * rng.uniform(-1, 1)))))
        seg = _phone_segment(speaker, p, frames * hop, rng, sample_rate)
        pieces.append(seg)
        spans.append((pos // hop, (pos + len(seg)) // hop))
        pos += len(seg)
    pieces.append(np.zeros(trail))
    x = np.concatenate(pieces)
    speech = x[lead:len(x) - trail]
    x *= SPEECH_RMS / np.sqrt(np.mean(speech ** 2))
    x += NOISE_RMS * rng.standard_normal(len(x))
    return AudioSignal(x, sample_rate), spans


def random_transcript(rng, length_range):
    n = int(rng.integers(length_range[0], length_range[1] + 1))
    out = [PHONES[int(rng.integers(len(PHONES)))]]
    while len(out) < n:
        p = PHONES[int(rng.integers(len(PHONES)))]
        if p != out[-1]:
            out.append(p)
    return tuple(out)


@dataclass
class ToySplit:
    speakers: dict
    train: list
    dev: list
    eval: list
    audio: dict
    spans: dict = field(default_factory=dict)

    def load(self, record):
        return self.audio[record.utterance_id]

    def frame_labels(self, record, num_frames, silence=None):
        """Per-frame phone ids from the synthesis spans, ``silence`` elsewhere."""
        silence = phone_id(SILENCE) if silence is None else silence
        lab = np.full(num_frames, silence, dtype=np.int64)
        for p, (b, e) in zip(phone_ids(record.transcript), self.spans[record.utterance_id]):
            lab[b:min(e, num_frames)] = p
        return lab


def _utterances(speaker, count, rng, length_range, tag, silence_frames):
    recs, audio, spans = [], {}, {}
    for u in range(count):
        uid = f"{speaker.speaker_id}-{tag}{u:03d}"
        transcript = random_transcript(rng, length_range)
        sig, spans[uid] = synth_utterance(speaker, transcript, rng, silence_frames=silence_frames)
        recs.append(UtteranceRecord(uid, speaker.speaker_id, f"wav/{uid}.wav", transcript))
        audio[uid] = sig
    return recs, audio, spans


def make_toy_split(num_speakers=16, utts_per_speaker=50, transcript_length_range=(6, 12), seed=0,
                   num_heldout_speakers=4, heldout_utts_per_speaker=12, unseen_heldout=True,
                   silence_frames=SILENCE_FRAMES):
    """Train/dev/eval utterance lists with audio.

    The training list holds ``num_speakers * utts_per_speaker`` utterances.
    Dev and eval each use ``num_heldout_speakers`` speakers, which are unseen
    in training unless ``unseen_heldout`` is false.
    """
    if num_speakers < 4:
        raise ValueError("need at least 4 speakers")
    rng = np.random.default_rng(seed)
    n_new = num_speakers + (2 * num_heldout_speakers if unseen_heldout else 0)
    speakers = make_speakers(n_new, rng)
    train_spk = speakers[:num_speakers]
    if unseen_heldout:
        dev_spk = speakers[num_speakers:num_speakers + num_heldout_speakers]
        eval_spk = speakers[num_speakers + num_heldout_speakers:]
    else:
        dev_spk = eval_spk = train_spk[:num_heldout_speakers]
    train, dev, ev, audio, spans = [], [], [], {}, {}
    for i, spk in enumerate(train_spk):
        recs, a, sp = _utterances(spk, utts_per_speaker, np.random.default_rng([seed, 1, i]),
                                  transcript_length_range, "tr", silence_frames)
        train += recs
        audio.update(a)
        spans.update(sp)
    for name, group, out in (("dv", dev_spk, dev), ("ev", eval_spk, ev)):
        for i, spk in enumerate(group):
            recs, a, sp = _utterances(spk, heldout_utts_per_speaker,
                                      np.random.default_rng([seed, 2 if name == "dv" else 3, i]),
                                      transcript_length_range, name, silence_frames)
            out += recs
            audio.update(a)
            spans.update(sp)
    return ToySplit({s.speaker_id: s for s in speakers}, train, dev, ev, audio, spans)


def write_toy_corpus(split, out_dir):
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "eval"):
        recs = getattr(split, name)
        write_records(out_dir / f"{name}.jsonl", recs)
        for r in recs:
            write_wav(out_dir / r.audio_path, split.audio[r.utterance_id])
    spk = {s.speaker_id: {"f0": s.f0, "warp": s.warp, "rate": s.rate} for s in split.speakers.values()}
    (out_dir / "speakers.json").write_text(json.dumps(spk, indent=1, sort_keys=True) + "\n")
