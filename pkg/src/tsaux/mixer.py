"""Two-speaker mixture simulation.

Each entry of a main list is paired with an utterance of a different
speaker, mixed at a chosen signal-to-interference ratio and (for training
data) volume-perturbed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioSignal, read_wav, write_wav

EVAL_SIRS = (10.0, 5.0, 0.0, -5.0, -10.0)
TRAIN_SIR_RANGE = (-10.0, 10.0)
VOLUME_GAIN_RANGE = (0.25, 2.0)
MAX_PAIRING_ATTEMPTS = 1000


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    audio_path: str
    transcript: tuple

    def __post_init__(self):
        object.__setattr__(self, "transcript", tuple(self.transcript))
        if not self.transcript:
            raise ValueError(f"{self.utterance_id}: empty transcript")

    def to_json(self):
        d = asdict(self)
        d["transcript"] = list(self.transcript)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(d["utterance_id"], d["speaker_id"], d["audio_path"], tuple(d["transcript"]))


@dataclass(frozen=True)
class MixtureSpec:
    mixture_id: str
    target: UtteranceRecord
    interference: UtteranceRecord
    sir_db: float
    volume_gain: float
    target_sample: UtteranceRecord

    def __post_init__(self):
        if self.target.speaker_id == self.interference.speaker_id:
            raise ValueError(f"{self.mixture_id}: target and interference share a speaker")
        if self.target_sample.speaker_id != self.target.speaker_id:
            raise ValueError(f"{self.mixture_id}: enrollment sample from another speaker")
        if self.target_sample.utterance_id == self.target.utterance_id:
            raise ValueError(f"{self.mixture_id}: enrollment sample is the target utterance")
        if not self.volume_gain > 0:
            raise ValueError("volume_gain must be positive")

    def to_json(self, audio_path=None):
        d = {
            "mixture_id": self.mixture_id,
            "target": self.target.to_json(),
            "interference": self.interference.to_json(),
            "sir_db": self.sir_db,
            "volume_gain": self.volume_gain,
            "target_sample": self.target_sample.to_json(),
        }
        if audio_path is not None:
            d["audio_path"] = audio_path
        return d

    @classmethod
    def from_json(cls, d):
        return cls(
            d["mixture_id"], UtteranceRecord.from_json(d["target"]),
            UtteranceRecord.from_json(d["interference"]), float(d["sir_db"]),
            float(d["volume_gain"]), UtteranceRecord.from_json(d["target_sample"]),
        )


def build_pairs(main_list, rng_seed):
    """Pair every record with a record of a different speaker.

    The second list is a permutation of the main list.  Each attempt shuffles
    and then repairs same-speaker lines by swapping partners; after
    ``MAX_PAIRING_ATTEMPTS`` failed attempts a :class:`PairingError` is raised.
    """
    n = len(main_list)
    speakers = np.array([r.speaker_id for r in main_list])
    _, counts = np.unique(speakers, return_counts=True)
    if len(counts) < 2:
        raise PairingError("pairing needs at least two distinct speakers")
    if counts.max() * 2 > n:
        raise PairingError("infeasible pairing: one speaker owns more than half of the list")
    rng = np.random.default_rng(rng_seed)
    for _ in range(MAX_PAIRING_ATTEMPTS):
        perm = rng.permutation(n)
        if _repair(perm, speakers, rng):
            return [(main_list[i], main_list[j]) for i, j in enumerate(perm.tolist())]
    raise PairingError(f"no valid pairing found in {MAX_PAIRING_ATTEMPTS} attempts")


def _repair(perm, speakers, rng):
    n = len(perm)
    for i in np.flatnonzero(speakers == speakers[perm]).tolist():
        if speakers[i] != speakers[perm[i]]:
            continue
        for j in rng.permutation(n).tolist():
            if speakers[perm[j]] != speakers[i] and speakers[perm[i]] != speakers[j]:
                perm[i], perm[j] = perm[j], perm[i]
                break
        else:
            return False
    return not (speakers == speakers[perm]).any()


def _power(x):
    p = float(np.mean(np.square(x)))
    if p <= 0.0:
        raise ValueError("signal has zero power")
    return p


def mix_components(target, interference, sir_db):
    """Target and gain-scaled interference, both unpadded.

    The gain is ``sqrt(P_tgt / (P_int * 10**(sir_db / 10)))`` with powers
    measured over each signal's own extent.
    """
    if target.sample_rate != interference.sample_rate:
        raise ValueError("sample rates differ")
    g = np.sqrt(_power(target.samples) / (_power(interference.samples) * 10.0 ** (sir_db / 10.0)))
    return target, AudioSignal(interference.samples * g, interference.sample_rate)


def mix_at_sir(target, interference, sir_db):
    tgt, intf = mix_components(target, interference, sir_db)
    n = max(len(tgt), len(intf))
    out = np.zeros(n)
    out[: len(tgt)] += tgt.samples
    out[: len(intf)] += intf.samples
    return AudioSignal(out, target.sample_rate)


def measure_sir(target_component, interference_component):
    return 10.0 * np.log10(_power(target_component.samples) / _power(interference_component.samples))


def sample_training_sir(rng):
    return float(rng.uniform(*TRAIN_SIR_RANGE))


def draw_volume_gain(rng, gain_range=VOLUME_GAIN_RANGE):
    lo, hi = gain_range
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def volume_perturb(signal, rng, gain_range=VOLUME_GAIN_RANGE):
    return signal.scaled(draw_volume_gain(rng, gain_range))


@dataclass
class MixedCorpus:
    specs: list
    audio: dict = field(default_factory=dict)

    def manifest_lines(self, audio_dir="mixtures"):
        return [
            json.dumps(s.to_json(f"{audio_dir}/{s.mixture_id}.wav"), sort_keys=True) for s in self.specs
        ]


def generate_corpus(main_list, mode, rng_seed, load_audio=None, gain_range=VOLUME_GAIN_RANGE):
    """Mixture specs for a main list, rendered when ``load_audio`` is given.

    ``train`` draws one SIR per line and perturbs the mixture volume; ``eval``
    replicates the list once per SIR of the evaluation grid at unit volume.
    The enrollment sample is a random other utterance of the target speaker.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    by_speaker = {}
    for r in main_list:
        by_speaker.setdefault(r.speaker_id, []).append(r)
    for spk, recs in by_speaker.items():
        if len(recs) < 2:
            raise ValueError(f"speaker {spk} has a single utterance; no enrollment sample available")
    pairs = build_pairs(main_list, rng_seed)
    rng = np.random.default_rng([rng_seed, 1])
    enroll = []
    for tgt, _ in pairs:
        others = [r for r in by_speaker[tgt.speaker_id] if r.utterance_id != tgt.utterance_id]
        enroll.append(others[int(rng.integers(len(others)))])
    specs = []
    if mode == "train":
        for k, ((tgt, intf), smp) in enumerate(zip(pairs, enroll)):
            sir = sample_training_sir(rng)
            gain = draw_volume_gain(rng, gain_range)
            specs.append(MixtureSpec(f"m{k:05d}_{tgt.utterance_id}", tgt, intf, sir, gain, smp))
    else:
        for sir in EVAL_SIRS:
            for k, ((tgt, intf), smp) in enumerate(zip(pairs, enroll)):
                specs.append(MixtureSpec(f"sir{sir:+03.0f}_m{k:05d}_{tgt.utterance_id}",
                                         tgt, intf, sir, 1.0, smp))
    corpus = MixedCorpus(specs)
    if load_audio is not None:
        for s in specs:
            corpus.audio[s.mixture_id] = render_mixture(s, load_audio)
    return corpus


def render_mixture(spec, load_audio):
    return mix_at_sir(load_audio(spec.target), load_audio(spec.interference), spec.sir_db).scaled(
        spec.volume_gain)


def read_records(path):
    with open(path) as f:
        return [UtteranceRecord.from_json(json.loads(line)) for line in f if line.strip()]


def write_records(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_mixture_manifest(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def wav_loader(root):
    root = Path(root)
    cache = {}

    def load(record):
        if record.utterance_id not in cache:
            cache[record.utterance_id] = read_wav(root / record.audio_path)
        return cache[record.utterance_id]

    return load


def mix_corpus_to_dir(manifest, mode, seed, out_dir):
    """Render a mixture corpus to ``out_dir``: WAVs under ``mixtures/`` and a
    JSON-lines manifest whose paths are relative to ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "mixtures").mkdir(parents=True, exist_ok=True)
    src_root = Path(manifest).parent
    corpus = generate_corpus(read_records(manifest), mode, seed, load_audio=wav_loader(src_root))
    source_rel = os.path.relpath(src_root.resolve(), out_dir.resolve())
    with open(out_dir / "mixtures.jsonl", "w") as f:
        for s in corpus.specs:
            d = s.to_json(f"mixtures/{s.mixture_id}.wav")
            d["source_root"] = source_rel
            f.write(json.dumps(d, sort_keys=True) + "\n")
            write_wav(out_dir / "mixtures" / f"{s.mixture_id}.wav", corpus.audio[s.mixture_id])
    return out_dir / "mixtures.jsonl"
