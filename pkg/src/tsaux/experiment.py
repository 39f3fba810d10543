"""End-to-end toy experiment: corpus, mixtures, features, graphs, training
and SIR-grid evaluation, all in memory."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import toycorpus
from .decoder import EvalGrid, EvalItem, decode, eval_grid, format_table, wer
from .features import fbank, speaker_embedding
from .graph import HmmTopology, build_denominator, compile_numerator, compose_lm_topology, train_phone_lm
from .mixer import generate_corpus
from .model import forward, make_arch
from .trainer import TrainConfig, TrainingExample, train

log = logging.getLogger(__name__)

SILENCE = toycorpus.phone_id(toycorpus.SILENCE)


@dataclass
class ExperimentConfig:
    corpus_seed: int = 0
    num_speakers: int = 40
    utts_per_speaker: int = 20
    heldout_utts_per_speaker: int = 12
    transcript_length_range: tuple = (6, 12)
    silence_frames: tuple = toycorpus.SILENCE_FRAMES
    states_per_phone: int = 3
    loop_last_only: bool = True
    lm_order: int = 2
    leaky_coefficient: float = 0.1
    hidden: int = 64
    depth: int = 6
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=12, minibatch_size=4, chunk_width=float("inf"), optimizer="adam", lr_start=0.002,
        lr_end=0.0002))
    # the clean model converges with fewer, larger steps
    clean_overrides: dict = field(default_factory=lambda: {"epochs": 8, "minibatch_size": 8})


@dataclass
class Workspace:
    config: ExperimentConfig
    split: object
    topology: HmmTopology
    lm: object
    denominator: object
    decoding_graph: object
    mixed_train: list
    clean_train: list
    eval_items: list
    clean_eval_items: list

    def arch(self, preset="middle", num_aux=1):
        c = self.config
        return make_arch(preset, hidden=c.hidden, depth=c.depth, num_pdfs=self.topology.num_pdfs,
                         num_aux=num_aux)


def _with_silence(transcript):
    return [SILENCE] + list(transcript) + [SILENCE]


def build_graphs(config, train_transcripts):
    """Topology, phone LM, denominator and decoding graph from training
    transcripts (phone ids); the LM sees each transcript padded with silence."""
    c = config
    topo = HmmTopology(len(toycorpus.PHONE_SET), c.states_per_phone, loop_last_only=c.loop_last_only)
    lm = train_phone_lm([_with_silence(t) for t in train_transcripts], c.lm_order, topo.num_phones)
    return topo, lm, build_denominator(lm, topo, c.leaky_coefficient), compose_lm_topology(lm, topo)


def numerator_graph(transcript, topology, num_frames, lm):
    return compile_numerator(transcript, topology, num_frames, lm=lm, silence=SILENCE)


def prepare(config=ExperimentConfig()):
    """Generate the toy corpus and all in-memory training and eval data."""
    c = config
    split = toycorpus.make_toy_split(c.num_speakers, c.utts_per_speaker, c.transcript_length_range,
                                     c.corpus_seed, heldout_utts_per_speaker=c.heldout_utts_per_speaker,
                                     silence_frames=c.silence_frames)
    ids = {r.utterance_id: toycorpus.phone_ids(r.transcript) for r in split.train + split.dev + split.eval}
    topo, lm, den, dec = build_graphs(c, [ids[r.utterance_id] for r in split.train])

    emb_cache = {}

    def embedding(rec):
        if rec.utterance_id not in emb_cache:
            emb_cache[rec.utterance_id] = speaker_embedding([split.load(rec)]).values
        return emb_cache[rec.utterance_id]

    def numerator(rec, frames):
        return numerator_graph(ids[rec.utterance_id], topo, frames, lm)

    mixed = generate_corpus(split.train, "train", c.corpus_seed, load_audio=split.load)
    mixed_train = []
    for s in mixed.specs:
        x = fbank(mixed.audio[s.mixture_id]).values
        mixed_train.append(TrainingExample(
            s.mixture_id, x, embedding(s.target_sample), numerator(s.target, len(x)),
            [numerator(s.interference, len(x))]))

    rng = np.random.default_rng([c.corpus_seed, 7])
    by_spk = {}
    for r in split.train + split.eval:
        by_spk.setdefault(r.speaker_id, []).append(r)

    def other_utt(rec):
        others = [o for o in by_spk[rec.speaker_id] if o.utterance_id != rec.utterance_id]
        return others[int(rng.integers(len(others)))]

    clean_train = []
    for r in split.train:
        x = fbank(split.load(r)).values
        clean_train.append(TrainingExample(r.utterance_id, x, embedding(other_utt(r)), numerator(r, len(x))))

    ev = generate_corpus(split.eval, "eval", c.corpus_seed, load_audio=split.load)
    eval_items = [
        EvalItem(s.mixture_id, s.sir_db, fbank(ev.audio[s.mixture_id]).values, embedding(s.target_sample),
                 ids[s.target.utterance_id], ids[s.interference.utterance_id])
        for s in ev.specs
    ]
    clean_eval_items = [
        EvalItem(r.utterance_id, float("inf"), fbank(split.load(r)).values, embedding(other_utt(r)),
                 ids[r.utterance_id], [])
        for r in split.eval
    ]
    return Workspace(config, split, topo, lm, den, dec, mixed_train, clean_train, eval_items, clean_eval_items)


def train_model(ws, preset="middle", alpha=1.0, seed=0, clean=False, num_aux=None, **overrides):
    """Train one model; clean models have no auxiliary branch."""
    if num_aux is None:
        num_aux = 0 if clean else 1
    arch = ws.arch(preset, num_aux)
    cfg = replace(ws.config.train, alpha=alpha if num_aux else 0.0, seed=seed, **overrides)
    data = ws.clean_train if clean else ws.mixed_train
    result = train(data, arch, cfg, ws.denominator)
    return arch, result


def evaluate(ws, arch, params, branch="main", items=None):
    items = ws.eval_items if items is None else items
    return eval_grid(arch, params, items, ws.decoding_graph, ws.topology, branch, silence=SILENCE)


def evaluate_clean(ws, arch, params):
    """Pooled WER of the main branch on the clean eval utterances."""
    total = None
    for it in ws.clean_eval_items:
        out, _ = forward(params, arch, it.features, it.embedding, with_aux=False)
        r = wer(decode(out.main_mmi, ws.decoding_graph, ws.topology, SILENCE), it.target_transcript)
        total = r if total is None else total + r
    return total


def pool_grids(grids):
    """Sum the per-condition error counts of several grids over the same eval set."""
    first = grids[0]
    conditions = {}
    for g in grids:
        for sir, r in g.conditions.items():
            conditions[sir] = conditions[sir] + r if sir in conditions else r
    return EvalGrid(first.branch, conditions, any(g.incomplete for g in grids))


@dataclass
class ExperimentResult:
    """Per-seed grids keyed by run label, plus the clean-model gate."""

    seeds: tuple
    grids: dict
    clean_wer: float
    clean_on_mixtures: EvalGrid
    seconds: float = 0.0

    def pooled(self, label):
        return pool_grids(self.grids[label])

    @property
    def relative_reduction(self):
        """Relative grid-average WER reduction of the auxiliary-loss model, in percent."""
        base, prop = self.pooled("middle alpha=0").average, self.pooled("middle alpha=1").average
        return 100.0 * (base - prop) / base

    def table(self):
        rows = [(label, self.pooled(label)) for label in self.grids]
        rows.append(("clean model", self.clean_on_mixtures))
        text = format_table(rows)
        text += f"clean model on clean eval: {self.clean_wer:.2f}\n"
        text += f"relative reduction (middle alpha=1 vs alpha=0): {self.relative_reduction:.2f}%\n"
        return text

    def to_json(self):
        return {
            "seeds": list(self.seeds),
            "runs": {label: [g.to_json() for g in gs] for label, gs in self.grids.items()},
            "pooled": {label: self.pooled(label).to_json() for label in self.grids},
            "clean_wer": self.clean_wer,
            "clean_on_mixtures": self.clean_on_mixtures.to_json(),
            "relative_reduction": self.relative_reduction,
        }


RUNS = (("middle alpha=0", "middle", 0.0), ("middle alpha=1", "middle", 1.0), ("early alpha=1", "early", 1.0))


def run_experiment(config=ExperimentConfig(), seeds=(0, 1, 2), workspace=None):
    """Baseline, auxiliary-loss and early-split models over ``seeds``, the
    auxiliary branch scored against interference transcripts, and a clean
    model trained with the first seed."""
    t0 = time.perf_counter()
    ws = prepare(config) if workspace is None else workspace
    grids = {label: [] for label, _, _ in RUNS}
    grids["middle alpha=1 (aux vs interference)"] = []
    for seed in seeds:
        for label, preset, alpha in RUNS:
            arch, res = train_model(ws, preset, alpha, seed)
            grids[label].append(evaluate(ws, arch, res.params))
            log.info("%s seed %d: avg %.2f", label, seed, grids[label][-1].average)
            if label == "middle alpha=1":
                grids["middle alpha=1 (aux vs interference)"].append(evaluate(ws, arch, res.params, "aux"))
    arch, res = train_model(ws, "middle", 0.0, seeds[0], clean=True, **ws.config.clean_overrides)
    clean = evaluate_clean(ws, arch, res.params).wer
    on_mix = evaluate(ws, arch, res.params)
    return ExperimentResult(tuple(seeds), grids, clean, on_mix, time.perf_counter() - t0)
