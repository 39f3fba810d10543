"""Command-line entry points.

Every command is deterministic for fixed inputs and seeds; progress goes to
stderr through :mod:`logging`, never into the written artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import toycorpus
from .audio import read_wav
from .decoder import EvalGrid, decode, format_table, grids_to_json, wer
from .experiment import ExperimentConfig, SILENCE, build_graphs, numerator_graph, run_experiment
from .features import fbank, read_feature_archive, speaker_embedding, write_feature_archive
from .graph import HmmTopology, Wfsa
from .mixer import MixtureSpec, UtteranceRecord, mix_corpus_to_dir, read_mixture_manifest
from .model import forward, load_checkpoint, make_arch, save_checkpoint
from .trainer import TrainConfig, TrainingExample, train

log = logging.getLogger("tsaux")

GRAPH_DIR = "graphs"
FEATURE_SUFFIX = ".f32"


# manifest handling

def _entries(manifest):
    """``(utterance_id, record or spec, audio path, raw line)`` for every line
    of a record or mixture manifest; paths are resolved against the manifest."""
    manifest = Path(manifest)
    out = []
    for d in read_mixture_manifest(manifest):
        if "mixture_id" in d:
            out.append((d["mixture_id"], MixtureSpec.from_json(d), manifest.parent / d["audio_path"], d))
        else:
            r = UtteranceRecord.from_json(d)
            out.append((r.utterance_id, r, manifest.parent / r.audio_path, d))
    return out


def _source_root(manifest, line):
    return Path(manifest).parent / line.get("source_root", ".")


def _features(manifest, uid, audio_path):
    """Archived features under ``features/`` next to the manifest if present,
    otherwise computed from the audio."""
    archive = Path(manifest).parent / "features" / f"{uid}{FEATURE_SUFFIX}"
    if archive.exists():
        return read_feature_archive(archive)[0].values
    return fbank(read_wav(audio_path)).values


def _clean_enrollment(records, seed):
    """For each utterance, another utterance of the same speaker."""
    by_spk = {}
    for r in records:
        by_spk.setdefault(r.speaker_id, []).append(r)
    rng = np.random.default_rng([seed, 7])
    out = {}
    for r in records:
        others = [o for o in by_spk[r.speaker_id] if o.utterance_id != r.utterance_id]
        if not others:
            raise ValueError(f"speaker {r.speaker_id} has a single utterance; no enrollment sample available")
        out[r.utterance_id] = others[int(rng.integers(len(others)))]
    return out


class _Embeddings:
    def __init__(self, root):
        self.root = Path(root)
        self.cache = {}

    def __call__(self, record):
        if record.utterance_id not in self.cache:
            sig = read_wav(self.root / record.audio_path)
            self.cache[record.utterance_id] = speaker_embedding([sig]).values
        return self.cache[record.utterance_id]


def _items(manifest, seed=0):
    """``(id, sir, features, embedding, target ids, interference ids)`` per
    manifest line; clean record manifests get SIR ``inf`` and an enrollment
    utterance drawn from the same list."""
    entries = _entries(manifest)
    records = [e[1] for e in entries if isinstance(e[1], UtteranceRecord)]
    enroll = _clean_enrollment(records, seed) if records else {}
    loaders, out = {}, []

    def embedding(root, record):
        root = Path(root)
        if root not in loaders:
            loaders[root] = _Embeddings(root)
        return loaders[root](record)

    for uid, obj, audio, line in entries:
        x = _features(manifest, uid, audio)
        if isinstance(obj, MixtureSpec):
            emb = embedding(_source_root(manifest, line), obj.target_sample)
            out.append((uid, obj.sir_db, x, emb, toycorpus.phone_ids(obj.target.transcript),
                        toycorpus.phone_ids(obj.interference.transcript)))
        else:
            emb = embedding(Path(manifest).parent, enroll[uid])
            out.append((uid, float("inf"), x, emb, toycorpus.phone_ids(obj.transcript), []))
    return out


# commands

def cmd_toy_corpus(args):
    c = ExperimentConfig()
    split = toycorpus.make_toy_split(args.num_speakers, args.utts_per_speaker, c.transcript_length_range,
                                     args.seed, heldout_utts_per_speaker=args.heldout_utts_per_speaker)
    toycorpus.write_toy_corpus(split, args.out)
    log.info("wrote %d/%d/%d utterances to %s", len(split.train), len(split.dev), len(split.eval), args.out)


def cmd_mix_corpus(args):
    path = mix_corpus_to_dir(args.manifest, args.mode, args.seed, args.out)
    log.info("wrote %s", path)


def cmd_extract_features(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for uid, _, audio, _ in _entries(args.manifest):
        m = fbank(read_wav(audio))
        write_feature_archive(out / f"{uid}{FEATURE_SUFFIX}", m, uid)
        index.append({"utterance_id": uid, "archive": f"{uid}{FEATURE_SUFFIX}", "frames": m.frames})
    with open(out / "index.jsonl", "w") as f:
        for d in index:
            f.write(json.dumps(d, sort_keys=True) + "\n")
    log.info("wrote %d feature archives to %s", len(index), out)


def _graph_config(args):
    return replace(ExperimentConfig(), states_per_phone=args.states_per_phone, lm_order=args.lm_order,
                   leaky_coefficient=args.leaky_coefficient)


def save_graphs(out_dir, topology, lm, den, dec):
    d = Path(out_dir) / GRAPH_DIR
    d.mkdir(parents=True, exist_ok=True)
    (d / "topology.json").write_text(json.dumps(asdict(topology), sort_keys=True) + "\n")
    lm.save(d / "lm.fsa")
    den.save(d / "den.fsa")
    dec.save(d / "decoding.fsa")


def load_graphs(graph_dir):
    d = Path(graph_dir)
    topology = HmmTopology(**json.loads((d / "topology.json").read_text()))
    return topology, Wfsa.load(d / "den.fsa"), Wfsa.load(d / "decoding.fsa")


def cmd_train(args):
    config = TrainConfig.from_text(Path(args.config).read_text()) if args.config else ExperimentConfig().train
    mdir = Path(args.manifest)
    clean = args.clean or not (mdir / "mixtures.jsonl").exists()
    manifest = mdir / ("train.jsonl" if clean else "mixtures.jsonl")
    items = _items(manifest, config.seed)
    ids = {}
    for uid, obj, _, _ in _entries(manifest):
        rec = obj if clean else obj.target
        ids[rec.utterance_id] = toycorpus.phone_ids(rec.transcript)
    topo, lm, den, dec = build_graphs(_graph_config(args), [ids[k] for k in sorted(ids)])
    examples = []
    for uid, _, x, emb, tgt, intf in items:
        interference = [] if clean else [numerator_graph(intf, topo, len(x), lm)]
        examples.append(TrainingExample(uid, x, emb, numerator_graph(tgt, topo, len(x), lm), interference))
    arch = make_arch(args.arch, hidden=args.hidden, depth=args.depth, num_pdfs=topo.num_pdfs,
                     num_aux=0 if clean else args.num_aux)
    if clean:
        config = replace(config, alpha=0.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graphs(out, topo, lm, den, dec)
    (out / "config.txt").write_text(config.to_text())
    result = train(examples, arch, config, den, out_dir=out, log_path=out / "train.log.jsonl")
    save_checkpoint(out / "final.mdl", arch, result.params)
    log.info("trained %d steps (%d skipped chunks); checkpoint %s", len(result.log), result.skipped,
             out / "final.mdl")


def cmd_decode(args):
    arch, params = load_checkpoint(args.checkpoint)
    graph_dir = Path(args.graphs) if args.graphs else Path(args.checkpoint).parent / GRAPH_DIR
    topo, _, dec = load_graphs(graph_dir)
    if args.branch == "aux" and not arch.num_aux:
        raise SystemExit("checkpoint has no auxiliary branch")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as f:
        for uid, sir, x, emb, _, _ in _items(args.manifest, args.seed):
            out, _ = forward(params, arch, x, emb, with_aux=args.branch == "aux")
            o = out.main_mmi if args.branch == "main" else out.aux_mmi[0]
            hyp = [toycorpus.PHONE_SET[p] for p in decode(o, dec, topo, SILENCE)]
            f.write(json.dumps({"id": uid, "sir_db": sir, "branch": args.branch, "hypothesis": hyp},
                               sort_keys=True) + "\n")


def score(hyp_path, ref_manifest):
    """WER grid of a hypothesis file against a manifest: main-branch lines
    against target transcripts, aux-branch lines against interference."""
    refs = {}
    for uid, obj, _, _ in _entries(ref_manifest):
        if isinstance(obj, MixtureSpec):
            refs[uid] = (obj.sir_db, obj.target.transcript, obj.interference.transcript)
        else:
            refs[uid] = (float("inf"), obj.transcript, ())
    reports, branch = {}, None
    with open(hyp_path) as f:
        for line in f:
            if not line.strip():
                continue
            h = json.loads(line)
            branch = h["branch"]
            sir, tgt, intf = refs[h["id"]]
            r = wer(h["hypothesis"], tgt if branch == "main" else intf)
            reports[sir] = reports[sir] + r if sir in reports else r
    ordered = dict(sorted(reports.items(), key=lambda kv: -kv[0]))
    return EvalGrid(branch or "main", ordered)


def cmd_score(args):
    grid = score(args.hyp, args.ref)
    text = json.dumps(grid.to_json(), indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_report(args):
    root = Path(args.runs)
    rows = []
    for p in sorted(root.rglob("*.score.json")):
        label = str(p.relative_to(root))[: -len(".score.json")]
        rows.append((label, EvalGrid.from_json(json.loads(p.read_text()))))
    if not rows:
        raise SystemExit(f"no *.score.json files under {root}")
    table = format_table(rows)
    (root / "report.txt").write_text(table)
    (root / "report.json").write_text(grids_to_json(rows) + "\n")
    sys.stdout.write(table)


def cmd_run_experiment(args):
    config = replace(ExperimentConfig(), corpus_seed=args.corpus_seed, num_speakers=args.num_speakers,
                     utts_per_speaker=args.utts_per_speaker, heldout_utts_per_speaker=args.heldout_utts_per_speaker,
                     hidden=args.hidden, depth=args.depth)
    if args.epochs:
        config.train = replace(config.train, epochs=args.epochs)
        config.clean_overrides = {**config.clean_overrides, "epochs": args.epochs}
    result = run_experiment(config, tuple(args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(result.table())
    (out / "report.json").write_text(json.dumps(result.to_json(), indent=1, sort_keys=True) + "\n")
    sys.stdout.write(result.table())
    log.info("experiment took %.0f s", result.seconds)


def build_parser():
    p = argparse.ArgumentParser(prog="tsaux", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("toy-corpus", help="synthesize a toy corpus (WAVs + manifests)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-speakers", type=int, default=ExperimentConfig.num_speakers)
    s.add_argument("--utts-per-speaker", type=int, default=ExperimentConfig.utts_per_speaker)
    s.add_argument("--heldout-utts-per-speaker", type=int, default=ExperimentConfig.heldout_utts_per_speaker)
    s.set_defaults(func=cmd_toy_corpus)

    s = sub.add_parser("mix-corpus", help="simulate two-speaker mixtures from an utterance manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=("train", "eval"), required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mix_corpus)

    s = sub.add_parser("extract-features", help="write FBANK feature archives for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("train", help="train a model on a mixture (or clean) manifest directory")
    s.add_argument("--config", help="flat key = value training config (default: the experiment settings)")
    s.add_argument("--manifest", required=True, help="directory with mixtures.jsonl or train.jsonl")
    s.add_argument("--arch", choices=("early", "middle", "late"), default="middle")
    s.add_argument("--out", required=True)
    s.add_argument("--clean", action="store_true", help="train a single-speaker model on train.jsonl")
    s.add_argument("--hidden", type=int, default=ExperimentConfig.hidden)
    s.add_argument("--depth", type=int, default=ExperimentConfig.depth)
    s.add_argument("--num-aux", type=int, default=1)
    s.add_argument("--states-per-phone", type=int, default=ExperimentConfig.states_per_phone)
    s.add_argument("--lm-order", type=int, default=ExperimentConfig.lm_order)
    s.add_argument("--leaky-coefficient", type=float, default=ExperimentConfig.leaky_coefficient)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", help="Viterbi-decode one branch of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--branch", choices=("main", "aux"), default="main")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--graphs", help="graph directory (default: graphs/ next to the checkpoint)")
    s.add_argument("--seed", type=int, default=0, help="enrollment draw for clean manifests")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="per-SIR phone error rates of a hypothesis file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True, help="manifest the hypotheses were decoded from")
    s.add_argument("--out", help="also write the JSON here (use NAME.score.json for report)")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("report", help="table of all *.score.json files under a directory")
    s.add_argument("--runs", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run-experiment", help="full in-memory toy experiment over several seeds")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--corpus-seed", type=int, default=0)
    s.add_argument("--num-speakers", type=int, default=ExperimentConfig.num_speakers)
    s.add_argument("--utts-per-speaker", type=int, default=ExperimentConfig.utts_per_speaker)
    s.add_argument("--heldout-utts-per-speaker", type=int, default=ExperimentConfig.heldout_utts_per_speaker)
    s.add_argument("--hidden", type=int, default=ExperimentConfig.hidden)
    s.add_argument("--depth", type=int, default=ExperimentConfig.depth)
    s.add_argument("--epochs", type=int, help="override the training epochs of every model")
    s.set_defaults(func=cmd_run_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
