"""Random instances and independent reference implementations for tests."""

from __future__ import annotations

import itertools
import math
from pathlib import Path

import numpy as np

from tsaux.cli import main
from tsaux.graph import EPS, Wfsa, enumerate_paths


def random_graph(rng, num_pdfs=3, max_states=5, eps_prob=0.3, frames=None):
    """Random acceptor with acyclic epsilon arcs (they only go to higher
    states).  With ``frames`` given, retries until some path of that length
    is accepted."""
    while True:
        n = int(rng.integers(2, max_states + 1))
        arcs = []
        for s in range(n):
            for _ in range(int(rng.integers(1, 4))):
                arcs.append((s, int(rng.integers(n)), int(rng.integers(num_pdfs)), float(rng.normal())))
            if s + 1 < n and rng.random() < eps_prob:
                arcs.append((s, int(rng.integers(s + 1, n)), EPS, float(rng.normal())))
        k = int(rng.integers(1, n + 1))
        finals = {int(s): float(rng.normal()) for s in rng.choice(n, size=k, replace=False)}
        g = Wfsa.from_arcs(n, arcs, 0, finals, num_pdfs)
        if frames is None or enumerate_paths(g, frames):
            return g


def _closure(graph, vec):
    """Push log-mass through epsilon arcs (acyclic), delta by delta."""
    eps = {}
    for s, d, lab, w in graph.arcs:
        if lab == EPS:
            eps.setdefault(s, []).append((d, w))
    out = dict(vec)
    stack = list(vec.items())
    while stack:
        s, v = stack.pop()
        for d, w in eps.get(s, ()):
            out[d] = np.logaddexp(out.get(d, -math.inf), v + w)
            stack.append((d, v + w))
    return out


def sequence_log_weight(graph, labels):
    """Log-sum of graph weights over every path emitting ``labels``."""
    vec = _closure(graph, {graph.start: 0.0})
    for lab in labels:
        nxt = {}
        for s, d, l, w in graph.arcs:
            if l == lab and s in vec:
                nxt[d] = np.logaddexp(nxt.get(d, -math.inf), vec[s] + w)
        vec = _closure(graph, nxt)
    tot = -math.inf
    for s, v in vec.items():
        tot = np.logaddexp(tot, v + graph.final[s])
    return float(tot)


def brute_force_total(graph, loglik):
    """Log-sum over all label sequences of length T, scored one by one."""
    T, P = loglik.shape
    tot = -math.inf
    for seq in itertools.product(range(P), repeat=T):
        w = sequence_log_weight(graph, seq)
        if w > -math.inf:
            tot = np.logaddexp(tot, w + sum(loglik[t, s] for t, s in enumerate(seq)))
    return float(tot)


def brute_force_occupancy(graph, loglik):
    """Posterior pdf occupancy per frame from the enumerated sequences."""
    T, P = loglik.shape
    scores = {}
    for seq in itertools.product(range(P), repeat=T):
        w = sequence_log_weight(graph, seq)
        if w > -math.inf:
            scores[seq] = w + sum(loglik[t, s] for t, s in enumerate(seq))
    tot = np.logaddexp.reduce(list(scores.values()))
    gamma = np.zeros((T, P))
    for seq, s in scores.items():
        p = math.exp(s - tot)
        for t, lab in enumerate(seq):
            gamma[t, lab] += p
    return gamma


def central_difference(f, x, step=1e-3, coords=None):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    coords = range(flat.size) if coords is None else coords
    g = np.zeros(flat.size)
    for i in coords:
        old = flat[i]
        flat[i] = old + step
        up = f(x)
        flat[i] = old - step
        down = f(x)
        flat[i] = old
        g[i] = (up - down) / (2 * step)
    return g.reshape(x.shape)


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


TINY_CORPUS = ["--num-speakers", "4", "--utts-per-speaker", "4", "--heldout-utts-per-speaker", "2"]
TINY_MODEL = ["--hidden", "8", "--depth", "3"]
TINY_TRAIN = "epochs = 1\nminibatch_size = 4\nchunk_width = 40\n"


def run_cli_pipeline(root):
    """Run every command of the ``tsaux`` program on a tiny corpus under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "train.cfg").write_text(TINY_TRAIN)
    steps = [
        ["toy-corpus", "--out", root / "corpus", "--seed", "5", *TINY_CORPUS],
        ["mix-corpus", "--manifest", root / "corpus/train.jsonl", "--mode", "train", "--seed", "5",
         "--out", root / "mix_train"],
        ["mix-corpus", "--manifest", root / "corpus/eval.jsonl", "--mode", "eval", "--seed", "5",
         "--out", root / "mix_eval"],
        ["extract-features", "--manifest", root / "mix_train/mixtures.jsonl", "--out", root / "mix_train/features"],
        ["train", "--config", root / "train.cfg", "--manifest", root / "mix_train", "--out", root / "model",
         *TINY_MODEL],
        ["train", "--config", root / "train.cfg", "--manifest", root / "corpus", "--clean",
         "--out", root / "clean_model", *TINY_MODEL],
        ["decode", "--checkpoint", root / "model/final.mdl", "--branch", "main",
         "--manifest", root / "mix_eval/mixtures.jsonl", "--out", root / "main.hyp.jsonl"],
        ["decode", "--checkpoint", root / "model/final.mdl", "--branch", "aux",
         "--manifest", root / "mix_eval/mixtures.jsonl", "--out", root / "aux.hyp.jsonl"],
        ["decode", "--checkpoint", root / "clean_model/final.mdl", "--manifest", root / "corpus/eval.jsonl",
         "--out", root / "clean.hyp.jsonl"],
        ["score", "--hyp", root / "main.hyp.jsonl", "--ref", root / "mix_eval/mixtures.jsonl",
         "--out", root / "runs/main.score.json"],
        ["score", "--hyp", root / "aux.hyp.jsonl", "--ref", root / "mix_eval/mixtures.jsonl",
         "--out", root / "runs/aux.score.json"],
        ["report", "--runs", root / "runs"],
        ["run-experiment", "--out", root / "experiment", "--seeds", "0", "1", *TINY_CORPUS, *TINY_MODEL,
         "--epochs", "1"],
    ]
    (root / "runs").mkdir(exist_ok=True)
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return root


def tree_bytes(root):
    """Relative path to file contents for every file under ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
