"""Graph construction: HMM topology, numerator graphs, phone n-gram LM,
and the leaky denominator graph."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .wfsa import EPS, NEG_INF, GraphError, Wfsa, intersect, remove_epsilons, trim

BOS = -2
LM_SMOOTHING_K = 0.1
PRIOR_ITERATIONS = 100


@dataclass(frozen=True)
class HmmTopology:
    """Left-to-right HMM per phone; pdf of state ``j`` of phone ``p`` is ``p * states_per_phone + j``.

    With ``loop_last_only`` every state but the last is visited for exactly
    one frame, so a phone segment of a given length has a single alignment.
    """

    num_phones: int
    states_per_phone: int = 1
    self_loop_logprob: float = 0.0
    forward_logprob: float = 0.0
    loop_last_only: bool = False

    def __post_init__(self):
        if self.num_phones < 1 or self.states_per_phone < 1:
            raise ValueError("topology needs at least one phone and one state per phone")

    @property
    def num_pdfs(self):
        return self.num_phones * self.states_per_phone

    def pdf(self, phone, state=0):
        return phone * self.states_per_phone + state

    def phone_of_pdf(self, pdf):
        return pdf // self.states_per_phone


class _Builder:
    def __init__(self, topology):
        self.topo = topology
        self.num_states = 0
        self.arcs = []

    def new_state(self):
        self.num_states += 1
        return self.num_states - 1

    def phone_chain(self, entries, phone, entry_weight=0.0):
        """HMM states for one phone entered from each state in ``entries``;
        returns the first and last HMM state."""
        topo = self.topo
        first = prev = None
        for j in range(topo.states_per_phone):
            s = self.new_state()
            if prev is None:
                first = s
                for e in entries:
                    self.arcs.append((e, s, topo.pdf(phone, 0), entry_weight + topo.forward_logprob))
            else:
                self.arcs.append((prev, s, topo.pdf(phone, j), topo.forward_logprob))
            if not topo.loop_last_only or j == topo.states_per_phone - 1:
                self.arcs.append((s, s, topo.pdf(phone, j), topo.self_loop_logprob))
            prev = s
        return first, prev


def compile_numerator(transcript, topology, num_frames, lm=None, silence=None):
    """Acceptor of all monotone alignments of ``transcript`` to ``num_frames`` frames.

    :param transcript: phone ids
    :param lm: optional phone LM; when given, the alignment constraint is
        intersected with the LM-weighted topology so that numerator paths
        carry exactly the weights the (non-leaky) denominator gives them
    :param silence: optional phone id allowed as skippable leading and
        trailing segments
    """
    transcript = [int(p) for p in transcript]
    if not transcript:
        raise GraphError("empty transcript")
    if any(not 0 <= p < topology.num_phones for p in transcript):
        raise GraphError("transcript phone outside topology")
    min_frames = len(transcript) * topology.states_per_phone
    if min_frames > num_frames:
        raise GraphError(
            f"transcript needs at least {min_frames} frames but utterance has {num_frames}")
    constraint_topo = topology if lm is None else replace(topology, self_loop_logprob=0.0, forward_logprob=0.0)
    b = _Builder(constraint_topo)
    start = b.new_state()
    entries = [start]
    if silence is not None:
        entries = [start, b.phone_chain([start], silence)[1]]
    for p in transcript:
        entries = [b.phone_chain(entries, p)[1]]
    if silence is not None:
        entries = entries + [b.phone_chain(entries, silence)[1]]
    g = Wfsa.from_arcs(b.num_states, b.arcs, start, {s: 0.0 for s in entries}, topology.num_pdfs)
    if lm is not None:
        g = intersect(g, compose_lm_topology(lm, topology))
    return g


def train_phone_lm(transcripts, order=2, num_phones=None, k=LM_SMOOTHING_K):
    """Add-k smoothed phone n-gram LM as an acceptor over phone ids.

    States are histories of the previous ``order - 1`` symbols (padded with a
    begin marker); every state is final with weight 0.  Each arc weight is
    ``log (c(h, p) + k) / (c(h) + k * P)`` over ``P`` phones.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    transcripts = [[int(p) for p in t] for t in transcripts]
    if not transcripts or not any(transcripts):
        raise ValueError("empty corpus")
    if num_phones is None:
        num_phones = max(max(t) for t in transcripts if t) + 1
    n = order - 1
    counts = Counter()
    for t in transcripts:
        hist = (BOS,) * n
        for p in t:
            counts[hist, p] += 1
            hist = (hist + (p,))[1:] if n else ()
    totals = Counter()
    for (h, _), c in counts.items():
        totals[h] += c
    # all histories reachable from the all-BOS history
    histories = [(BOS,) * n]
    index = {histories[0]: 0}
    arcs = []
    i = 0
    while i < len(histories):
        h = histories[i]
        denom = totals[h] + k * num_phones
        for p in range(num_phones):
            nh = (h + (p,))[1:] if n else ()
            if nh not in index:
                index[nh] = len(histories)
                histories.append(nh)
            arcs.append((i, index[nh], p, math.log((counts[h, p] + k) / denom)))
        i += 1
    lm = Wfsa.from_arcs(len(histories), arcs, 0, {s: 0.0 for s in range(len(histories))}, num_phones)
    lm._meta["histories"] = histories
    lm._meta["order"] = order
    return lm


def lm_logprob(lm, history, phone):
    """Log P(phone | history) read off the LM acceptor; ``history`` is a
    sequence of phone ids (most recent last), padded with the begin marker."""
    n = lm._meta["order"] - 1
    h = tuple(history)[-n:] if n else ()
    h = (BOS,) * (n - len(h)) + h
    s = lm._meta["histories"].index(h)
    hit = (lm.src == s) & (lm.label == phone)
    if not hit.any():
        raise KeyError(phone)
    return float(lm.weight[hit][0])


def _lm_state_prior(lm):
    """Occupancy over LM states after PRIOR_ITERATIONS steps from the start."""
    trans = np.zeros((lm.num_states, lm.num_states))
    np.add.at(trans, (lm.src, lm.dst), np.exp(lm.weight))
    trans /= trans.sum(axis=1, keepdims=True)
    v = np.zeros(lm.num_states)
    v[lm.start] = 1.0
    for _ in range(PRIOR_ITERATIONS):
        v = v @ trans
    return v / v.sum()


def compose_lm_topology(lm, topology):
    """Expand each LM arc into the phone's HMM states.

    LM states stay as non-emitting hubs; the last HMM state of a phone
    returns to the LM state with an epsilon arc.  HMM states are shared
    between arcs with the same (destination history, phone).
    """
    if lm.num_pdfs != topology.num_phones:
        raise GraphError("LM phone set does not match topology")
    b = _Builder(topology)
    for _ in range(lm.num_states):
        b.new_state()
    chains = {}
    for s, d, p, w in lm.arcs:
        key = (d, p)
        if key not in chains:
            first, last = b.phone_chain([], p)
            b.arcs.append((last, d, EPS, 0.0))
            chains[key] = first
        b.arcs.append((s, chains[key], topology.pdf(p, 0), w + topology.forward_logprob))
    finals = {s: float(lm.final[s]) for s in range(lm.num_states) if np.isfinite(lm.final[s])}
    g = Wfsa.from_arcs(b.num_states, b.arcs, lm.start, finals, topology.num_pdfs)
    g._meta["num_lm_states"] = lm.num_states
    g._meta["lm_prior"] = _lm_state_prior(lm)
    return g


def build_denominator(phone_lm, topology, leaky_coefficient=0.1):
    """Phone LM composed with the topology, plus leaky-HMM smoothing.

    The leak is a single non-emitting hub: every emitting state may jump to
    it with weight ``log(leaky_coefficient)``, and from it every LM state is
    re-entered with the log of its stationary prior.  ``leaky_coefficient=0``
    returns the plain composition.
    """
    if not 0.0 <= leaky_coefficient < 1.0:
        raise ValueError("leaky_coefficient must lie in [0, 1)")
    g = compose_lm_topology(phone_lm, topology)
    if leaky_coefficient == 0.0:
        return g
    n_lm = g._meta["num_lm_states"]
    prior = g._meta["lm_prior"]
    hub = g.num_states
    emitting = range(n_lm, g.num_states)
    leak_out = [(s, hub, EPS, math.log(leaky_coefficient)) for s in emitting]
    leak_in = [(hub, s, EPS, math.log(prior[s])) for s in range(n_lm) if prior[s] > 0]
    arcs = g.arcs + leak_out + leak_in
    res = Wfsa.from_arcs(g.num_states + 1, arcs, g.start, g.final_log_weights, g.num_pdfs)
    res._meta.update(g._meta)
    return res


def _running_start(den, frames=100):
    """Log distribution over emitting states after ``frames`` frames of
    running the graph on flat acoustics."""
    src, dst, lab, w, es, ed, ew = den.kernel_arrays
    alpha = _kernels.forward_log(den.num_states, den.start, src, dst, lab, w, es, ed, ew,
                                 np.zeros((frames, den.num_pdfs)))[-1]
    emitting = np.zeros(den.num_states, dtype=bool)
    emitting[dst] = True
    a = np.where(emitting, alpha, NEG_INF)
    return a - np.logaddexp.reduce(a[np.isfinite(a)])


def chunk_denominator(den, at_start=True, at_end=True):
    """Denominator for a chunk cut from an utterance.

    A chunk that does not begin at the first frame may start in any emitting
    state, weighted by where the graph tends to be after running for a while;
    one that does not end at the last frame may stop in any state.
    """
    if at_start and at_end:
        return den
    arcs, start, final = list(den.arcs), den.start, den.final.copy()
    n = den.num_states
    if not at_end:
        final = np.zeros(n)
    if not at_start:
        init = _running_start(den)
        arcs += [(n, int(s), EPS, float(init[s])) for s in np.flatnonzero(np.isfinite(init))]
        start, final, n = n, np.append(final, NEG_INF), n + 1
    cols = [np.array(c) for c in zip(*arcs)]
    g = Wfsa(n, *cols, start, final, den.num_pdfs)
    g._meta.update(den._meta)
    return g


def restrict_to_span(numerator, num_frames, begin, end):
    """Numerator for frames ``[begin, end)`` of a ``num_frames``-frame utterance.

    Keeps exactly the alignments that are consistent with some full-length
    accepted alignment: paths start in any state occupied at ``begin``
    (weighted by its posterior under flat acoustics) and stop in any state
    occupied at ``end``.
    """
    if not 0 <= begin < end <= num_frames:
        raise ValueError("bad span")
    g = remove_epsilons(numerator)
    zeros = np.zeros((num_frames, g.num_pdfs))
    src, dst, lab, w, es, ed, ew = g.kernel_arrays
    alpha = _kernels.forward_log(g.num_states, g.start, src, dst, lab, w, es, ed, ew, zeros)
    beta = _kernels.backward_log(g.num_states, g.final, src, dst, lab, w, es, ed, ew, zeros)
    ok_begin = np.isfinite(alpha[begin]) & np.isfinite(beta[begin])
    ok_end = np.isfinite(alpha[end]) & np.isfinite(beta[end])
    if not ok_begin.any() or not ok_end.any():
        raise GraphError("span admits no alignment")
    # start where full alignments are at ``begin``, weighted by that posterior
    post = np.where(ok_begin, alpha[begin] + beta[begin], NEG_INF)
    post = post - np.logaddexp.reduce(post[ok_begin])
    new_start = g.num_states
    arcs = g.arcs + [(new_start, int(s), EPS, float(post[s])) for s in np.flatnonzero(ok_begin)]
    final = np.where(ok_end, 0.0, NEG_INF)
    cols = [np.array(c) for c in zip(*arcs)]
    return trim(Wfsa(g.num_states + 1, *cols, new_start, np.append(final, NEG_INF), g.num_pdfs))


__all__ = [
    "HmmTopology", "compile_numerator", "train_phone_lm", "lm_logprob", "compose_lm_topology",
    "build_denominator", "chunk_denominator", "restrict_to_span", "BOS",
]
