from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .wfsa import EPS, EmptyCompositionError, GraphError

VITERBI_REL_TOL = 1e-9
MAX_ENUMERATED_PATHS = 100_000


@dataclass
class Posteriors:
    """Per-frame pdf occupancies ``gamma`` and the log-sum over accepted paths."""

    gamma: np.ndarray
    total_log_prob: float


def _check_loglik(graph, loglik):
    loglik = np.ascontiguousarray(loglik, dtype=np.float64)
    if loglik.ndim != 2 or loglik.shape[1] != graph.num_pdfs:
        raise GraphError(f"loglik must be frames x {graph.num_pdfs}, got {loglik.shape}")
    if loglik.shape[0] < 1:
        raise GraphError("loglik has no frames")
    return loglik


def forward_backward(graph, loglik):
    """Occupancies and total log-likelihood of ``graph`` under framewise ``loglik``.

    Raises :class:`EmptyCompositionError` when no accepted path has exactly
    ``len(loglik)`` labels.
    """
    loglik = _check_loglik(graph, loglik)
    src, dst, lab, w, es, ed, ew = graph.kernel_arrays
    alpha, total = _kernels.forward(graph.num_states, graph.start, graph.final, src, dst, lab, w, es, ed, ew,
                                    loglik)
    if total != -np.inf:
        beta = _kernels.backward(graph.num_states, graph.final, src, dst, lab, w, es, ed, ew, loglik)
        gamma, ok = _kernels.occupancies(alpha, beta, src, dst, lab, w, loglik)
        if ok:
            return Posteriors(gamma, float(total))
    return _forward_backward_log(graph, loglik)


def _forward_backward_log(graph, loglik):
    src, dst, lab, w, es, ed, ew = graph.kernel_arrays
    alpha = _kernels.forward_log(graph.num_states, graph.start, src, dst, lab, w, es, ed, ew, loglik)
    total = float(np.logaddexp.reduce(alpha[-1] + graph.final))
    if total == -np.inf:
        raise EmptyCompositionError()
    beta = _kernels.backward_log(graph.num_states, graph.final, src, dst, lab, w, es, ed, ew, loglik)
    return Posteriors(_kernels.occupancies_log(alpha, beta, total, src, dst, lab, w, loglik), total)


def total_log_prob(graph, loglik):
    loglik = _check_loglik(graph, loglik)
    src, dst, lab, w, es, ed, ew = graph.kernel_arrays
    _, total = _kernels.forward(graph.num_states, graph.start, graph.final, src, dst, lab, w, es, ed, ew, loglik)
    if total == -np.inf:
        alpha = _kernels.forward_log(graph.num_states, graph.start, src, dst, lab, w, es, ed, ew, loglik)
        total = np.logaddexp.reduce(alpha[-1] + graph.final)
    return float(total)


def viterbi(graph, loglik):
    """Best-scoring accepted pdf sequence and its score.

    Ties (within a relative 1e-9) resolve to the lexicographically smallest
    label sequence.
    """
    loglik = _check_loglik(graph, loglik)
    src, dst, lab, w, es, ed, ew = graph.kernel_arrays
    labels, score = _kernels.viterbi(graph.num_states, graph.start, graph.final, src, dst, lab, w,
                                     es, ed, ew, loglik, VITERBI_REL_TOL)
    if score == -np.inf:
        raise EmptyCompositionError()
    return labels.tolist(), float(score)


def enumerate_paths(graph, num_frames, limit=MAX_ENUMERATED_PATHS):
    """Every accepted path with exactly ``num_frames`` labels, as
    ``(label tuple, graph log-weight)`` pairs, one entry per distinct path."""
    out = graph.out_arcs()
    arcs = graph.arcs
    paths = []
    stack = [(graph.start, 0, (), 0.0)]
    while stack:
        state, t, labels, weight = stack.pop()
        if t == num_frames and np.isfinite(graph.final[state]):
            paths.append((labels, weight + float(graph.final[state])))
            if len(paths) > limit:
                raise GraphError(f"more than {limit} paths; instance too large to enumerate")
        for i in reversed(out[state]):
            _, d, lab, w = arcs[i]
            if w == -np.inf:
                continue
            if lab == EPS:
                stack.append((d, t, labels, weight + w))
            elif t < num_frames:
                stack.append((d, t + 1, labels + (lab,), weight + w))
    return paths


def path_scores(paths, loglik):
    """Graph weight plus acoustic score for each enumerated path."""
    loglik = np.asarray(loglik)
    frames = np.arange(loglik.shape[0])
    return np.array([w + loglik[frames, list(labels)].sum() for labels, w in paths])
