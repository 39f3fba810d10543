"""LF-MMI, CE regularization, the interference-speaker auxiliary loss with
permutation-invariant assignment, and their combination."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.special import log_softmax, softmax

from .graph import forward_backward, viterbi

MAX_PIT_BRANCHES = 4


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    ce_scale: float = 0.1
    l2_scale: float = 0.00005

    def __post_init__(self):
        for name in ("alpha", "ce_scale", "l2_scale"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def lfmmi(outputs, numerator, denominator):
    """Loss ``-(log Z_num - log Z_den)`` and its gradient ``gamma_den - gamma_num``.

    Raises :class:`~tsaux.graph.EmptyCompositionError` if the numerator has
    no path of the right length; callers skip such utterances.
    """
    o = _values(outputs)
    num = forward_backward(numerator, o)
    den = forward_backward(denominator, o)
    return den.total_log_prob - num.total_log_prob, den.gamma - num.gamma


def ce_regularizer(ce_outputs, alignment):
    """Frame-averaged cross-entropy of ``ce_outputs`` against a pdf alignment."""
    o = _values(ce_outputs)
    alignment = np.asarray(alignment, dtype=np.int64)
    if len(alignment) != o.shape[0]:
        raise ValueError(f"alignment has {len(alignment)} frames, outputs have {o.shape[0]}")
    T = o.shape[0]
    rows = np.arange(T)
    loss = -log_softmax(o, axis=1)[rows, alignment].sum() / T
    grad = softmax(o, axis=1)
    grad[rows, alignment] -= 1.0
    return float(loss), grad / T


def aux_loss_pit(aux_outputs, interference_numerators, denominator):
    """Minimum over branch-to-reference assignments of the summed LF-MMI losses.

    Returns ``(loss, grads, permutation)`` where ``permutation[n]`` is the
    reference index assigned to branch ``n``.  Ties keep the first
    permutation in lexicographic order.
    """
    n = len(aux_outputs)
    if n != len(interference_numerators):
        raise ValueError(f"{n} auxiliary branches but {len(interference_numerators)} references")
    if not 1 <= n <= MAX_PIT_BRANCHES:
        raise ValueError(f"PIT supports 1..{MAX_PIT_BRANCHES} branches")
    cache = {}

    def pair(b, r):
        if (b, r) not in cache:
            cache[b, r] = lfmmi(aux_outputs[b], interference_numerators[r], denominator)
        return cache[b, r]

    best = None
    for perm in permutations(range(n)):
        total = 0.0
        for b, r in enumerate(perm):
            total += pair(b, r)[0]
        if best is None or total < best[0]:
            best = (total, perm)
    loss, perm = best
    return loss, [pair(b, r)[1] for b, r in enumerate(perm)], list(perm)


@dataclass
class UtteranceLosses:
    main_mmi: float
    aux_mmi: float
    main_ce: float
    aux_ce: float
    combined: float
    grad_main: np.ndarray
    grad_aux: list
    grad_main_ce: np.ndarray
    grad_aux_ce: list
    chosen_permutation: list = field(default_factory=list)

    def report(self, utterance_id):
        return json.dumps({
            "utterance_id": utterance_id, "main_mmi": self.main_mmi, "aux_mmi": self.aux_mmi,
            "main_ce": self.main_ce, "aux_ce": self.aux_ce, "combined": self.combined,
            "chosen_permutation": self.chosen_permutation,
        }, sort_keys=True)


def _ce_term(mmi_out, ce_out, numerator):
    alignment, _ = viterbi(numerator, _values(mmi_out))
    return ce_regularizer(ce_out, alignment)


def combined_loss(main_mmi_out, main_ce_out, aux_mmi_outs, aux_ce_outs, target_numerator,
                  interference_numerators, denominator, config=LossConfig()):
    """``main_mmi + ce*main_ce + alpha*(aux_mmi + ce*aux_ce)`` with output gradients.

    CE targets are Viterbi alignments of each numerator under the matching
    MMI output.  The auxiliary CE uses the reference assignment picked by
    the MMI term.  With ``alpha == 0`` the auxiliary branches are not
    evaluated at all and their gradients are zero.
    """
    main_mmi, g_main = lfmmi(main_mmi_out, target_numerator, denominator)
    main_ce, g_main_ce = _ce_term(main_mmi_out, main_ce_out, target_numerator)
    combined = main_mmi + config.ce_scale * main_ce
    g_main_ce = config.ce_scale * g_main_ce
    if config.alpha == 0.0:
        zeros = [np.zeros_like(_values(o)) for o in aux_mmi_outs]
        return UtteranceLosses(main_mmi, 0.0, main_ce, 0.0, combined, g_main, zeros, g_main_ce,
                               [z.copy() for z in zeros], [])
    aux_mmi, g_aux, perm = aux_loss_pit(aux_mmi_outs, interference_numerators, denominator)
    aux_ce = 0.0
    g_aux_ce = []
    for b, r in enumerate(perm):
        l, g = _ce_term(aux_mmi_outs[b], aux_ce_outs[b], interference_numerators[r])
        aux_ce += l
        g_aux_ce.append(config.alpha * config.ce_scale * g)
    combined = combined + config.alpha * (aux_mmi + config.ce_scale * aux_ce)
    g_aux = [config.alpha * g for g in g_aux]
    return UtteranceLosses(main_mmi, aux_mmi, main_ce, aux_ce, combined, g_main, g_aux, g_main_ce,
                           g_aux_ce, perm)
