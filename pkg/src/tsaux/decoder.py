"""Viterbi decoding of branch outputs, edit-distance scoring and SIR-grid reports."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import EmptyCompositionError, viterbi
from .mixer import EVAL_SIRS
from .model import forward

log = logging.getLogger(__name__)


def collapse(pdfs, topology, silence=None):
    """Phone sequence from a frame-level pdf path: repeated phones are merged
    and silence dropped."""
    out = []
    prev = None
    for pdf in pdfs:
        p = topology.phone_of_pdf(int(pdf))
        if p != prev and p != silence:
            out.append(p)
        prev = p
    return out


def decode(outputs, decoding_graph, topology, silence=None):
    outputs = np.asarray(getattr(outputs, "values", outputs))
    try:
        pdfs, _ = viterbi(decoding_graph, outputs)
    except EmptyCompositionError:
        log.warning("empty composition while decoding; returning an empty hypothesis")
        return []
    return collapse(pdfs, topology, silence)


@dataclass
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def errors(self):
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self):
        return 100.0 * self.errors / self.reference_length

    def __add__(self, other):
        return WerReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.reference_length + other.reference_length)

    def to_json(self):
        return {**asdict(self), "wer": self.wer}

    @classmethod
    def from_json(cls, d):
        return cls(d["substitutions"], d["deletions"], d["insertions"], d["reference_length"])


def wer(hypothesis, reference):
    """Unit-cost edit distance; among equal-cost alignments the backtrace
    prefers substitutions over insertion/deletion pairs."""
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        raise ValueError("empty reference")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerReport(int(s), dl, ins, n)


@dataclass
class EvalItem:
    """One evaluation mixture: features, target embedding and both references."""

    mixture_id: str
    sir_db: float
    features: np.ndarray
    embedding: np.ndarray
    target_transcript: list
    interference_transcript: list


@dataclass
class EvalGrid:
    branch: str
    conditions: dict
    incomplete: bool = False
    hypotheses: dict = field(default_factory=dict, repr=False)

    @property
    def average(self):
        """Unweighted mean of the per-condition WERs."""
        return float(np.mean([r.wer for r in self.conditions.values()]))

    def wer_at(self, sir):
        return self.conditions[float(sir)].wer

    def to_json(self):
        return {
            "branch": self.branch, "incomplete": self.incomplete, "average": self.average,
            "conditions": {f"{k:g}": v.to_json() for k, v in self.conditions.items()},
        }

    @classmethod
    def from_json(cls, d):
        conditions = {float(k): WerReport.from_json(v) for k, v in d["conditions"].items()}
        return cls(d["branch"], conditions, d.get("incomplete", False))


def eval_grid(arch, params, items, decoding_graph, topology, branch="main", silence=None):
    """Per-SIR WER of one branch: ``main`` is scored against target
    transcripts, ``aux`` (first auxiliary branch) against interference
    transcripts."""
    if branch not in ("main", "aux"):
        raise ValueError("branch must be 'main' or 'aux'")
    reports, hyps = {}, {}
    for it in items:
        out, _ = forward(params, arch, it.features, it.embedding, with_aux=branch == "aux")
        o = out.main_mmi if branch == "main" else out.aux_mmi[0]
        ref = it.target_transcript if branch == "main" else it.interference_transcript
        hyp = decode(o, decoding_graph, topology, silence)
        hyps[it.mixture_id] = hyp
        r = wer(hyp, ref)
        key = float(it.sir_db)
        reports[key] = reports[key] + r if key in reports else r
    missing = [s for s in EVAL_SIRS if s not in reports]
    if missing:
        log.warning("evaluation grid missing SIR conditions %s", missing)
    ordered = {s: reports[s] for s in EVAL_SIRS if s in reports}
    ordered.update({s: r for s, r in reports.items() if s not in ordered})
    return EvalGrid(branch, ordered, bool(missing), hyps)


def format_table(rows):
    """Text table with one row per ``(label, EvalGrid)`` and SIR columns plus Avg."""
    sirs = list(EVAL_SIRS)
    head = f"{'model':<28}" + "".join(f"{s:>8g}" for s in sirs) + f"{'Avg.':>8}"
    lines = [head, "-" * len(head)]
    for label, grid in rows:
        cells = "".join(f"{grid.conditions[s].wer:8.2f}" if s in grid.conditions else f"{'-':>8}" for s in sirs)
        lines.append(f"{label:<28}{cells}{grid.average:8.2f}" + ("  (incomplete)" if grid.incomplete else ""))
    return "\n".join(lines) + "\n"


def grids_to_json(rows):
    return json.dumps({label: g.to_json() for label, g in rows}, indent=1, sort_keys=True)
