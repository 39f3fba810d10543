"""Weighted finite-state acceptors over pdf labels in the log semiring.

Arcs are stored as parallel numpy arrays.  A label of ``EPS`` marks an
epsilon arc, which consumes no frame.  Epsilon arcs must form an acyclic
subgraph; the frame-synchronous kernels rely on a topological order of them.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

EPS = -1
NEG_INF = float("-inf")

_MAGIC = b"WFSA"
_VERSION = 1
_ARC_DTYPE = np.dtype([("src", "<i4"), ("dst", "<i4"), ("label", "<i4"), ("weight", "<f8")])


class GraphError(ValueError):
    pass


class EmptyCompositionError(GraphError):
    """No accepting path of the requested length exists."""

    def __init__(self, message="empty composition: no accepting path of the required length"):
        super().__init__(message)
        self.total_log_prob = NEG_INF


@dataclass(eq=False)
class Wfsa:
    num_states: int
    src: np.ndarray
    dst: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    start: int
    final: np.ndarray
    num_pdfs: int
    _meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.src = np.ascontiguousarray(self.src, dtype=np.int64)
        self.dst = np.ascontiguousarray(self.dst, dtype=np.int64)
        self.label = np.ascontiguousarray(self.label, dtype=np.int64)
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.final = np.ascontiguousarray(self.final, dtype=np.float64)
        n = len(self.src)
        if not (len(self.dst) == len(self.label) == len(self.weight) == n):
            raise GraphError("arc arrays differ in length")
        if self.num_states < 1 or self.final.shape != (self.num_states,):
            raise GraphError("final weights must have one entry per state")
        if not 0 <= self.start < self.num_states:
            raise GraphError(f"start state {self.start} out of range")
        if n and (self.src.min() < 0 or self.dst.min() < 0
                  or max(self.src.max(), self.dst.max()) >= self.num_states):
            raise GraphError("arc references a nonexistent state")
        if n and (self.label.min() < EPS or self.label.max() >= self.num_pdfs):
            raise GraphError("arc label outside pdf range")
        if np.isnan(self.weight).any() or np.isposinf(self.weight).any():
            raise GraphError("arc weights must be finite or -inf")
        if np.isnan(self.final).any() or np.isposinf(self.final).any():
            raise GraphError("final weights must be finite or -inf")
        if not np.isfinite(self.final).any():
            raise GraphError("graph has no final state")

    @classmethod
    def from_arcs(cls, num_states, arcs, start, finals, num_pdfs):
        """Build from an iterable of ``(src, dst, label, log_weight)`` tuples
        and a ``{state: log_weight}`` map of final states."""
        arcs = list(arcs)
        final = np.full(num_states, NEG_INF)
        for s, w in finals.items():
            final[s] = w
        if arcs:
            src, dst, lab, w = (np.array(c) for c in zip(*arcs))
        else:
            src = dst = lab = np.zeros(0, dtype=np.int64)
            w = np.zeros(0)
        return cls(num_states, src, dst, lab, w, start, final, num_pdfs)

    @property
    def num_arcs(self):
        return len(self.src)

    @property
    def arcs(self):
        return list(zip(self.src.tolist(), self.dst.tolist(), self.label.tolist(), self.weight.tolist()))

    @property
    def final_log_weights(self):
        return {int(s): float(self.final[s]) for s in np.flatnonzero(np.isfinite(self.final))}

    @property
    def has_epsilons(self):
        return bool((self.label == EPS).any())

    @cached_property
    def kernel_arrays(self):
        """Labeled arcs and epsilon arcs (in topological order) for the kernels."""
        lab = self.label != EPS
        eps_idx = np.flatnonzero(~lab)
        if len(eps_idx):
            rank = _eps_topological_rank(self.num_states, self.src[eps_idx], self.dst[eps_idx])
            eps_idx = eps_idx[np.argsort(rank[self.src[eps_idx]], kind="stable")]
        lab_idx = np.flatnonzero(lab)
        return (
            self.src[lab_idx], self.dst[lab_idx], self.label[lab_idx], self.weight[lab_idx],
            self.src[eps_idx], self.dst[eps_idx], self.weight[eps_idx],
        )

    def out_arcs(self):
        """Per-state lists of arc indices, in arc order."""
        out = [[] for _ in range(self.num_states)]
        for i, s in enumerate(self.src.tolist()):
            out[s].append(i)
        return out

    def same_as(self, other):
        return (
            self.num_states == other.num_states and self.start == other.start
            and self.num_pdfs == other.num_pdfs
            and np.array_equal(self.src, other.src) and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.label, other.label) and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.final, other.final)
        )

    # serialization

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<IiiiI", _VERSION, self.num_states, self.start, self.num_pdfs, self.num_arcs))
        buf.write(self.final.astype("<f8").tobytes())
        rec = np.empty(self.num_arcs, dtype=_ARC_DTYPE)
        rec["src"], rec["dst"], rec["label"], rec["weight"] = self.src, self.dst, self.label, self.weight
        buf.write(rec.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != _MAGIC:
            raise GraphError("not a WFSA file")
        version, num_states, start, num_pdfs, num_arcs = struct.unpack_from("<IiiiI", data, 4)
        if version != _VERSION:
            raise GraphError(f"unsupported WFSA version {version}")
        off = 4 + struct.calcsize("<IiiiI")
        final = np.frombuffer(data, dtype="<f8", count=num_states, offset=off).copy()
        off += 8 * num_states
        rec = np.frombuffer(data, dtype=_ARC_DTYPE, count=num_arcs, offset=off)
        return cls(num_states, rec["src"], rec["dst"], rec["label"], rec["weight"], start, final, num_pdfs)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def to_text(self):
        lines = [f"{s} {d} {'<eps>' if l == EPS else l} {w:.10g}" for s, d, l, w in self.arcs]
        lines += [f"{s} {w:.10g}" for s, w in self.final_log_weights.items()]
        return "\n".join(lines) + "\n"


def _eps_topological_rank(num_states, src, dst):
    indeg = np.zeros(num_states, dtype=np.int64)
    np.add.at(indeg, dst, 1)
    succ = [[] for _ in range(num_states)]
    for s, d in zip(src.tolist(), dst.tolist()):
        succ[s].append(d)
    order = [s for s in range(num_states) if indeg[s] == 0]
    rank = np.empty(num_states, dtype=np.int64)
    i = 0
    while i < len(order):
        s = order[i]
        rank[s] = i
        i += 1
        for d in succ[s]:
            indeg[d] -= 1
            if indeg[d] == 0:
                order.append(d)
    if len(order) != num_states:
        raise GraphError("epsilon arcs contain a cycle")
    return rank


def trim(g):
    """Drop states that are unreachable from the start or cannot reach a final state."""
    live_w = np.isfinite(g.weight)
    fwd = np.zeros(g.num_states, dtype=bool)
    fwd[g.start] = True
    stack = [g.start]
    out = [[] for _ in range(g.num_states)]
    inc = [[] for _ in range(g.num_states)]
    for i in np.flatnonzero(live_w).tolist():
        out[g.src[i]].append(g.dst[i])
        inc[g.dst[i]].append(g.src[i])
    while stack:
        s = stack.pop()
        for d in out[s]:
            if not fwd[d]:
                fwd[d] = True
                stack.append(d)
    bwd = np.isfinite(g.final)
    stack = np.flatnonzero(bwd).tolist()
    while stack:
        s = stack.pop()
        for p in inc[s]:
            if not bwd[p]:
                bwd[p] = True
                stack.append(p)
    keep = fwd & bwd
    if not keep[g.start]:
        raise EmptyCompositionError("graph accepts nothing")
    new_id = np.full(g.num_states, -1, dtype=np.int64)
    new_id[keep] = np.arange(keep.sum())
    arc_keep = live_w & keep[g.src] & keep[g.dst]
    return Wfsa(
        int(keep.sum()), new_id[g.src[arc_keep]], new_id[g.dst[arc_keep]], g.label[arc_keep],
        g.weight[arc_keep], int(new_id[g.start]), g.final[keep], g.num_pdfs,
    )


def _logaddexp_into(d, key, value):
    d[key] = np.logaddexp(d[key], value) if key in d else value


def remove_epsilons(g):
    """Equivalent epsilon-free acceptor.

    Every epsilon path followed by a labeled arc becomes one labeled arc, so
    path multiplicities (and hence log-semiring sums) are preserved.
    """
    if not g.has_epsilons:
        return g
    *_, eps_src, eps_dst, eps_w = g.kernel_arrays
    closure = [{s: 0.0} for s in range(g.num_states)]
    # reverse topological order: successors' closures are complete first
    for s, d, w in reversed(list(zip(eps_src.tolist(), eps_dst.tolist(), eps_w.tolist()))):
        for q, v in closure[d].items():
            _logaddexp_into(closure[s], q, w + v)
    out = g.out_arcs()
    arcs = []
    final = np.full(g.num_states, NEG_INF)
    for s in range(g.num_states):
        for q, v in sorted(closure[s].items()):
            final[s] = np.logaddexp(final[s], v + g.final[q])
            for i in out[q]:
                if g.label[i] != EPS:
                    arcs.append((s, int(g.dst[i]), int(g.label[i]), v + float(g.weight[i])))
    cols = [np.array(c) for c in zip(*arcs)] if arcs else [np.zeros(0, dtype=np.int64)] * 3 + [np.zeros(0)]
    return trim(Wfsa(g.num_states, *cols, g.start, final, g.num_pdfs))


def intersect(a, b):
    """Product acceptor accepting label sequences of both, weights added.

    ``a`` is made epsilon-free first; epsilon arcs of ``b`` are followed with
    ``a`` standing still, which avoids redundant epsilon paths.
    """
    if a.num_pdfs != b.num_pdfs:
        raise GraphError("intersecting graphs over different pdf sets")
    a = remove_epsilons(a)
    a_out, b_out = a.out_arcs(), b.out_arcs()
    b_by_label = []
    for s in range(b.num_states):
        by = {}
        for i in b_out[s]:
            by.setdefault(int(b.label[i]), []).append(i)
        b_by_label.append(by)
    index = {(a.start, b.start): 0}
    queue = [(a.start, b.start)]
    arcs = []
    finals = {}
    k = 0
    while k < len(queue):
        qa, qb = queue[k]
        sid = k
        k += 1
        fw = a.final[qa] + b.final[qb]
        if np.isfinite(fw):
            finals[sid] = fw
        targets = []
        for i in b_by_label[qb].get(EPS, ()):
            targets.append(((qa, int(b.dst[i])), EPS, float(b.weight[i])))
        for ia in a_out[qa]:
            for ib in b_by_label[qb].get(int(a.label[ia]), ()):
                targets.append(((int(a.dst[ia]), int(b.dst[ib])), int(a.label[ia]),
                                float(a.weight[ia] + b.weight[ib])))
        for key, lab, w in targets:
            if key not in index:
                index[key] = len(queue)
                queue.append(key)
            arcs.append((sid, index[key], lab, w))
    if not finals:
        raise EmptyCompositionError("intersection is empty")
    return trim(Wfsa.from_arcs(len(queue), arcs, 0, finals, a.num_pdfs))
