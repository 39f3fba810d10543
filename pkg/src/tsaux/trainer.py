"""Minibatch SGD with exponential learning-rate decay, l2 weight decay and
periodic backstitch updates."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .graph import GraphError, chunk_denominator, restrict_to_span
from .loss import LossConfig, combined_loss
from .model import BranchOutputs, backward, drop_aux, forward, init_params, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 8
    lr_start: float = 0.001
    lr_end: float = 0.0001
    l2_scale: float = 0.00005
    ce_scale: float = 0.1
    alpha: float = 1.0
    backstitch_scale: float = 1.0
    backstitch_interval: int = 4
    backstitch_enabled: bool = True
    chunk_width: float = 50
    minibatch_size: int = 8
    seed: int = 0
    max_change: float = 0.0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        if self.backstitch_interval < 1 or self.minibatch_size < 1:
            raise ValueError("backstitch_interval and minibatch_size must be >= 1")
        if self.backstitch_enabled and not self.backstitch_scale > 0:
            raise ValueError("backstitch_scale must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.max_change < 0:
            raise ValueError("max_change must be non-negative (0 disables it)")

    @property
    def loss_config(self):
        return LossConfig(alpha=self.alpha, ce_scale=self.ce_scale, l2_scale=self.l2_scale)

    @classmethod
    def from_text(cls, text):
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            t = types[key]
            if t in ("bool", bool):
                kw[key] = value.lower() in ("1", "true", "yes", "on")
            elif t in ("int", int):
                kw[key] = int(value)
            elif key == "chunk_width" and value.lower() in ("inf", "none", "off"):
                kw[key] = math.inf
            elif key == "optimizer":
                kw[key] = value
            else:
                kw[key] = float(value)
        return cls(**kw)

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def learning_rate(step, total_steps, lr_start, lr_end):
    """Exponential interpolation from ``lr_start`` at step 0 to ``lr_end`` at
    the last step."""
    if total_steps <= 1:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (step / (total_steps - 1))


@dataclass
class TrainingExample:
    """One training utterance (or chunk of one)."""

    utterance_id: str
    features: np.ndarray
    embedding: np.ndarray
    target_numerator: object
    interference_numerators: list = field(default_factory=list)
    begin: int = 0
    at_end: bool = True

    @property
    def num_frames(self):
        return len(self.features)


def chunk_spans(num_frames, chunk_width):
    """Fixed-width spans; a remainder shorter than half a chunk is merged
    into the last chunk."""
    if chunk_width is None or math.isinf(chunk_width):
        return [(0, num_frames)]
    w = int(chunk_width)
    if w < 10:
        raise ValueError("chunk_width must be at least 10")
    n = num_frames // w
    if n == 0:
        return [(0, num_frames)]
    spans = [(i * w, (i + 1) * w) for i in range(n)]
    rem = num_frames - n * w
    if rem >= w / 2:
        spans.append((n * w, num_frames))
    elif rem:
        spans[-1] = (spans[-1][0], num_frames)
    return spans


def chunk_utterance(example, chunk_width):
    """Split an example into chunks whose numerators keep only the alignments
    of the full utterance that pass through the chunk span."""
    T = example.num_frames
    spans = chunk_spans(T, chunk_width)
    if len(spans) == 1:
        return [example]
    out = []
    for b, e in spans:
        out.append(TrainingExample(
            f"{example.utterance_id}:{b}-{e}", example.features[b:e], example.embedding,
            restrict_to_span(example.target_numerator, T, b, e),
            [restrict_to_span(g, T, b, e) for g in example.interference_numerators], b, e == T,
        ))
    return out


@dataclass
class StepResult:
    grads: dict
    losses: dict
    frames: int
    skipped: int


_LOSS_KEYS = ("main_mmi", "aux_mmi", "main_ce", "aux_ce", "combined")


def minibatch_gradients(params, arch, batch, denominators, loss_config):
    """Summed parameter gradients and losses over a minibatch, reduced in
    batch order.  ``denominators`` maps ``(begin == 0, at_end)`` of an
    example to its denominator.  Examples whose numerator cannot be aligned
    are skipped."""
    use_aux = loss_config.alpha != 0.0 and arch.num_aux > 0
    if not use_aux:
        loss_config = replace(loss_config, alpha=0.0)
    grads = {}
    totals = dict.fromkeys(_LOSS_KEYS, 0.0)
    frames = skipped = 0
    for ex in batch:
        den = denominators[ex.begin == 0, ex.at_end]
        out, cache = forward(params, arch, ex.features, ex.embedding, with_aux=use_aux)
        if not np.isfinite(out.main_mmi).all():
            raise FloatingPointError(f"non-finite network output for {ex.utterance_id}")
        try:
            res = combined_loss(out.main_mmi, out.main_ce, out.aux_mmi, out.aux_ce, ex.target_numerator,
                                ex.interference_numerators if use_aux else [], den, loss_config)
        except GraphError as err:
            log.info("skipping %s: %s", ex.utterance_id, err)
            skipped += 1
            continue
        if not math.isfinite(res.combined):
            raise FloatingPointError(f"non-finite loss for {ex.utterance_id}")
        g_out = BranchOutputs(res.grad_main, res.grad_main_ce,
                              res.grad_aux if use_aux else [], res.grad_aux_ce if use_aux else [])
        for k, v in backward(params, cache, g_out).items():
            grads[k] = grads[k] + v if k in grads else v
        for k in _LOSS_KEYS:
            totals[k] += getattr(res, k)
        frames += ex.num_frames
    return StepResult(grads, totals, frames, skipped)


def _full_gradient(params, result, l2_scale):
    g = {}
    for k, p in params.items():
        gk = result.grads.get(k)
        g[k] = (gk if gk is not None else 0.0) + l2_scale * p
    return g


def _layer_of(name):
    return name.rsplit(".", 1)[0]


def _scaled_update(grads, lr, max_change):
    """``lr * grad`` per tensor, with each layer's update (weights and bias
    together) rescaled so its l2 norm is at most ``max_change``; 0 disables
    the cap."""
    step = {k: lr * g for k, g in grads.items()}
    if not max_change:
        return step
    sq = {}
    for k, u in step.items():
        sq[_layer_of(k)] = sq.get(_layer_of(k), 0.0) + float(np.vdot(u, u))
    for k in step:
        norm = math.sqrt(sq[_layer_of(k)])
        if norm > max_change:
            step[k] = step[k] * (max_change / norm)
    return step


class PlainDirection:
    """Update direction of plain SGD: the gradient itself."""

    def __call__(self, grads, commit=True):
        return grads


class AdamDirection:
    """Diagonally preconditioned direction from bias-corrected running
    moments of the gradient.  ``commit=False`` evaluates the direction
    without advancing the moments."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def __call__(self, grads, commit=True):
        t = self.t + 1
        out, m_new, v_new = {}, {}, {}
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            m_new[k], v_new[k] = m, v
            out[k] = (m / (1 - self.beta1 ** t)) / (np.sqrt(v / (1 - self.beta2 ** t)) + self.eps)
        if commit:
            self.m, self.v, self.t = m_new, v_new, t
        return out


OPTIMIZERS = {"sgd": PlainDirection, "adam": AdamDirection}


def sgd_step(params, grads, lr, max_change=0.0, direction=None):
    d = grads if direction is None else direction(grads)
    step = _scaled_update(d, lr, max_change)
    return {k: p - step[k] for k, p in params.items()}


def backstitch_step(params, gradient_fn, lr, scale, max_change=0.0, direction=None):
    """Move ``scale * lr`` uphill, then ``(1 + scale) * lr`` downhill using
    the gradient at the intermediate point.  ``gradient_fn(params)`` returns
    ``(grads, result)``; the result of the second evaluation is returned.
    With a ``direction`` the moves follow its (preconditioned) direction;
    only the downhill gradient updates its state."""
    direction = direction or PlainDirection()
    g1, _ = gradient_fn(params)
    up = _scaled_update(direction(g1, commit=False), scale * lr, max_change * scale)
    mid = {k: p + up[k] for k, p in params.items()}
    g2, res = gradient_fn(mid)
    down = _scaled_update(direction(g2), (1.0 + scale) * lr, max_change * (1.0 + scale))
    return {k: p - down[k] for k, p in mid.items()}, res


@dataclass
class TrainResult:
    params: dict
    log: list
    skipped: int


def train(examples, arch, config, denominator, out_dir=None, params=None, log_path=None):
    """Train from ``init_params(arch, config.seed)`` (or ``params``).

    Writes one JSON line per step to ``log_path`` and a checkpoint per epoch
    into ``out_dir`` when given.  Deterministic for a fixed config.
    """
    loss_config = config.loss_config
    chunks = [c for ex in examples for c in chunk_utterance(ex, config.chunk_width)]
    if not chunks:
        raise ValueError("no training examples")
    dens = {k: chunk_denominator(denominator, *k) for k in {(c.begin == 0, c.at_end) for c in chunks}}
    params = init_params(arch, config.seed) if params is None else dict(params)
    mb = config.minibatch_size
    steps_per_epoch = math.ceil(len(chunks) / mb)
    total = config.epochs * steps_per_epoch
    records, skipped, step = [], 0, 0
    direction = OPTIMIZERS[config.optimizer]()
    log_file = open(log_path, "w") if log_path else None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(chunks))
            for s in range(steps_per_epoch):
                batch = [chunks[i] for i in order[s * mb:(s + 1) * mb]]
                lr = learning_rate(step, total, config.lr_start, config.lr_end)

                def gradient_fn(p, batch=batch):
                    r = minibatch_gradients(p, arch, batch, dens, loss_config)
                    return _full_gradient(p, r, config.l2_scale), r

                # the interval-th, 2*interval-th, ... minibatch gets backstitch
                stitch = config.backstitch_enabled and (step + 1) % config.backstitch_interval == 0
                try:
                    if stitch:
                        new_params, res = backstitch_step(params, gradient_fn, lr, config.backstitch_scale,
                                                          config.max_change, direction)
                    else:
                        g, res = gradient_fn(params)
                        new_params = sgd_step(params, g, lr, config.max_change, direction)
                except FloatingPointError as err:
                    raise TrainingDiverged(step) from err
                if not all(math.isfinite(v) for v in res.losses.values()):
                    raise TrainingDiverged(step)
                params = new_params
                skipped += res.skipped
                rec = {"step": step, "epoch": epoch, "lr": lr, "frames": res.frames,
                       "skips": res.skipped, "backstitch": stitch, **res.losses}
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                step += 1
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / f"epoch{epoch + 1}.mdl", arch, params)
    finally:
        if log_file:
            log_file.close()
    if skipped:
        log.warning("skipped %d chunks with infeasible numerators", skipped)
    return TrainResult(params, records, skipped)


def main_path_checkpoint_bytes(arch, params, path):
    """Checkpoint of the model with auxiliary branches removed."""
    save_checkpoint(path, arch.without_aux(), drop_aux(params))
    return Path(path).read_bytes()


def epoch_mean_loss(records, epoch):
    rs = [r for r in records if r["epoch"] == epoch]
    return sum(r["combined"] for r in rs) / max(1, sum(r["frames"] for r in rs))
