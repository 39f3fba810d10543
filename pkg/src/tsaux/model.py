"""Multi-branch TDNN/LSTM acoustic model with hand-derived backpropagation.

A shared trunk consumes FBANK frames (advanced by ``input_advance`` frames)
with the speaker embedding appended; it then splits into a main branch and
one or more auxiliary branches, each ending in an LF-MMI head and a CE head.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

PRESETS = ("early", "middle", "late")
_CKPT_MAGIC = b"TSAM"
_CKPT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    embed_dim: int
    num_pdfs: int
    trunk: tuple
    branch: tuple
    num_aux: int = 1
    input_advance: int = 5
    split_point: str = "middle"
    # the unit-norm embedding is multiplied by this before concatenation;
    # None means sqrt(embed_dim), i.e. unit RMS per component
    embed_scale: float = None

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(dict(l) for l in self.trunk))
        object.__setattr__(self, "branch", tuple(dict(l) for l in self.branch))
        if sum(l["kind"] == "embed" for l in self.trunk) != 1:
            raise ShapeError("trunk must contain exactly one embed layer")
        if any(l["kind"] == "embed" for l in self.branch):
            raise ShapeError("embed layer only allowed in the trunk")
        if self.embed_scale is None:
            object.__setattr__(self, "embed_scale", float(np.sqrt(self.embed_dim)))

    def to_json(self):
        d = asdict(self)
        d["trunk"], d["branch"] = list(d["trunk"]), list(d["branch"])
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)

    def without_aux(self):
        return replace(self, num_aux=0)

    @property
    def branch_names(self):
        return ["main"] + [f"aux{n}" for n in range(self.num_aux)]


def tdnn_block(offsets, dim):
    return [{"kind": "splice", "offsets": list(offsets)}, {"kind": "affine", "dim": dim}, {"kind": "relu"}]


def _block_offsets(i):
    return (-1, 0, 1) if i < 2 else (-3, 0, 3)


def _build(preset, hidden, depth, branch_width, num_pdfs, input_dim, embed_dim, num_aux, lstm):
    shared = {"early": 1, "middle": depth // 2, "late": depth - 1}[preset]
    trunk = [{"kind": "splice", "offsets": [-1, 0, 1]}, {"kind": "embed"},
             {"kind": "affine", "dim": hidden}, {"kind": "relu"}]
    for i in range(1, shared):
        trunk += tdnn_block(_block_offsets(i), hidden)
    branch = []
    for i in range(shared, depth):
        if lstm and i == depth - 1:
            branch += [{"kind": "lstm", "dim": branch_width}]
        else:
            branch += tdnn_block(_block_offsets(i), branch_width)
    return ModelArch(input_dim, embed_dim, num_pdfs, tuple(trunk), tuple(branch), num_aux, 5, preset)


def make_arch(preset="middle", hidden=64, depth=6, num_pdfs=9, input_dim=40, embed_dim=100,
              num_aux=1, lstm=False):
    """Early, middle or late split of a ``depth``-block network.

    ``middle`` shares ``depth // 2`` blocks at width ``hidden``.  The other
    presets pick the branch width that brings their parameter count closest
    to the middle preset's, so the variants are size-matched.
    """
    if preset not in PRESETS:
        raise ValueError(f"preset must be one of {PRESETS}")
    if depth < 3:
        raise ValueError("depth must be at least 3")
    args = (num_pdfs, input_dim, embed_dim, num_aux, lstm)
    middle = _build("middle", hidden, depth, hidden, *args)
    if preset == "middle":
        return middle
    target = count_params(middle)
    best = min(range(4, 4 * hidden + 1),
               key=lambda w: abs(count_params(_build(preset, hidden, depth, w, *args)) - target))
    return _build(preset, hidden, depth, best, *args)


def layer_shapes(arch):
    """Ordered ``{param name: shape}``."""
    shapes = {}

    def walk(prefix, layers, dim):
        for i, l in enumerate(layers):
            k = l["kind"]
            name = f"{prefix}.{i}"
            if k == "splice":
                dim *= len(l["offsets"])
            elif k == "embed":
                dim += arch.embed_dim
            elif k == "affine":
                shapes[name + ".W"] = (dim, l["dim"])
                shapes[name + ".b"] = (l["dim"],)
                dim = l["dim"]
            elif k == "lstm":
                h = l["dim"]
                shapes[name + ".Wx"] = (dim, 4 * h)
                shapes[name + ".Wh"] = (h, 4 * h)
                shapes[name + ".b"] = (4 * h,)
                dim = h
            elif k != "relu":
                raise ShapeError(f"unknown layer kind {k!r}")
        return dim

    d = walk("trunk", arch.trunk, arch.input_dim)
    for br in arch.branch_names:
        bd = walk(br, arch.branch, d)
        for head in ("mmi", "ce"):
            shapes[f"{br}.out_{head}.W"] = (bd, arch.num_pdfs)
            shapes[f"{br}.out_{head}.b"] = (arch.num_pdfs,)
    return shapes


def count_params(arch):
    return int(sum(np.prod(s) for s in layer_shapes(arch).values()))


def init_params(arch, seed=0):
    """ReLU affine weights uniform in +-sqrt(6/fan_in), other weights in
    +-1/sqrt(fan_in), biases zero.  Each tensor is seeded from its own name,
    so shared tensors are identical whether or not auxiliary branches exist."""
    params = {}
    for name, shape in layer_shapes(arch).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        relu_affine = name.endswith(".W") and ".out_" not in name
        bound = np.sqrt((6.0 if relu_affine else 1.0) / shape[0])
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def drop_aux(params):
    return {k: v for k, v in params.items() if not k.startswith("aux")}


@dataclass
class BranchOutputs:
    main_mmi: np.ndarray
    main_ce: np.ndarray
    aux_mmi: list = field(default_factory=list)
    aux_ce: list = field(default_factory=list)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _clamped_index(T, offsets):
    return np.clip(np.arange(T)[:, None] + np.asarray(offsets)[None, :], 0, T - 1)


def _layer_forward(arch, layer, name, params, x, emb):
    k = layer["kind"]
    if k == "splice":
        idx = _clamped_index(len(x), layer["offsets"])
        return x[idx].reshape(len(x), -1), tuple(layer["offsets"])
    if k == "embed":
        return np.hstack([x, np.broadcast_to(arch.embed_scale * emb, (len(x), len(emb)))]), x.shape[1]
    if k == "affine":
        W = params[name + ".W"]
        if x.shape[1] != W.shape[0]:
            raise ShapeError(f"{name}: input dim {x.shape[1]} != {W.shape[0]}")
        return x @ W + params[name + ".b"], x
    if k == "relu":
        mask = x > 0
        return x * mask, mask
    if k == "lstm":
        return _lstm_forward(params, name, x)
    raise ShapeError(f"unknown layer kind {k!r}")


def _layer_backward(layer, name, params, cache, gy, grads):
    k = layer["kind"]
    if k == "splice":
        T, d = len(gy), gy.shape[1] // len(cache)
        gx = np.zeros((T, d))
        for j, o in enumerate(cache):
            part = gy[:, j * d:(j + 1) * d]
            o = max(-T, min(T, o))
            if o >= 0:
                gx[o:] += part[:T - o]
                gx[T - 1] += part[T - o:].sum(axis=0)
            else:
                gx[:T + o] += part[-o:]
                gx[0] += part[:-o].sum(axis=0)
        return gx
    if k == "embed":
        return gy[:, :cache]
    if k == "affine":
        x = cache
        grads[name + ".W"] = grads.get(name + ".W", 0.0) + x.T @ gy
        grads[name + ".b"] = grads.get(name + ".b", 0.0) + gy.sum(axis=0)
        return gy @ params[name + ".W"].T
    if k == "relu":
        return gy * cache
    if k == "lstm":
        return _lstm_backward(params, name, cache, gy, grads)
    raise ShapeError(f"unknown layer kind {k!r}")


def _lstm_forward(params, name, x):
    Wx, Wh, b = params[name + ".Wx"], params[name + ".Wh"], params[name + ".b"]
    if x.shape[1] != Wx.shape[0]:
        raise ShapeError(f"{name}: input dim {x.shape[1]} != {Wx.shape[0]}")
    T, H = len(x), Wh.shape[0]
    zx = x @ Wx + b
    h = np.zeros((T + 1, H))
    c = np.zeros((T + 1, H))
    gates = np.empty((T, 4 * H))
    for t in range(T):
        z = zx[t] + h[t] @ Wh
        i, f, o = _sigmoid(z[:H]), _sigmoid(z[H:2 * H]), _sigmoid(z[2 * H:3 * H])
        g = np.tanh(z[3 * H:])
        c[t + 1] = f * c[t] + i * g
        h[t + 1] = o * np.tanh(c[t + 1])
        gates[t] = np.concatenate([i, f, o, g])
    return h[1:], (x, h, c, gates)


def _lstm_backward(params, name, cache, gy, grads):
    x, h, c, gates = cache
    Wx, Wh = params[name + ".Wx"], params[name + ".Wh"]
    T, H = len(x), Wh.shape[0]
    dz = np.empty((T, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        i, f, o, g = gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:]
        tc = np.tanh(c[t + 1])
        dh = gy[t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        di, df, dg = dc * g, dc * c[t], dc * i
        dz[t] = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)])
        dc_next = dc * f
        dh_next = dz[t] @ Wh.T
    grads[name + ".Wx"] = grads.get(name + ".Wx", 0.0) + x.T @ dz
    grads[name + ".Wh"] = grads.get(name + ".Wh", 0.0) + h[:-1].T @ dz
    grads[name + ".b"] = grads.get(name + ".b", 0.0) + dz.sum(axis=0)
    return dz @ Wx.T


def _run(arch, layers, prefix, params, x, emb):
    caches = []
    for i, layer in enumerate(layers):
        x, c = _layer_forward(arch, layer, f"{prefix}.{i}", params, x, emb)
        caches.append(c)
    return x, caches


def advance(features, frames):
    T = len(features)
    return features[np.minimum(np.arange(T) + frames, T - 1)]


def forward(params, arch, features, embedding, with_aux=True):
    """Outputs of every head and the activations needed by :func:`backward`."""
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    e = np.asarray(getattr(embedding, "values", embedding), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"input: expected frames x {arch.input_dim}, got {x.shape}")
    if e.shape != (arch.embed_dim,):
        raise ShapeError(f"embed: expected {arch.embed_dim}-dim embedding, got {e.shape}")
    x = advance(x, arch.input_advance)
    shared, trunk_cache = _run(arch, arch.trunk, "trunk", params, x, e)
    cache = {"trunk": trunk_cache, "shared": shared, "arch": arch}
    outs = {}
    names = arch.branch_names if with_aux else ["main"]
    for br in names:
        hb, bc = _run(arch, arch.branch, br, params, shared, e)
        cache[br] = (bc, hb)
        outs[br] = tuple(hb @ params[f"{br}.out_{h}.W"] + params[f"{br}.out_{h}.b"] for h in ("mmi", "ce"))
    main = outs["main"]
    aux = [outs[b] for b in names[1:]]
    return BranchOutputs(main[0], main[1], [a[0] for a in aux], [a[1] for a in aux]), cache


def backward(params, cache, grad_outputs):
    """Parameter gradients given gradients w.r.t. every head output.

    ``grad_outputs`` is :class:`BranchOutputs`-shaped; auxiliary entries may
    be ``None`` (or the lists empty) for branches that receive no gradient.
    """
    arch = cache["arch"]
    grads = {}
    g_shared = np.zeros_like(cache["shared"])
    heads = {"main": (grad_outputs.main_mmi, grad_outputs.main_ce)}
    for n, br in enumerate(arch.branch_names[1:]):
        if n < len(grad_outputs.aux_mmi) and grad_outputs.aux_mmi[n] is not None:
            heads[br] = (grad_outputs.aux_mmi[n], grad_outputs.aux_ce[n])
    for br, (g_mmi, g_ce) in heads.items():
        if br not in cache:
            raise ShapeError(f"cache has no activations for branch {br}")
        bc, hb = cache[br]
        if g_mmi.shape != (len(hb), arch.num_pdfs):
            raise ShapeError(f"{br}: output gradient shape {g_mmi.shape} does not match cache")
        gh = np.zeros_like(hb)
        for head, g in (("mmi", g_mmi), ("ce", g_ce)):
            grads[f"{br}.out_{head}.W"] = hb.T @ g
            grads[f"{br}.out_{head}.b"] = g.sum(axis=0)
            gh += g @ params[f"{br}.out_{head}.W"].T
        for i in range(len(arch.branch) - 1, -1, -1):
            gh = _layer_backward(arch.branch[i], f"{br}.{i}", params, bc[i], gh, grads)
        g_shared += gh
    g = g_shared
    # nothing below the lowest parametric layer needs a gradient
    lowest = min(i for i, l in enumerate(arch.trunk) if l["kind"] in ("affine", "lstm"))
    for i in range(len(arch.trunk) - 1, lowest - 1, -1):
        g = _layer_backward(arch.trunk[i], f"trunk.{i}", params, cache["trunk"][i], g, grads)
    return grads


def relu_masks(cache):
    """All ReLU activity masks of a forward pass, for kink detection in tests."""
    arch = cache["arch"]
    out = [c for l, c in zip(arch.trunk, cache["trunk"]) if l["kind"] == "relu"]
    for br in arch.branch_names:
        if br in cache:
            out += [c for l, c in zip(arch.branch, cache[br][0]) if l["kind"] == "relu"]
    return out


def flatten(params, names=None):
    names = list(params) if names is None else names
    return np.concatenate([np.ravel(params[n]) for n in names])


def save_checkpoint(path, arch, params):
    """Magic, version, arch JSON (with parameter order), flat float32 array."""
    names = list(layer_shapes(arch))
    meta = json.dumps({"arch": arch.to_json(), "params": names}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(meta)) + meta)
        f.write(flatten(params, names).astype("<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(data[12:12 + n])
    arch = ModelArch.from_json(meta["arch"])
    flat = np.frombuffer(data, dtype="<f4", offset=12 + n).astype(np.float64)
    shapes = layer_shapes(arch)
    params, off = {}, 0
    for name in meta["params"]:
        size = int(np.prod(shapes[name]))
        params[name] = flat[off:off + size].reshape(shapes[name])
        off += size
    return arch, params
