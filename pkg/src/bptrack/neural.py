"""Minimal reverse-mode differentiation for the fixed architectures used here.

Dense (MLP) stacks and a single GRU cell are the only differentiable blocks;
there is no graph-level autodiff. A Tape records primitive ops while active,
inference calls with no active tape run on plain arrays and allocate nothing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import FormatVersionMismatch, DimensionMismatch, ShapeMismatch
from .numerics import Rng

_TAPE = None

# incremented by mlp_forward/gru_forward; lets tests assert a mode ran no nets
FORWARD_CALLS = {"count": 0}


def reset_forward_counter():
    FORWARD_CALLS["count"] = 0


def forward_call_count() -> int:
    return FORWARD_CALLS["count"]


class Var:
    """Value node of the training graph."""

    __slots__ = ("value", "grad", "_backward")

    def __init__(self, value, backward=None):
        self.value = value
        self.grad = None
        self._backward = backward


class Param(Var):
    """Learnable leaf tensor; grad persists until zero_grad."""

    def __init__(self, value):
        super().__init__(np.asarray(value, dtype=float))


class Tape:
    """Records ops in creation order; backward consumes the tape exactly once."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _TAPE
        _TAPE = None
        return False

    def backward(self, loss: Var):
        if self._consumed:
            raise RuntimeError("tape already consumed")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def tape_active() -> bool:
    return _TAPE is not None


def _val(x):
    return x.value if isinstance(x, Var) else x


def _accum(v, g):
    if v.grad is None:
        v.grad = np.array(g, dtype=float)
    else:
        v.grad = v.grad + g


def _record(value, backward):
    node = Var(value, backward)
    _TAPE.nodes.append(node)
    return node


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _any_var(*xs):
    return any(isinstance(x, Var) for x in xs)


# ---------------------------------------------------------------------------
# primitive ops (value path when no tape is active or all inputs are constant)


def vaffine(x, weight, bias):
    xv, wv, bv = _val(x), _val(weight), _val(bias)
    if xv.shape[-1] != wv.shape[1]:
        raise DimensionMismatch(f"affine input {xv.shape} vs weight {wv.shape}")
    y = xv @ wv.T + bv
    if _TAPE is None or not _any_var(x, weight, bias):
        return y

    def backward(g):
        if isinstance(weight, Var):
            _accum(weight, np.outer(g, xv) if xv.ndim == 1 else g.T @ xv)
        if isinstance(bias, Var):
            _accum(bias, g if g.ndim == 1 else g.sum(axis=0))
        if isinstance(x, Var):
            _accum(x, g @ wv)

    return _record(y, backward)


def vlinear(x, weight):
    xv, wv = _val(x), _val(weight)
    y = xv @ wv.T
    if _TAPE is None or not _any_var(x, weight):
        return y

    def backward(g):
        if isinstance(weight, Var):
            _accum(weight, np.outer(g, xv) if xv.ndim == 1 else g.T @ xv)
        if isinstance(x, Var):
            _accum(x, g @ wv)

    return _record(y, backward)


def vrelu(x):
    xv = _val(x)
    y = np.maximum(xv, 0.0)
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, g * (xv > 0.0))

    return _record(y, backward)


def vtanh(x):
    xv = _val(x)
    y = np.tanh(xv)
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, g * (1.0 - y * y))

    return _record(y, backward)


def vsigmoid(x):
    xv = _val(x)
    y = expit(xv)
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _record(y, backward)


def vsoftplus(x):
    xv = _val(x)
    y = np.logaddexp(0.0, xv)
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, g * expit(xv))

    return _record(y, backward)


def vadd(a, b):
    av, bv = _val(a), _val(b)
    y = av + bv
    if _TAPE is None or not _any_var(a, b):
        return y

    def backward(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g, bv.shape))

    return _record(y, backward)


def vsub(a, b):
    av, bv = _val(a), _val(b)
    y = av - bv
    if _TAPE is None or not _any_var(a, b):
        return y

    def backward(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(-g, bv.shape))

    return _record(y, backward)


def vmul(a, b):
    av, bv = _val(a), _val(b)
    y = av * bv
    if _TAPE is None or not _any_var(a, b):
        return y

    def backward(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g * av, bv.shape))

    return _record(y, backward)


def vscale(x, c: float):
    xv = _val(x)
    y = xv * c
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, g * c)

    return _record(y, backward)


def vone_minus(x):
    xv = _val(x)
    y = 1.0 - xv
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, -g)

    return _record(y, backward)


def vconcat(parts):
    vals = [_val(p) for p in parts]
    y = np.concatenate(vals, axis=-1)
    if _TAPE is None or not any(isinstance(p, Var) for p in parts):
        return y
    sizes = [v.shape[-1] for v in vals]

    def backward(g):
        offset = 0
        for part, size in zip(parts, sizes):
            if isinstance(part, Var):
                _accum(part, g[..., offset : offset + size])
            offset += size

    return _record(y, backward)


def vslice(x, start, stop):
    xv = _val(x)
    y = xv[..., start:stop]
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        full = np.zeros_like(xv)
        full[..., start:stop] = g
        _accum(x, full)

    return _record(y, backward)


def vtile_rows(x, p):
    """Tile a vector (d,) into p identical rows (p, d)."""
    xv = _val(x)
    y = np.tile(xv, (p, 1))
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, g.sum(axis=0))

    return _record(y, backward)


def vrow(x, i):
    """Extract row i of a matrix (p, d) -> (d,)."""
    xv = _val(x)
    y = xv[i]
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        full = np.zeros_like(xv)
        full[i] = g
        _accum(x, full)

    return _record(y, backward)


def vweighted_rows(x, w):
    """w @ x for constant row weights w (p,), x (p, d) -> (d,)."""
    xv = _val(x)
    y = w @ xv
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, np.outer(w, g))

    return _record(y, backward)


def vfuse_rows(feats, w):
    """Per-row weighted sum of row-blocks.

    feats (p*m, d) viewed as (p, m, d); w (p, m) constant -> (p, d).
    """
    fv = _val(feats)
    p, m = w.shape
    f3 = fv.reshape(p, m, -1)
    y = np.einsum("pm,pmd->pd", w, f3)
    if _TAPE is None or not isinstance(feats, Var):
        return y

    def backward(g):
        _accum(feats, (w[:, :, None] * g[:, None, :]).reshape(fv.shape))

    return _record(y, backward)


def vsum(x):
    xv = _val(x)
    y = np.asarray(xv.sum())
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, np.full_like(xv, float(g)))

    return _record(y, backward)


def vabs(x):
    xv = _val(x)
    y = np.abs(xv)
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, g * np.sign(xv))

    return _record(y, backward)


def vmasked_sum(x, mask):
    """Sum of mask * x for a constant 0/1 mask; returns a scalar."""
    xv = _val(x)
    y = np.asarray((xv * mask).sum())
    if _TAPE is None or not isinstance(x, Var):
        return y

    def backward(g):
        _accum(x, float(g) * mask)

    return _record(y, backward)


# ---------------------------------------------------------------------------
# layers


@dataclass
class DenseLayer:
    weight: Param
    bias: Param
    activation: str = "identity"  # relu | tanh | identity

    @property
    def fan_in(self) -> int:
        return self.weight.value.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.value.shape[0]


def init_dense(rng: Rng, n_in: int, n_out: int, activation: str = "identity",
               zero: bool = False) -> DenseLayer:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; `zero` for neutral heads."""
    if zero:
        w = np.zeros((n_out, n_in))
        b = np.zeros(n_out)
    else:
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, (n_out, n_in))
        b = rng.uniform(-bound, bound, n_out)
    return DenseLayer(Param(w), Param(b), activation)


_ACTS = {"relu": vrelu, "tanh": vtanh, "identity": lambda x: x}


def mlp_forward(x, layers):
    """Affine + activation chain over a list of DenseLayer."""
    FORWARD_CALLS["count"] += 1
    out = x
    for layer in layers:
        out = vaffine(out, layer.weight, layer.bias)
        out = _ACTS[layer.activation](out)
    return out


class Mlp:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        return mlp_forward(x, self.layers)

    def named_parameters(self, prefix):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}.{i}.weight", layer.weight
            yield f"{prefix}.{i}.bias", layer.bias


def build_mlp(rng: Rng, sizes, activations, zero_last: bool = False) -> Mlp:
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        zero = zero_last and i == len(sizes) - 2
        layers.append(init_dense(rng, n_in, n_out, activations[i], zero=zero))
    return Mlp(layers)


@dataclass
class GruCell:
    """Gate convention: z, r sigmoid; candidate tanh on (r * h); h' = (1-z) h + z c."""

    w_z: Param
    u_z: Param
    b_z: Param
    w_r: Param
    u_r: Param
    b_r: Param
    w_h: Param
    u_h: Param
    b_h: Param

    @property
    def input_dim(self) -> int:
        return self.w_z.value.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.value.shape[0]

    def named_parameters(self, prefix):
        for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
            yield f"{prefix}.{name}", getattr(self, name)


def init_gru(rng: Rng, d_in: int, d_h: int) -> GruCell:
    bound_w = 1.0 / np.sqrt(d_in)
    bound_u = 1.0 / np.sqrt(d_h)

    def wmat():
        return Param(rng.uniform(-bound_w, bound_w, (d_h, d_in)))

    def umat():
        return Param(rng.uniform(-bound_u, bound_u, (d_h, d_h)))

    def bvec():
        return Param(np.zeros(d_h))

    return GruCell(wmat(), umat(), bvec(), wmat(), umat(), bvec(), wmat(), umat(), bvec())


def gru_forward(u, h, cell: GruCell):
    """One GRU step; u and h may be single vectors or row-batched matrices."""
    FORWARD_CALLS["count"] += 1
    if _val(u).shape[-1] != cell.input_dim:
        raise DimensionMismatch(
            f"GRU input dim {_val(u).shape[-1]} != {cell.input_dim}"
        )
    z = vsigmoid(vadd(vaffine(u, cell.w_z, cell.b_z), vlinear(h, cell.u_z)))
    r = vsigmoid(vadd(vaffine(u, cell.w_r, cell.b_r), vlinear(h, cell.u_r)))
    cand = vtanh(vadd(vaffine(u, cell.w_h, cell.b_h), vlinear(vmul(r, h), cell.u_h)))
    return vadd(vmul(vone_minus(z), h), vmul(z, cand))


def zero_grads(params):
    for _, p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def adam_step(values, grads, state: AdamState, names=None):
    """Bias-corrected Adam update; returns updated copies of `values`."""
    if names is None:
        names = [str(i) for i in range(len(values))]
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = []
    for name, value, grad in zip(names, values, grads):
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first[name] = m
        state.second[name] = v
        out.append(value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


def apply_adam(named_params, state: AdamState):
    """In-place Adam step over (name, Param) pairs; missing grads count as zero."""
    names = [n for n, _ in named_params]
    values = [p.value for _, p in named_params]
    grads = [p.grad if p.grad is not None else np.zeros_like(p.value)
             for _, p in named_params]
    for (_, p), new in zip(named_params, adam_step(values, grads, state, names)):
        p.value = new


# ---------------------------------------------------------------------------
# full parameter container and serialization


@dataclass
class NetMeta:
    """Architecture/configuration constants stored alongside the weights."""

    hidden_dim: int = 64
    state_dim: int = 4
    max_neighbors: int = 10
    feat_dim: int = 16
    map_channels: int = 8
    box_dim: int = 3
    pos_scale: float = 54.0
    vel_scale: float = 5.0
    linear_dt: float | None = None  # set for the diagnostic linear (CV) mode

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NetworkParams:
    """All learnable weights plus the fixed ROI feature head."""

    motion: "MotionParams"
    affinity: Mlp
    fpr: Mlp
    feature_head: Mlp
    meta: NetMeta

    def named_parameters(self):
        out = list(self.motion.named_parameters("motion"))
        out += list(self.affinity.named_parameters("affinity"))
        out += list(self.fpr.named_parameters("fpr"))
        out += list(self.feature_head.named_parameters("feature_head"))
        return out

    def motion_parameters(self):
        return list(self.motion.named_parameters("motion"))

    def factor_parameters(self):
        return list(self.affinity.named_parameters("affinity")) + list(
            self.fpr.named_parameters("fpr")
        )

    def trainable_parameters(self):
        # the ROI feature head stays at its seeded values
        return self.motion_parameters() + self.factor_parameters()


def affinity_input_dim(meta: NetMeta) -> int:
    # [dp(2) v_obj(2) u_obj(box) f_sa_obj | v_meas(2) u_meas(box) f_sa_meas]
    return 2 + 2 + meta.box_dim + meta.feat_dim + 2 + meta.box_dim + meta.feat_dim


def fpr_input_dim(meta: NetMeta) -> int:
    return 2 + meta.box_dim + meta.feat_dim


def build_network(meta: NetMeta, rng: Rng) -> NetworkParams:
    """Fresh network; factor-net output layers start at zero (neutral factors)."""
    from .motion import build_motion_params

    motion = build_motion_params(meta, rng.substream("motion"))
    affinity = build_mlp(
        rng.substream("affinity"),
        [affinity_input_dim(meta), 64, 64, 1],
        ["relu", "relu", "identity"],
        zero_last=True,
    )
    fpr = build_mlp(
        rng.substream("fpr"),
        [fpr_input_dim(meta), 64, 1],
        ["relu", "identity"],
        zero_last=True,
    )
    head = build_mlp(
        rng.substream("feature_head"),
        [5 * meta.map_channels, meta.feat_dim],
        ["tanh"],
    )
    return NetworkParams(motion, affinity, fpr, head, meta)


WEIGHTS_MAGIC = b"BPNW"
WEIGHTS_VERSION = 1


def save_weights(net: NetworkParams, path):
    """Self-describing binary container plus a plain-text sidecar manifest."""
    tensors = net.named_parameters()
    meta_json = json.dumps(net.meta.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(meta_json)))
        fh.write(meta_json)
        fh.write(struct.pack("<I", len(tensors)))
        for name, param in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            value = np.ascontiguousarray(param.value, dtype="<f8")
            fh.write(struct.pack("<B", value.ndim))
            for dim in value.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(value.tobytes())
    manifest = str(path) + ".manifest.txt"
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(f"format=bptrack-weights version={WEIGHTS_VERSION}\n")
        fh.write(f"meta={json.dumps(net.meta.to_dict(), sort_keys=True)}\n")
        for name, param in tensors:
            fh.write(f"{name} {'x'.join(str(s) for s in param.value.shape)}\n")


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatVersionMismatch(f"truncated weights file while reading {what}")
    return data


def load_weights(path, expected: dict | None = None) -> NetworkParams:
    """Rebuild a NetworkParams from file; checks magic, version and shapes.

    `expected` may pin meta fields (e.g. hidden_dim) to the caller's
    configuration; a disagreement raises ShapeMismatch.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != WEIGHTS_MAGIC:
            raise FormatVersionMismatch("not a weights file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version > WEIGHTS_VERSION:
            raise FormatVersionMismatch(f"weights version {version} is newer than {WEIGHTS_VERSION}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "meta length"))
        meta = NetMeta.from_dict(json.loads(_read_exact(fh, meta_len, "meta")))
        if expected:
            for key, want in expected.items():
                have = getattr(meta, key)
                if have != want:
                    raise ShapeMismatch(f"weights built with {key}={have}, config wants {want}")
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        stored = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dim"))[0] for _ in range(ndim)
            )
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(
                _read_exact(fh, 8 * count, f"tensor {name}"), dtype="<f8"
            )
            stored[name] = data.reshape(shape).astype(float)
    net = build_network(meta, Rng(0))
    for name, param in net.named_parameters():
        if name not in stored:
            raise FormatVersionMismatch(f"weights file lacks tensor {name}")
        if stored[name].shape != param.value.shape:
            raise ShapeMismatch(
                f"tensor {name}: stored {stored[name].shape}, expected {param.value.shape}"
            )
        param.value = stored[name]
    return net
