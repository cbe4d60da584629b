"""Prediction step: constant-velocity baseline, the learnable interacting
motion model, and sigma-point marginalization to a predicted Gaussian,
predicted existence and a hidden-state point estimate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from . import neural
from .errors import DimensionMismatch
from .neural import (
    DenseLayer,
    GruCell,
    Mlp,
    NetMeta,
    Param,
    build_mlp,
    gru_forward,
    init_gru,
    vadd,
    vconcat,
    vfuse_rows,
    vlinear,
    vmul,
    vrow,
    vtile_rows,
    vweighted_rows,
)
from .numerics import (
    GaussianState,
    Rng,
    UTParams,
    cv_transition,
    generate_sigma_points,
    symmetrize_psd,
)

COINCIDENT_EPS = 1e-6  # floor on neighbor distances (m)


@dataclass
class NeighborSet:
    """Gaussian summaries of nearby tracked objects, ascending by distance."""

    states: list

    @property
    def count(self) -> int:
        return len(self.states)

    def mean_matrix(self) -> np.ndarray:
        return np.stack([g.mean for g in self.states])


@dataclass
class PredictedPo:
    gaussian: GaussianState
    existence: float
    hidden: np.ndarray


class DecoderHead:
    """MLP head whose output layer applies a fixed diagonal unit scale.

    The scale keeps every learnable tensor O(1) while the outputs live in
    meters / meters-per-second; with zero weights the output is exactly the
    bias vector.
    """

    def __init__(self, hidden: Mlp, out_weight: Param, out_bias: Param,
                 out_scale: np.ndarray):
        self.hidden = hidden
        self.out_weight = out_weight
        self.out_bias = out_bias
        self.out_scale = np.asarray(out_scale, dtype=float)

    def forward(self, x):
        h = self.hidden.forward(x)
        return vadd(vmul(vlinear(h, self.out_weight), self.out_scale), self.out_bias)

    def named_parameters(self, prefix):
        yield from self.hidden.named_parameters(f"{prefix}.hidden")
        yield f"{prefix}.out.weight", self.out_weight
        yield f"{prefix}.out.bias", self.out_bias


@dataclass
class MotionParams:
    """Weights of the interacting motion model (or the diagnostic linear mode)."""

    encoder_a: Mlp | None
    encoder_b: Mlp | None
    gru: GruCell | None
    decoder: DecoderHead | None
    hidden_dim: int
    state_dim: int
    max_neighbors: int
    in_scale_inv: np.ndarray
    linear_f: np.ndarray | None = None

    @property
    def is_linear(self) -> bool:
        return self.linear_f is not None

    def named_parameters(self, prefix):
        if self.is_linear:
            return []
        out = list(self.encoder_a.named_parameters(f"{prefix}.encoder_a"))
        out += list(self.encoder_b.named_parameters(f"{prefix}.encoder_b"))
        out += list(self.gru.named_parameters(f"{prefix}.gru"))
        out += list(self.decoder.named_parameters(f"{prefix}.decoder"))
        return out


def build_motion_params(meta: NetMeta, rng: Rng) -> MotionParams:
    d_h, dim = meta.hidden_dim, meta.state_dim
    scale = np.array([meta.pos_scale, meta.pos_scale, meta.vel_scale, meta.vel_scale])
    if meta.linear_dt is not None:
        return MotionParams(None, None, None, None, d_h, dim, meta.max_neighbors,
                            1.0 / scale, cv_transition(meta.linear_dt, dim))
    enc_a = build_mlp(rng.substream("enc_a"), [dim + d_h, d_h, d_h], ["tanh", "tanh"])
    enc_b = build_mlp(rng.substream("enc_b"), [dim, d_h, d_h], ["tanh", "tanh"])
    gru = init_gru(rng.substream("gru"), 2 * d_h, d_h)
    dec_rng = rng.substream("decoder")
    hidden = build_mlp(dec_rng, [d_h, d_h], ["tanh"])
    bound = 1.0 / np.sqrt(d_h)
    out_w = Param(dec_rng.uniform(-bound, bound, (dim, d_h)))
    out_b = Param(dec_rng.uniform(-bound, bound, dim))
    decoder = DecoderHead(hidden, out_w, out_b, scale)
    return MotionParams(enc_a, enc_b, gru, decoder, d_h, dim, meta.max_neighbors,
                        1.0 / scale)


def linear_motion_params(dt: float, meta: NetMeta | None = None) -> MotionParams:
    """Diagnostic mode: the forward map is exactly the CV transition."""
    meta = meta or NetMeta()
    scale = np.array([meta.pos_scale, meta.pos_scale, meta.vel_scale, meta.vel_scale])
    return MotionParams(None, None, None, None, meta.hidden_dim, meta.state_dim,
                        meta.max_neighbors, 1.0 / scale, cv_transition(dt, meta.state_dim))


def cv_predict(g: GaussianState, dt: float, q: np.ndarray) -> GaussianState:
    """Closed-form constant-velocity prediction."""
    f = cv_transition(dt, g.dim)
    return GaussianState(f @ g.mean, f @ g.cov @ f.T + np.asarray(q, dtype=float))


def neighbor_weights(ref_pos: np.ndarray, neighbor_pos: np.ndarray) -> np.ndarray:
    """Inverse-distance weights normalized to sum 1 (floored at COINCIDENT_EPS)."""
    neighbor_pos = np.asarray(neighbor_pos, dtype=float)
    if len(neighbor_pos) == 0:
        return np.zeros(0)
    dist = np.linalg.norm(neighbor_pos - np.asarray(ref_pos, dtype=float), axis=-1)
    inv = 1.0 / np.maximum(dist, COINCIDENT_EPS)
    return inv / inv.sum()


def _neighbor_weight_matrix(ref_pos: np.ndarray, neighbor_pos: np.ndarray) -> np.ndarray:
    """Row-wise inverse-distance weights: ref (p,2), neighbors (p,m,2) -> (p,m)."""
    dist = np.linalg.norm(neighbor_pos - ref_pos[:, None, :], axis=-1)
    inv = 1.0 / np.maximum(dist, COINCIDENT_EPS)
    return inv / inv.sum(axis=1, keepdims=True)


def motion_forward_batch(states: np.ndarray, neighbors, hidden, params: MotionParams):
    """Propagate a batch of state rows through the joint transition function.

    states (p, L) and neighbors (p, m, L) are plain arrays; hidden is shared
    across rows and may be a Var while training. Returns (next states (p, L),
    next hidden (p, d_h)).
    """
    states = np.asarray(states, dtype=float)
    p = states.shape[0]
    if states.shape[1] != params.state_dim:
        raise DimensionMismatch(f"state dim {states.shape[1]} != {params.state_dim}")
    if params.is_linear:
        return states @ params.linear_f.T, np.zeros((p, params.hidden_dim))
    scaled = states * params.in_scale_inv
    h_rows = vtile_rows(hidden, p)
    feat_x = params.encoder_a.forward(vconcat([scaled, h_rows]))
    if neighbors is not None and neighbors.shape[1] > 0:
        m = neighbors.shape[1]
        flat = (np.asarray(neighbors, dtype=float) * params.in_scale_inv).reshape(p * m, -1)
        feats = params.encoder_b.forward(flat)
        weights = _neighbor_weight_matrix(states[:, :2], neighbors[:, :, :2])
        feat_s = vfuse_rows(feats, weights)
    else:
        feat_s = np.zeros((p, params.hidden_dim))
    gru_in = vconcat([feat_x, feat_s])
    hidden_next = gru_forward(gru_in, hidden, params.gru)
    state_next = params.decoder.forward(hidden_next)
    return state_next, hidden_next


def motion_forward(x, neighbor_means, h, params: MotionParams):
    """Single-step transition: (x_next, h_next) for one object."""
    x = np.asarray(x, dtype=float)
    stack = None
    if neighbor_means is not None and len(neighbor_means) > 0:
        stack = np.asarray(neighbor_means, dtype=float)[None, :, :]
    x_next, h_next = motion_forward_batch(x[None, :], stack, h, params)
    return vrow(x_next, 0), vrow(h_next, 0)


STRATEGIES = ("mean-only", "object-sp", "joint-sp")


def sp_predict(po, neighbors: NeighborSet, params: MotionParams, q: np.ndarray,
               p_s: float, ut: UTParams, strategy: str = "joint-sp") -> PredictedPo:
    """Predicted Gaussian, existence, and hidden-state point estimate."""
    pred, _, _ = sp_predict_traced(po.gaussian, po.hidden, po.existence, neighbors,
                                   params, q, p_s, ut, strategy)
    return pred


def sp_predict_traced(gaussian: GaussianState, hidden, existence: float,
                      neighbors: NeighborSet, params: MotionParams, q: np.ndarray,
                      p_s: float, ut: UTParams, strategy: str):
    """As sp_predict, also returning the (possibly taped) mean/hidden handles."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown prediction strategy {strategy!r}")
    dim = gaussian.dim
    q = np.asarray(q, dtype=float)
    m_count = neighbors.count if neighbors is not None else 0
    neighbor_means = neighbors.mean_matrix() if m_count else None

    if strategy == "mean-only":
        points = gaussian.mean[None, :]
        stack = neighbor_means[None, :, :] if m_count else None
        w_mean = np.array([1.0])
        w_cov = np.zeros(1)
    elif strategy == "object-sp":
        sps = generate_sigma_points(gaussian, ut)
        points = sps.points
        stack = (np.tile(neighbor_means, (len(points), 1, 1)) if m_count else None)
        w_mean, w_cov = sps.weights_mean, sps.weights_cov
    else:  # joint-sp: stack the object with its present stochastic neighbors
        # zero-covariance neighbor blocks are Dirac points and ride along as
        # constants, so the stacking degenerates exactly to object-sp when
        # every neighbor covariance is zero
        stochastic = [i for i in range(m_count)
                      if float(np.trace(neighbors.states[i].cov)) > 0.0]
        blocks = [gaussian] + [neighbors.states[i] for i in stochastic]
        mean = np.concatenate([b.mean for b in blocks])
        cov = block_diag(*[b.cov for b in blocks])
        sps = generate_sigma_points(GaussianState(mean, cov), ut)
        points = sps.points[:, :dim]
        if m_count:
            stack = np.empty((len(sps.points), m_count, dim))
            for slot, i in enumerate(stochastic):
                stack[:, i, :] = sps.points[:, dim * (slot + 1) : dim * (slot + 2)]
            for i in range(m_count):
                if i not in stochastic:
                    stack[:, i, :] = neighbors.states[i].mean
        else:
            stack = None
        w_mean, w_cov = sps.weights_mean, sps.weights_cov

    states_next, hidden_next = motion_forward_batch(points, stack, hidden, params)
    mean_handle = vweighted_rows(states_next, w_mean)
    hidden_handle = vweighted_rows(hidden_next, w_mean)

    values = neural._val(states_next)
    mean_value = np.asarray(neural._val(mean_handle), dtype=float)
    if strategy == "mean-only":
        cov_value = q.copy()
    else:
        dev = values - mean_value
        spread = (dev * w_cov[:, None]).T @ dev
        cov_value = symmetrize_psd(spread) + q
    existence_pred = min(max(p_s * existence, 0.0), 1.0)
    pred = PredictedPo(
        GaussianState(mean_value.copy(), cov_value),
        existence_pred,
        np.array(neural._val(hidden_handle), dtype=float),
    )
    return pred, mean_handle, hidden_handle


def select_neighbors(index: int, gaussians: list, existences: list, t_dec: float,
                     max_neighbors: int) -> NeighborSet:
    """Eligible neighbors of object `index`: existence >= t_dec, nearest first."""
    ref = gaussians[index].mean[:2]
    scored = []
    for j, (g, ex) in enumerate(zip(gaussians, existences)):
        if j == index or ex < t_dec:
            continue
        scored.append((float(np.linalg.norm(g.mean[:2] - ref)), j))
    scored.sort()
    picked = [gaussians[j] for _, j in scored[:max_neighbors]]
    return NeighborSet(picked)
