"""Likelihoods, learnable enhancement factors, association weight tables,
particle-based legacy update and new-object initialization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .association import AssociationProblem
from .errors import DimensionMismatch
from .neural import Mlp, NetMeta, vconcat, vscale, vslice, vsub, vtile_rows
from .numerics import GaussianState, ParticleSet, Rng, gaussian_logpdf, systematic_resample

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

# fixed input scalings for the factor networks (position gap in m, box in m/rad)
AFF_DP_SCALE = 5.0
BOX_SCALE = np.array([5.0, 3.0, math.pi])


@dataclass
class Measurement:
    """One detection: 4-D position/velocity plus score, box and class."""

    z: np.ndarray  # (4,) [px py vx vy]
    score: float
    box: np.ndarray  # (3,) [length width yaw]
    class_id: int = 0
    shape_feature: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.box = np.asarray(self.box, dtype=float)


@dataclass
class ClutterModel:
    """Poisson false positives, uniform over region x velocity box."""

    mu_fp: float
    region: tuple  # (xmin, xmax, ymin, ymax)
    vel_box: tuple  # (vxmin, vxmax, vymin, vymax)

    @property
    def density(self) -> float:
        xmin, xmax, ymin, ymax = self.region
        vxmin, vxmax, vymin, vymax = self.vel_box
        volume = (xmax - xmin) * (ymax - ymin) * (vxmax - vxmin) * (vymax - vymin)
        return 1.0 / volume

    def intensity(self, z=None) -> float:
        return self.mu_fp * self.density


@dataclass
class BirthModel:
    """Poisson newborn objects, uniform over the same support as clutter."""

    mu_n: float
    region: tuple
    vel_box: tuple

    @property
    def density(self) -> float:
        xmin, xmax, ymin, ymax = self.region
        vxmin, vxmax, vymin, vymax = self.vel_box
        volume = (xmax - xmin) * (ymax - ymin) * (vxmax - vxmin) * (vymax - vymin)
        return 1.0 / volume


@dataclass
class EnhancementFactors:
    """Learnable multipliers on the association weights."""

    affinity: np.ndarray  # (I, J), > 0
    fp_rejection: np.ndarray  # (J,), in (0, 1)

    @classmethod
    def neutral(cls, n_objects: int, n_measurements: int) -> "EnhancementFactors":
        return cls(np.ones((n_objects, n_measurements)), np.ones(n_measurements))


@dataclass
class KinShapeFeature:
    """Kinematic + shape feature bundle for one object or measurement."""

    pos: np.ndarray
    vel: np.ndarray
    box: np.ndarray
    shape: np.ndarray


def likelihood(z: Measurement, x: np.ndarray, sigma_r: np.ndarray) -> float:
    """N(z.z; x, sigma_r) density."""
    return math.exp(gaussian_logpdf(z.z, GaussianState(np.asarray(x, float), sigma_r)))


def likelihood_matrix(meas_z: np.ndarray, particles: np.ndarray,
                      sigma_diag: np.ndarray) -> np.ndarray:
    """Diagonal-noise Gaussian densities, (J, N) for meas (J,4) vs particles (N,4)."""
    sigma_diag = np.asarray(sigma_diag, dtype=float)
    diff = meas_z[:, None, :] - particles[None, :, :]
    quad = np.sum(diff * diff / sigma_diag, axis=2)
    norm = math.exp(-0.5 * (len(sigma_diag) * LOG_2PI + float(np.log(sigma_diag).sum())))
    return norm * np.exp(-0.5 * quad)


def affinity_input(obj: KinShapeFeature, meas: KinShapeFeature,
                   meta: NetMeta) -> np.ndarray:
    """Scaled feature difference vector feeding the affinity network."""
    return np.concatenate([
        (obj.pos - meas.pos) / AFF_DP_SCALE,
        obj.vel / meta.vel_scale,
        obj.box / BOX_SCALE,
        obj.shape,
        meas.vel / meta.vel_scale,
        meas.box / BOX_SCALE,
        meas.shape,
    ])


def fpr_input(meas: KinShapeFeature, meta: NetMeta) -> np.ndarray:
    return np.concatenate([meas.vel / meta.vel_scale, meas.box / BOX_SCALE, meas.shape])


def affinity_factor(obj: KinShapeFeature, meas: KinShapeFeature, mlp: Mlp,
                    meta: NetMeta, floor: bool = False) -> float:
    """exp(MLP(feature difference)); floor mode clamps the factor to >= 1."""
    raw = float(np.asarray(mlp.forward(affinity_input(obj, meas, meta))).reshape(()))
    factor = math.exp(raw)
    return max(factor, 1.0) if floor else factor


def fpr_factor(meas: KinShapeFeature, mlp: Mlp, meta: NetMeta) -> float:
    """Sigmoid-mapped false-positive rejection factor in (0, 1)."""
    raw = float(np.asarray(mlp.forward(fpr_input(meas, meta))).reshape(()))
    return 1.0 / (1.0 + math.exp(-raw))


def affinity_logits_rows(mean_handle, obj_box, obj_shape, meas_feats,
                         mlp: Mlp, meta: NetMeta):
    """Affinity logits for one object against all measurements (training path).

    mean_handle is the (possibly taped) predicted mean; the rows stay
    differentiable w.r.t. the motion output and the affinity weights.
    """
    n = len(meas_feats)
    pos = vscale(vslice(mean_handle, 0, 2), 1.0 / AFF_DP_SCALE)
    vel = vscale(vslice(mean_handle, 2, 4), 1.0 / meta.vel_scale)
    meas_pos = np.stack([m.pos for m in meas_feats]) / AFF_DP_SCALE
    meas_rest = np.concatenate([
        np.stack([m.vel for m in meas_feats]) / meta.vel_scale,
        np.stack([m.box for m in meas_feats]) / BOX_SCALE,
        np.stack([m.shape for m in meas_feats]),
    ], axis=1)
    obj_rest = np.tile(np.concatenate([obj_box / BOX_SCALE, obj_shape]), (n, 1))
    rows = vconcat([
        vsub(vtile_rows(pos, n), meas_pos),
        vtile_rows(vel, n),
        obj_rest,
        meas_rest,
    ])
    return mlp.forward(rows)  # (n, 1) logits


def fpr_logits(meas_feats, mlp: Mlp, meta: NetMeta):
    """(J, 1) rejection logits for all measurements (training path)."""
    rows = np.stack([fpr_input(m, meta) for m in meas_feats])
    return mlp.forward(rows)


def gaussian_support_mass(z: np.ndarray, sigma_diag: np.ndarray, region: tuple,
                          vel_box: tuple) -> float:
    """Closed-form mass of N(z, diag) inside the region x velocity-box support."""
    lows = np.array([region[0], region[2], vel_box[0], vel_box[2]])
    highs = np.array([region[1], region[3], vel_box[1], vel_box[3]])
    sd = np.sqrt(np.asarray(sigma_diag, dtype=float))
    return float(np.prod(ndtr((highs - z) / sd) - ndtr((lows - z) / sd)))


def birth_odds(z: np.ndarray, f_fpr_j: float, birth: BirthModel,
               clutter: ClutterModel, sigma_diag: np.ndarray) -> float:
    """New-object-vs-clutter odds for one unclaimed measurement."""
    mass = gaussian_support_mass(z, sigma_diag, birth.region, birth.vel_box)
    return f_fpr_j * birth.mu_n * birth.density * mass / clutter.intensity(z)


def build_association_problem(legacy, meas, factors: EnhancementFactors, p_d: float,
                              clutter: ClutterModel, birth: BirthModel,
                              sigma_diag: np.ndarray) -> AssociationProblem:
    """Association weight tables from predicted particles and enhancement factors.

    `legacy` entries provide .existence (predicted) and .particles
    (proposal samples with normalized weights).
    """
    n_obj = len(legacy)
    n_meas = len(meas)
    pair = np.zeros((n_obj, n_meas + 1))
    unassoc = np.ones(n_meas)
    if n_meas:
        meas_z = np.stack([m.z for m in meas])
        c_fp = np.array([clutter.intensity(m.z) for m in meas])
        for j, m in enumerate(meas):
            unassoc[j] = 1.0 + birth_odds(m.z, float(factors.fp_rejection[j]),
                                          birth, clutter, sigma_diag)
    for i, po in enumerate(legacy):
        exist = float(po.existence)
        pair[i, 0] = (1.0 - exist) + exist * (1.0 - p_d)
        if n_meas:
            like = likelihood_matrix(meas_z, po.particles.particles, sigma_diag)
            expectation = like @ po.particles.weights  # (J,)
            pair[i, 1:] = (exist * factors.fp_rejection * factors.affinity[i]
                           * p_d * expectation / c_fp)
    return AssociationProblem(pair, unassoc)


def update_legacy(pred_existence: float, particles: ParticleSet, kappa_row: np.ndarray,
                  meas, affinity_row: np.ndarray, fp_rejection: np.ndarray, p_d: float,
                  clutter: ClutterModel, sigma_diag: np.ndarray, resample_n: int,
                  rng: Rng):
    """Particle reweighting + existence update for one legacy object.

    Returns (particle set, gaussian summary, posterior existence).
    """
    n_meas = len(meas)
    weights_like = np.full(len(particles.particles), kappa_row[0] * (1.0 - p_d))
    if n_meas:
        meas_z = np.stack([m.z for m in meas])
        like = likelihood_matrix(meas_z, particles.particles, sigma_diag)
        c_fp = np.array([clutter.intensity(m.z) for m in meas])
        coeff = kappa_row[1:] * fp_rejection * affinity_row * p_d / c_fp
        weights_like = weights_like + coeff @ like

    mass_exist = pred_existence * float(particles.weights @ weights_like)
    mass_gone = (1.0 - pred_existence) * float(kappa_row[0])
    total = mass_exist + mass_gone
    if total <= 0.0 or not math.isfinite(total):
        log.warning("degenerate particle mass (%.3e); forcing existence to 0", total)
        existence = 0.0
        posterior = particles.weights.copy()
    else:
        existence = mass_exist / total
        posterior = particles.weights * weights_like
    post_total = posterior.sum()
    if post_total <= 0.0 or not math.isfinite(post_total):
        log.warning("zero posterior particle mass; keeping prior weights")
        posterior = particles.weights.copy()
        post_total = posterior.sum()
    posterior = posterior / post_total

    idx = systematic_resample(posterior, resample_n, rng)
    resampled = particles.particles[idx]
    out = ParticleSet(resampled, np.full(resample_n, 1.0 / resample_n))
    gaussian = GaussianState(out.mean(), out.cov())
    return out, gaussian, float(min(max(existence, 0.0), 1.0))


def init_new_po(z: Measurement, iota_unclaimed: float, birth: BirthModel,
                clutter: ClutterModel, f_fpr_j: float, sigma_diag: np.ndarray,
                rng: Rng, n_particles: int):
    """New potential object for one measurement.

    Returns (particle set, gaussian summary, existence); the hidden state of a
    newborn object is the zero vector (set by the caller).
    """
    odds = birth_odds(z.z, f_fpr_j, birth, clutter, sigma_diag)
    existence = float(iota_unclaimed) * odds / (1.0 + odds)
    cov = np.diag(np.asarray(sigma_diag, dtype=float))
    samples = z.z + rng.standard_normal((n_particles, len(z.z))) * np.sqrt(sigma_diag)
    particles = ParticleSet(samples, np.full(n_particles, 1.0 / n_particles))
    gaussian = GaussianState(z.z.copy(), cov)
    return particles, gaussian, float(min(max(existence, 0.0), 1.0))
