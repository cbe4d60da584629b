"""One full tracking step: predict, enhance, associate, update, initialize,
declare/estimate, prune; plus whole-scene orchestration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import neural
from .association import bp_marginals
from .errors import ConfigInvalid, MissingWeights
from .measurement import (
    BirthModel,
    ClutterModel,
    EnhancementFactors,
    KinShapeFeature,
    affinity_logits_rows,
    build_association_problem,
    fpr_logits,
    init_new_po,
    update_legacy,
)
from .motion import (
    MotionParams,
    PredictedPo,
    cv_predict,
    select_neighbors,
    sp_predict_traced,
)
from .neural import NetworkParams
from .numerics import (
    GaussianState,
    ParticleSet,
    Rng,
    UTParams,
    cholesky_psd,
    cv_process_noise,
)
from .simulator import roi_extract

log = logging.getLogger(__name__)

MODES = ("mb", "ne", "ne-motion", "ne-meas")


@dataclass
class PoState:
    """A potential object carried across steps."""

    id: int
    particles: ParticleSet
    gaussian: GaussianState
    existence: float
    hidden: np.ndarray
    birth_time: int
    last_box: np.ndarray
    class_id: int
    score: float


@dataclass
class TrackRecord:
    """Declared track estimate for one frame."""

    id: int
    state: np.ndarray
    existence: float
    score: float
    class_id: int


@dataclass
class TrackerConfig:
    mode: str = "mb"
    strategy: str = "joint-sp"  # prediction strategy for neural motion modes
    dt: float = 0.5
    p_s: float = 0.999
    p_d: float = 0.9
    t_dec: float = 0.5
    t_pru: float = 1e-4
    max_neighbors: int = 10
    particle_count: int = 10_000
    sigma_r_diag: tuple = (0.09, 0.09, 0.09, 0.09)
    q_accel: float = 0.5
    mu_fp: float = 2.0
    mu_n: float = 0.2
    region: tuple = (-54.0, 54.0, -54.0, 54.0)
    vel_limit: float = 6.0
    ut: UTParams = field(default_factory=UTParams)
    bp_max_iter: int = 200
    bp_tol: float = 1e-6
    score_blend: float = 0.7
    affinity_floor: bool = False
    use_affinity: bool = True
    use_fpr: bool = True
    force_neutral_factors: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"tracker.mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.t_dec < 1.0 or not 0.0 < self.t_pru < 1.0:
            raise ConfigInvalid("tracker thresholds must lie in (0, 1)")
        if self.t_pru >= self.t_dec:
            raise ConfigInvalid(
                f"tracker.t_pru ({self.t_pru}) must be below t_dec ({self.t_dec})"
            )
        if not 0.0 < self.p_d <= 1.0:
            raise ConfigInvalid(f"tracker.p_d must be in (0, 1], got {self.p_d}")
        if self.particle_count < 1:
            raise ConfigInvalid("tracker.particle_count must be >= 1")
        if self.dt <= 0:
            raise ConfigInvalid(f"tracker.dt must be > 0, got {self.dt}")

    @property
    def vel_box(self) -> tuple:
        v = self.vel_limit
        return (-v, v, -v, v)

    @property
    def neural_motion(self) -> bool:
        return self.mode in ("ne", "ne-motion")

    @property
    def neural_factors(self) -> bool:
        return self.mode in ("ne", "ne-meas") and not self.force_neutral_factors

    @classmethod
    def from_scenario(cls, scenario, mode: str = "mb", **overrides):
        """Tracker configuration matched to a scene's generation parameters."""
        base = dict(
            mode=mode,
            dt=scenario.dt,
            p_d=scenario.p_d,
            sigma_r_diag=tuple(scenario.sigma_r_diag),
            mu_fp=max(scenario.mu_fp, 1e-6),
            mu_n=max(scenario.birth_rate, 1e-6),
            region=tuple(scenario.region),
            vel_limit=scenario.vel_limit,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainHooks:
    """Per-frame handles collected while a tape is active."""

    mean_handles: dict  # po id -> taped predicted-mean handle
    affinity_logits: object | None  # (I, J) taped logits or None
    fpr_logits: object | None  # (J,) taped logits or None
    legacy_ids: list
    predicted: dict  # po id -> PredictedPo


@dataclass
class _PredictedLegacy:
    existence: float
    particles: ParticleSet


class TrackerRun:
    """Sequential tracker over one scene; owns the id counter and rng stream."""

    def __init__(self, cfg: TrackerConfig, net: NetworkParams | None, rng: Rng):
        if (cfg.neural_motion or cfg.mode == "ne-meas") and net is None:
            raise MissingWeights(f"mode {cfg.mode!r} requires network weights")
        self.cfg = cfg
        self.net = net
        self.rng = rng
        self.next_id = 0
        self.prev_map = None
        self.frame_index = 0
        self.q = cv_process_noise(cfg.dt, cfg.q_accel)
        self.clutter = ClutterModel(cfg.mu_fp, cfg.region, cfg.vel_box)
        self.birth = BirthModel(cfg.mu_n, cfg.region, cfg.vel_box)
        self.sigma_diag = np.asarray(cfg.sigma_r_diag, dtype=float)
        self.hidden_dim = net.meta.hidden_dim if net is not None else 0

    # ------------------------------------------------------------------
    def _predict(self, state, hidden_overrides=None):
        """Predicted summaries for all legacy objects (mode-dependent path)."""
        cfg = self.cfg
        predictions = []
        handles = []
        hidden_handles = []
        if cfg.neural_motion:
            gaussians = [po.gaussian for po in state]
            exists = [po.existence for po in state]
            for i, po in enumerate(state):
                neighbors = select_neighbors(i, gaussians, exists, cfg.t_dec,
                                             cfg.max_neighbors)
                hidden = po.hidden
                if hidden_overrides is not None and po.id in hidden_overrides:
                    hidden = hidden_overrides[po.id]
                pred, mean_h, hidden_h = sp_predict_traced(
                    po.gaussian, hidden, po.existence, neighbors,
                    self.net.motion, self.q, cfg.p_s, cfg.ut, cfg.strategy,
                )
                predictions.append(pred)
                handles.append(mean_h)
                hidden_handles.append(hidden_h)
        else:
            for po in state:
                gauss = cv_predict(po.gaussian, cfg.dt, self.q)
                existence = min(max(cfg.p_s * po.existence, 0.0), 1.0)
                pred = PredictedPo(gauss, existence, np.zeros(self.hidden_dim))
                predictions.append(pred)
                handles.append(gauss.mean)
                hidden_handles.append(pred.hidden)
        return predictions, handles, hidden_handles

    def _sample_proposals(self, predictions):
        n = self.cfg.particle_count
        proposals = []
        for pred in predictions:
            ell = cholesky_psd(pred.gaussian.cov)
            noise = self.rng.standard_normal((n, pred.gaussian.dim))
            samples = pred.gaussian.mean + noise @ ell.T
            proposals.append(ParticleSet(samples, np.full(n, 1.0 / n)))
        return proposals

    def _measurement_features(self, frame):
        feats = []
        for m in frame.measurements:
            shape, _ = roi_extract(frame.feature_map, m.z[:2], m.box,
                                   self.cfg.region, self.net.feature_head)
            m.shape_feature = shape
            feats.append(KinShapeFeature(m.z[:2], m.z[2:], m.box, shape))
        return feats

    def _object_features(self, state, predictions):
        feats = []
        feat_dim = self.net.meta.feat_dim
        for po, pred in zip(state, predictions):
            if self.prev_map is not None:
                shape, _ = roi_extract(self.prev_map, po.gaussian.mean[:2], po.last_box,
                                       self.cfg.region, self.net.feature_head)
            else:
                shape = np.zeros(feat_dim)
            feats.append(KinShapeFeature(pred.gaussian.mean[:2], pred.gaussian.mean[2:],
                                         po.last_box, shape))
        return feats

    def _factors(self, state, predictions, mean_handles, frame):
        """Enhancement factor tables plus (in training) the raw logit handles."""
        n_obj, n_meas = len(state), len(frame.measurements)
        if not self.cfg.neural_factors or n_meas == 0:
            return EnhancementFactors.neutral(n_obj, n_meas), None, None
        meas_feats = self._measurement_features(frame)
        obj_feats = self._object_features(state, predictions)
        meta = self.net.meta

        fpr_raw = fpr_logits(meas_feats, self.net.fpr, meta)
        fp_vals = 1.0 / (1.0 + np.exp(-np.asarray(neural._val(fpr_raw)).reshape(-1)))
        if not self.cfg.use_fpr:
            fp_vals = np.ones(n_meas)
            fpr_raw = None

        aff_rows = []
        affinity = np.ones((n_obj, n_meas))
        if self.cfg.use_affinity:
            for i in range(n_obj):
                logits = affinity_logits_rows(
                    mean_handles[i], obj_feats[i].box, obj_feats[i].shape,
                    meas_feats, self.net.affinity, meta,
                )
                aff_rows.append(logits)
                affinity[i] = np.exp(np.asarray(neural._val(logits)).reshape(-1))
            if self.cfg.affinity_floor:
                affinity = np.maximum(affinity, 1.0)
        else:
            aff_rows = None
        return EnhancementFactors(affinity, fp_vals), aff_rows, fpr_raw

    # ------------------------------------------------------------------
    def step(self, state, frame, collect_hooks: bool = False):
        """Process one frame; returns (new state, estimates, diagnostics[, hooks])."""
        cfg = self.cfg
        hidden_overrides = getattr(self, "_hidden_vars", None)
        predictions, mean_handles, hidden_handles = self._predict(state, hidden_overrides)
        proposals = self._sample_proposals(predictions)
        factors, aff_rows, fpr_raw = self._factors(state, predictions, mean_handles, frame)

        legacy = [_PredictedLegacy(pred.existence, prop)
                  for pred, prop in zip(predictions, proposals)]
        problem = build_association_problem(
            legacy, frame.measurements, factors, cfg.p_d, self.clutter, self.birth,
            self.sigma_diag,
        )
        marginals = bp_marginals(problem, cfg.bp_max_iter, cfg.bp_tol)

        new_state = []
        for i, (po, pred, prop) in enumerate(zip(state, predictions, proposals)):
            particles, gaussian, existence = update_legacy(
                pred.existence, prop, marginals.po_assoc[i], frame.measurements,
                factors.affinity[i], factors.fp_rejection, cfg.p_d, self.clutter,
                self.sigma_diag, cfg.particle_count, self.rng,
            )
            best = int(np.argmax(marginals.po_assoc[i]))
            last_box, score = po.last_box, po.score
            if best >= 1:
                meas = frame.measurements[best - 1]
                last_box = meas.box
                score = cfg.score_blend * score + (1.0 - cfg.score_blend) * meas.score
            new_state.append(PoState(po.id, particles, gaussian, existence,
                                     np.asarray(pred.hidden), po.birth_time,
                                     last_box, po.class_id, score))

        for j, meas in enumerate(frame.measurements):
            particles, gaussian, existence = init_new_po(
                meas, marginals.meas_assoc[j, 0], self.birth, self.clutter,
                float(factors.fp_rejection[j]), self.sigma_diag, self.rng,
                cfg.particle_count,
            )
            new_state.append(PoState(self.next_id, particles, gaussian, existence,
                                     np.zeros(self.hidden_dim), self.frame_index,
                                     meas.box, meas.class_id, float(meas.score)))
            self.next_id += 1

        pruned = prune(new_state, cfg)
        estimates = declare_and_estimate(pruned, cfg)
        diagnostics = {
            "bp_iterations": marginals.iterations,
            "bp_converged": marginals.converged,
            "n_legacy": len(state),
            "n_measurements": len(frame.measurements),
            "n_pruned": len(new_state) - len(pruned),
            "affinity_min": float(factors.affinity.min()) if factors.affinity.size else 1.0,
            "affinity_max": float(factors.affinity.max()) if factors.affinity.size else 1.0,
            "fpr_min": float(factors.fp_rejection.min()) if factors.fp_rejection.size else 1.0,
            "fpr_max": float(factors.fp_rejection.max()) if factors.fp_rejection.size else 1.0,
        }
        self.prev_map = frame.feature_map
        self.frame_index += 1
        if collect_hooks:
            hooks = TrainHooks(
                mean_handles={po.id: h for po, h in zip(state, mean_handles)},
                affinity_logits=aff_rows,
                fpr_logits=fpr_raw,
                legacy_ids=[po.id for po in state],
                predicted={po.id: pred for po, pred in zip(state, predictions)},
            )
            self._hidden_vars = {po.id: h for po, h in zip(state, hidden_handles)}
            return pruned, estimates, diagnostics, hooks
        return pruned, estimates, diagnostics


def declare_and_estimate(state, cfg: TrackerConfig):
    """MMSE estimates of objects whose existence clears the declaration threshold."""
    records = []
    for po in state:
        if po.existence >= cfg.t_dec:
            records.append(TrackRecord(po.id, po.particles.mean(), po.existence,
                                       po.score, po.class_id))
    records.sort(key=lambda r: r.id)
    return records


def prune(state, cfg: TrackerConfig):
    """Drop objects below the pruning threshold (closed boundary: equal stays)."""
    return [po for po in state if po.existence >= cfg.t_pru]


def run_scene(scene, cfg: TrackerConfig, net: NetworkParams | None, seed: int):
    """Track a whole scene; returns (per-frame estimate lists, diagnostics list)."""
    rng = Rng(seed).substream("track")
    run = TrackerRun(cfg, net, rng)
    state = []
    all_estimates = []
    all_diags = []
    for frame in scene.frames:
        state, estimates, diag = run.step(state, frame)
        all_estimates.append(estimates)
        all_diags.append(diag)
    return all_estimates, all_diags
