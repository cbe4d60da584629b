"""Loss functions, ground-truth labeling, augmentation, motion pretraining
and joint training of the full network."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, NonFiniteLoss
from .evaluation import gated_match
from .motion import MotionParams, build_motion_params, motion_forward
from .neural import (
    AdamState,
    NetMeta,
    NetworkParams,
    Tape,
    apply_adam,
    vabs,
    vadd,
    vmasked_sum,
    vscale,
    vsoftplus,
    vsub,
    vsum,
    zero_grads,
    _val,
)
from .numerics import Rng
from .simulator import Frame, Scene
from .tracker import TrackerConfig, TrackerRun

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class MatchLabels:
    """Ground-truth labels for one frame."""

    af_gt: np.ndarray  # (I, J) binary, at most one 1 per row/column
    fpr_gt: np.ndarray  # (J,) binary, 1 = true measurement
    motion_pairs: list  # (legacy index, gt index)


@dataclass
class TrainConfig:
    w_fpr: float = 0.1
    w_meas: float = 1.0
    lr_joint: float = 1e-4
    batch_joint: int = 1
    lr_pre: float = 1e-3
    batch_pre: int = 32
    epochs_pre: int = 40
    epochs_joint: int = 3
    aug_pos_noise: float = 0.3
    aug_vel_noise: float = 0.3
    aug_bias: float = 0.1
    aug_drop: float = 0.05
    meas_aug_noise: float = 0.1
    label_gate: float = 2.0
    val_fraction: float = 0.2
    min_track_len: int = 3

    def __post_init__(self):
        for name in ("w_fpr", "w_meas", "lr_joint", "lr_pre"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"training.{name} must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigInvalid("training.val_fraction must be in [0, 1)")


# ---------------------------------------------------------------------------
# losses (scalar spot-check surface)


def motion_loss(estimates, gt_states, matches) -> float:
    """Mean L1 distance between matched estimates and ground-truth states."""
    if not matches:
        log.warning("motion loss over empty match set; returning 0")
        return 0.0
    total = 0.0
    for est_idx, gt_idx in matches:
        total += float(np.abs(np.asarray(estimates[est_idx])
                              - np.asarray(gt_states[gt_idx])).sum())
    return total / len(matches)


def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def affinity_loss(f_af: np.ndarray, af_gt: np.ndarray) -> float:
    """Class-balanced binary cross-entropy on sigma(ln f) = f/(1+f)."""
    f_af = np.asarray(f_af, dtype=float)
    af_gt = np.asarray(af_gt, dtype=float)
    prob = _clamp(f_af / (1.0 + f_af))
    n_pos = af_gt.sum()
    n_neg = (1.0 - af_gt).sum()
    loss = 0.0
    if n_pos > 0:
        loss += -float((af_gt * np.log(prob)).sum()) / n_pos
    if n_neg > 0:
        loss += -float(((1.0 - af_gt) * np.log(1.0 - prob)).sum()) / n_neg
    return loss


def fpr_loss(f_fpr: np.ndarray, fpr_gt: np.ndarray, w_fpr: float) -> float:
    """Class-balanced cross-entropy on the rejection factors, negatives
    down-weighted by w_fpr."""
    f_fpr = _clamp(np.asarray(f_fpr, dtype=float))
    fpr_gt = np.asarray(fpr_gt, dtype=float)
    n_pos = fpr_gt.sum()
    n_neg = (1.0 - fpr_gt).sum()
    loss = 0.0
    if n_pos > 0:
        loss += -float((fpr_gt * np.log(f_fpr)).sum()) / n_pos
    if n_neg > 0:
        loss += -w_fpr * float(((1.0 - fpr_gt) * np.log(1.0 - f_fpr)).sum()) / n_neg
    return loss


def joint_loss(l_motion: float, l_meas: float, w_meas: float) -> float:
    return l_motion + w_meas * l_meas


# ---------------------------------------------------------------------------
# labeling and augmentation


def label_frame(gt_objects, measurements, legacy_means, gate: float) -> MatchLabels:
    """Hungarian labels: measurement/object truth via a shared gt anchor.

    Measurements and legacy objects are independently matched to ground truth
    on position distance within the gate; unmatched measurements are false
    positives.
    """
    n_legacy = len(legacy_means)
    n_meas = len(measurements)
    af_gt = np.zeros((n_legacy, n_meas))
    fpr_gt = np.zeros(n_meas)
    motion_pairs = []
    if gt_objects:
        gt_pos = np.stack([o.state[:2] for o in gt_objects])
        meas_to_gt = {}
        if n_meas:
            meas_pos = np.stack([m.z[:2] for m in measurements])
            for gi, mj in gated_match(gt_pos, meas_pos, gate).items():
                meas_to_gt[gi] = mj
                fpr_gt[mj] = 1.0
        if n_legacy:
            legacy_pos = np.stack([np.asarray(m)[:2] for m in legacy_means])
            for gi, li in gated_match(gt_pos, legacy_pos, gate).items():
                motion_pairs.append((li, gi))
                if gi in meas_to_gt:
                    af_gt[li, meas_to_gt[gi]] = 1.0
    return MatchLabels(af_gt, fpr_gt, motion_pairs)


def augment_states(states: np.ndarray, cfg: TrainConfig, rng: Rng):
    """Noisy/biased/decimated copy of a state sequence.

    Returns (augmented states, keep mask); a constant per-track bias is drawn
    once, noise per state, and each state is dropped independently.
    """
    states = np.asarray(states, dtype=float)
    n = len(states)
    out = states.copy()
    if n == 0:
        return out, np.zeros(0, dtype=bool)
    bias = cfg.aug_bias * rng.standard_normal(2)
    out[:, :2] += bias
    out[:, :2] += cfg.aug_pos_noise * rng.standard_normal((n, 2))
    out[:, 2:] += cfg.aug_vel_noise * rng.standard_normal((n, 2))
    keep = rng.random(n) >= cfg.aug_drop
    return out, keep


# ---------------------------------------------------------------------------
# pretraining on ground-truth tracks


def _split_scenes(scenes, val_fraction: float, rng: Rng):
    order = list(range(len(scenes)))
    rng.shuffle(order)
    n_val = int(round(val_fraction * len(scenes)))
    n_val = min(n_val, len(scenes) - 1) if len(scenes) > 1 else 0
    val_idx = set(order[:n_val])
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val or train[:1]


def _nearest(state, candidates, limit):
    if not candidates:
        return []
    ref = np.asarray(state)[:2]
    ordered = sorted(candidates, key=lambda s: float(np.linalg.norm(s[:2] - ref)))
    return ordered[:limit]


@dataclass
class _AugScene:
    """Augmented per-track state views of one scene."""

    tracks: dict  # tid -> dict k -> aug state
    clean: dict  # tid -> dict k -> clean state
    frames: dict  # k -> list of (tid, aug state)


def _augment_scene_tracks(scene: Scene, cfg: TrainConfig, rng: Rng,
                          min_len: int) -> _AugScene:
    tracks = {}
    clean = {}
    frames: dict = {}
    for tid, entries in scene.gt_tracks().items():
        if len(entries) < min_len:
            continue
        ks = [e[0] for e in entries]
        states = np.stack([e[1] for e in entries])
        aug, keep = augment_states(states, cfg, rng.substream(f"track.{tid}"))
        clean[tid] = {k: s for k, s in zip(ks, states)}
        tracks[tid] = {k: aug[i] for i, k in enumerate(ks) if keep[i]}
        for k, s in tracks[tid].items():
            frames.setdefault(k, []).append((tid, s))
    return _AugScene(tracks, clean, frames)


def _track_step_losses(aug: _AugScene, tid: int, params: MotionParams,
                       traced: bool):
    """One-step-ahead L1 loss nodes (or floats) along one augmented track."""
    seq = aug.tracks.get(tid, {})
    clean = aug.clean[tid]
    hidden = np.zeros(params.hidden_dim)
    nodes = []
    for k in sorted(seq):
        target = clean.get(k + 1)
        neighbors = _nearest(seq[k], [s for other, s in aug.frames.get(k, [])
                                      if other != tid], params.max_neighbors)
        pred, hidden = motion_forward(seq[k], neighbors, hidden, params)
        if target is not None:
            if traced:
                nodes.append(vsum(vabs(vsub(pred, target))))
            else:
                nodes.append(float(np.abs(np.asarray(pred) - target).sum()))
    return nodes


def pretrain_motion(scenes, meta: NetMeta, cfg: TrainConfig, seed: int):
    """Pretrain the motion model on augmented ground-truth tracks.

    Adam on one-step-ahead L1 loss; returns (best-validation MotionParams,
    per-epoch log rows).
    """
    rng = Rng(seed).substream("pretrain")
    params = build_motion_params(meta, rng.substream("init"))
    named = list(params.named_parameters("motion"))
    adam = AdamState(lr=cfg.lr_pre)
    train_scenes, val_scenes = _split_scenes(scenes, cfg.val_fraction,
                                             rng.substream("split"))
    val_aug = [
        _augment_scene_tracks(s, cfg, rng.substream(f"valaug.{i}"), cfg.min_track_len)
        for i, s in enumerate(val_scenes)
    ]

    def validation_loss():
        losses = []
        for aug in val_aug:
            for tid in aug.tracks:
                losses.extend(_track_step_losses(aug, tid, params, traced=False))
        return float(np.mean(losses)) if losses else math.nan

    best = {name: p.value.copy() for name, p in named}
    best_val = validation_loss()
    history = [{"epoch": 0, "train_loss": math.nan, "val_loss": best_val}]
    for epoch in range(1, cfg.epochs_pre + 1):
        epoch_rng = rng.substream(f"epoch.{epoch}")
        segments = []
        for i, scene in enumerate(train_scenes):
            aug = _augment_scene_tracks(scene, cfg, epoch_rng.substream(f"aug.{i}"),
                                        cfg.min_track_len)
            segments.extend((aug, tid) for tid in aug.tracks)
        order = list(range(len(segments)))
        epoch_rng.substream("order").shuffle(order)
        train_losses = []
        for start in range(0, len(order), cfg.batch_pre):
            batch = [segments[i] for i in order[start : start + cfg.batch_pre]]
            with Tape() as tape:
                nodes = []
                for aug, tid in batch:
                    nodes.extend(_track_step_losses(aug, tid, params, traced=True))
                if not nodes:
                    continue
                total = nodes[0]
                for node in nodes[1:]:
                    total = vadd(total, node)
                total = vscale(total, 1.0 / len(nodes))
                value = float(_val(total))
                if not math.isfinite(value):
                    raise NonFiniteLoss(f"pretraining loss became {value}")
                tape.backward(total)
            apply_adam(named, adam)
            zero_grads(named)
            train_losses.append(value)
        val = validation_loss()
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)) if train_losses else math.nan,
            "val_loss": val,
        })
        if math.isnan(best_val) or (not math.isnan(val) and val < best_val):
            best_val = val
            best = {name: p.value.copy() for name, p in named}
    for name, p in named:
        p.value = best[name].copy()
    return params, history


# ---------------------------------------------------------------------------
# joint training through the tracker


def _augment_scene_measurements(scene: Scene, sigma: float, rng: Rng) -> Scene:
    if sigma <= 0.0:
        return scene
    frames = []
    for frame in scene.frames:
        meas = []
        for m in frame.measurements:
            noisy = m.z + sigma * rng.standard_normal(4)
            meas.append(type(m)(noisy, m.score, m.box.copy(), m.class_id))
        frames.append(Frame(frame.k, frame.gt, meas, frame.feature_map))
    return Scene(scene.config, scene.seed, frames)


def _bce_nodes(logits, positive_mask, negative_weight: float):
    """Balanced BCE loss nodes on raw logits; returns list of scalar nodes."""
    mask = positive_mask.reshape(np.asarray(_val(logits)).shape)
    nodes = []
    n_pos = float(mask.sum())
    n_neg = float((1.0 - mask).sum())
    if n_pos > 0:
        nodes.append(vscale(vmasked_sum(vsoftplus(vscale(logits, -1.0)), mask),
                            1.0 / n_pos))
    if n_neg > 0 and negative_weight > 0:
        nodes.append(vscale(vmasked_sum(vsoftplus(logits), 1.0 - mask),
                            negative_weight / n_neg))
    return nodes


def _scene_loss(scene: Scene, net: NetworkParams, tracker_cfg: TrackerConfig,
                cfg: TrainConfig, rng: Rng, traced: bool):
    """Joint loss over one scene via the tracker's training hooks.

    Returns (loss node or float, metrics dict)."""
    run = TrackerRun(tracker_cfg, net, rng)
    state: list = []
    frame_nodes = []
    metrics = {"motion": [], "affinity": [], "fpr": []}
    for frame in scene.frames:
        state, _est, _diag, hooks = run.step(state, frame, collect_hooks=True)
        handles = [hooks.mean_handles[pid] for pid in hooks.legacy_ids]
        mean_values = [np.asarray(_val(h)) for h in handles]
        labels = label_frame(frame.gt, frame.measurements, mean_values,
                             cfg.label_gate)
        nodes = []
        if labels.motion_pairs:
            gt_states = [o.state for o in frame.gt]
            if traced:
                terms = [vsum(vabs(vsub(handles[li], gt_states[gi])))
                         for li, gi in labels.motion_pairs]
                total = terms[0]
                for t in terms[1:]:
                    total = vadd(total, t)
                nodes.append(vscale(total, 1.0 / len(terms)))
            metrics["motion"].append(
                motion_loss(mean_values, gt_states, labels.motion_pairs)
            )
        if cfg.w_meas > 0 and hooks.affinity_logits is not None and labels.af_gt.size:
            aff_nodes = []
            n_pos = float(labels.af_gt.sum())
            n_neg = float((1.0 - labels.af_gt).sum())
            values = np.concatenate(
                [np.asarray(_val(row)).reshape(-1) for row in hooks.affinity_logits]
            )
            metrics["affinity"].append(
                affinity_loss(np.exp(values).reshape(labels.af_gt.shape), labels.af_gt)
            )
            if traced:
                for i, row in enumerate(hooks.affinity_logits):
                    mask = labels.af_gt[i].reshape(-1, 1)
                    if mask.sum() > 0:
                        aff_nodes.append(
                            vscale(vmasked_sum(vsoftplus(vscale(row, -1.0)), mask),
                                   cfg.w_meas / n_pos))
                    if (1.0 - mask).sum() > 0 and n_neg > 0:
                        aff_nodes.append(
                            vscale(vmasked_sum(vsoftplus(row), 1.0 - mask),
                                   cfg.w_meas / n_neg))
                nodes.extend(aff_nodes)
        if cfg.w_meas > 0 and hooks.fpr_logits is not None and len(labels.fpr_gt):
            values = np.asarray(_val(hooks.fpr_logits)).reshape(-1)
            metrics["fpr"].append(
                fpr_loss(1.0 / (1.0 + np.exp(-values)), labels.fpr_gt, cfg.w_fpr)
            )
            if traced:
                for node in _bce_nodes(hooks.fpr_logits, labels.fpr_gt, cfg.w_fpr):
                    nodes.append(vscale(node, cfg.w_meas))
        if traced and nodes:
            total = nodes[0]
            for node in nodes[1:]:
                total = vadd(total, node)
            frame_nodes.append(total)
    summary = {
        "motion": float(np.mean(metrics["motion"])) if metrics["motion"] else 0.0,
        "affinity": float(np.mean(metrics["affinity"])) if metrics["affinity"] else 0.0,
        "fpr": float(np.mean(metrics["fpr"])) if metrics["fpr"] else 0.0,
    }
    summary["joint"] = joint_loss(summary["motion"],
                                  summary["affinity"] + summary["fpr"], cfg.w_meas)
    if not traced or not frame_nodes:
        return None, summary
    total = frame_nodes[0]
    for node in frame_nodes[1:]:
        total = vadd(total, node)
    return vscale(total, 1.0 / len(frame_nodes)), summary


def joint_train(scenes, net: NetworkParams, cfg: TrainConfig,
                tracker_cfg: TrackerConfig, seed: int):
    """Refine all networks by running the tracker and backpropagating the
    joint loss; one Adam step per scene (batch size 1).

    Returns (net with best-validation weights restored, per-epoch log rows).
    """
    rng = Rng(seed).substream("joint")
    named = net.trainable_parameters()
    adam = AdamState(lr=cfg.lr_joint)
    train_scenes, val_scenes = _split_scenes(scenes, cfg.val_fraction,
                                             rng.substream("split"))

    def validation():
        rows = []
        for i, scene in enumerate(val_scenes):
            _, summary = _scene_loss(scene, net, tracker_cfg, cfg,
                                     rng.substream(f"val.{i}"), traced=False)
            rows.append(summary)
        return {
            key: float(np.mean([r[key] for r in rows]))
            for key in ("motion", "affinity", "fpr", "joint")
        }

    best_summary = validation()
    best_val = best_summary["joint"]
    best = {name: p.value.copy() for name, p in named}
    history = [{"epoch": 0, "train_loss": math.nan, **{f"val_{k}": v for k, v in best_summary.items()}}]
    for epoch in range(1, cfg.epochs_joint + 1):
        epoch_rng = rng.substream(f"epoch.{epoch}")
        train_losses = []
        for i, scene in enumerate(train_scenes):
            scene_rng = epoch_rng.substream(f"scene.{i}")
            aug_scene = _augment_scene_measurements(scene, cfg.meas_aug_noise,
                                                    scene_rng.substream("meas"))
            with Tape() as tape:
                node, summary = _scene_loss(aug_scene, net, tracker_cfg, cfg,
                                            scene_rng.substream("run"), traced=True)
                if node is None:
                    continue
                value = float(_val(node))
                if not math.isfinite(value):
                    raise NonFiniteLoss(
                        f"joint loss became {value} (epoch {epoch}, scene {i})"
                    )
                tape.backward(node)
            apply_adam(named, adam)
            zero_grads(named)
            train_losses.append(value)
        val_summary = validation()
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)) if train_losses else math.nan,
            **{f"val_{k}": v for k, v in val_summary.items()},
        })
        if val_summary["joint"] < best_val:
            best_val = val_summary["joint"]
            best = {name: p.value.copy() for name, p in named}
    for name, p in named:
        p.value = best[name].copy()
    return net, history
