"""Scoring: assignment, CLEAR-MOT style accuracy, a recall-sweep accuracy
variant, and the one-step prediction-MSE protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .motion import MotionParams, motion_forward
from .numerics import cv_transition

DEFAULT_GATE = 2.0
RECALL_TARGETS = tuple(round(0.1 * i, 1) for i in range(1, 11))
MAX_SWEEP_THRESHOLDS = 128


def hungarian(cost: np.ndarray):
    """Minimum-cost assignment on a rectangular matrix, as sorted (row, col) pairs."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def gated_match(gt_pos: np.ndarray, est_pos: np.ndarray, gate: float,
                forced: dict | None = None):
    """Gated assignment between ground truth and estimates.

    forced maps gt index -> est index for carry-over matches that are kept
    as long as they remain within the gate. Returns dict gt index -> est index.
    """
    n_gt, n_est = len(gt_pos), len(est_pos)
    matches = {}
    used_est = set()
    if n_gt and n_est:
        dist = np.linalg.norm(gt_pos[:, None, :] - est_pos[None, :, :], axis=2)
        if forced:
            for gi, ei in forced.items():
                if gi < n_gt and ei < n_est and ei not in used_est and dist[gi, ei] <= gate:
                    matches[gi] = ei
                    used_est.add(ei)
        free_gt = [i for i in range(n_gt) if i not in matches]
        free_est = [j for j in range(n_est) if j not in used_est]
        if free_gt and free_est:
            sub = dist[np.ix_(free_gt, free_est)]
            big = gate * 1e6 + 1.0
            capped = np.where(sub <= gate, sub, big)
            for r, c in hungarian(capped):
                if sub[r, c] <= gate:
                    matches[free_gt[r]] = free_est[c]
    return matches


@dataclass
class MotScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    id_switches: int = 0
    fragmentations: int = 0
    gt_count: int = 0
    position_errors: list = field(default_factory=list)
    frame_matches: list = field(default_factory=list)  # per frame: est_id -> gt_id

    @property
    def mota(self) -> float:
        if self.gt_count == 0:
            return math.nan
        return 1.0 - (self.fp + self.fn + self.id_switches) / self.gt_count

    @property
    def mean_position_error(self) -> float:
        return float(np.mean(self.position_errors)) if self.position_errors else math.nan


def clear_mot(est_frames, gt_frames, gate: float = DEFAULT_GATE) -> MotScore:
    """CLEAR-MOT accounting with match carry-over.

    est_frames and gt_frames are per-frame lists of (id, position) pairs.
    An identity switch is counted whenever a ground-truth track changes its
    matched estimate id; a fragmentation whenever it resumes being matched
    after a gap.
    """
    if len(est_frames) != len(gt_frames):
        raise ValueError("estimate and ground-truth frame counts differ")
    score = MotScore()
    last_est_of_gt: dict = {}  # gt id -> last matched est id
    matched_prev: set = set()  # gt ids matched in the previous frame
    ever_matched: set = set()
    for est, gt in zip(est_frames, gt_frames):
        gt_ids = [g[0] for g in gt]
        est_ids = [e[0] for e in est]
        gt_pos = np.array([g[1][:2] for g in gt]).reshape(len(gt), -1)
        est_pos = np.array([e[1][:2] for e in est]).reshape(len(est), -1)
        forced = {}
        for gi, gid in enumerate(gt_ids):
            prev = last_est_of_gt.get(gid)
            if prev is not None and prev in est_ids:
                forced[gi] = est_ids.index(prev)
        matches = gated_match(gt_pos, est_pos, gate, forced)
        score.gt_count += len(gt)
        score.tp += len(matches)
        score.fn += len(gt) - len(matches)
        score.fp += len(est) - len(matches)
        frame_map = {}
        matched_now = set()
        for gi, ei in matches.items():
            gid, eid = gt_ids[gi], est_ids[ei]
            frame_map[eid] = gid
            matched_now.add(gid)
            score.position_errors.append(
                float(np.linalg.norm(gt_pos[gi] - est_pos[ei]))
            )
            prev = last_est_of_gt.get(gid)
            if prev is not None and prev != eid:
                score.id_switches += 1
            if gid in ever_matched and gid not in matched_prev:
                score.fragmentations += 1
            last_est_of_gt[gid] = eid
            ever_matched.add(gid)
        score.frame_matches.append(frame_map)
        matched_prev = matched_now
    return score


def false_track_count(est_frames, score: MotScore) -> int:
    """Estimated track ids that are unmatched in the majority of their frames."""
    present: dict = {}
    matched: dict = {}
    for frame, frame_map in zip(est_frames, score.frame_matches):
        for eid, _pos in frame:
            present[eid] = present.get(eid, 0) + 1
            if eid in frame_map:
                matched[eid] = matched.get(eid, 0) + 1
    return sum(
        1 for eid, n in present.items() if matched.get(eid, 0) < 0.5 * n
    )


def amota_variant(est_frames, gt_frames, gate: float = DEFAULT_GATE,
                  targets=RECALL_TARGETS):
    """Recall-sweep tracking accuracy (documented variant).

    est_frames entries are (id, position, confidence). For each target recall
    the highest confidence threshold achieving it is selected and a
    recall-normalized accuracy max(0, 1 - (fp + ids + fn - (1-r) P) / (r P))
    is computed there; the variant score is the mean over targets (0 when a
    target recall is unreachable). Invariant under strictly monotone rescaling
    of the confidences.
    """
    gt_total = sum(len(g) for g in gt_frames)
    if gt_total == 0:
        return math.nan, []
    scores = sorted({float(e[2]) for frame in est_frames for e in frame}, reverse=True)
    if len(scores) > MAX_SWEEP_THRESHOLDS:
        idx = np.linspace(0, len(scores) - 1, MAX_SWEEP_THRESHOLDS).astype(int)
        scores = [scores[i] for i in idx]
    if not scores:
        return 0.0, [(t, 0.0, math.nan, 0.0) for t in targets]

    sweeps = []
    for threshold in scores:
        kept = [[(e[0], e[1]) for e in frame if float(e[2]) >= threshold]
                for frame in est_frames]
        s = clear_mot(kept, gt_frames, gate)
        sweeps.append((threshold, s.tp / gt_total, s))

    table = []
    total = 0.0
    for target in targets:
        hit = next((sw for sw in sweeps if sw[1] >= target), None)
        if hit is None:
            table.append((target, 0.0, math.nan, 0.0))
            continue
        threshold, recall, s = hit
        denom = target * gt_total
        acc = 1.0 - (s.fp + s.id_switches + s.fn - (1.0 - target) * gt_total) / denom
        acc = max(0.0, min(1.0, acc))
        table.append((target, recall, threshold, acc))
        total += acc
    return total / len(targets), table


class CvPredictor:
    """One-step constant-velocity baseline."""

    def __init__(self, dt: float):
        self.transition = cv_transition(dt)

    def start(self):
        return None

    def step(self, state, neighbors, ctx):
        return self.transition @ state, ctx


class NeuralPredictor:
    """One-step prediction through the learned transition, rolling the hidden state."""

    def __init__(self, params: MotionParams):
        self.params = params

    def start(self):
        return np.zeros(self.params.hidden_dim)

    def step(self, state, neighbors, ctx):
        chosen = _nearest_neighbors(state, neighbors, self.params.max_neighbors)
        next_state, hidden = motion_forward(state, chosen, ctx, self.params)
        return np.asarray(next_state), np.asarray(hidden)


def _nearest_neighbors(state, neighbors, limit):
    if not len(neighbors):
        return []
    ref = np.asarray(state)[:2]
    ordered = sorted(neighbors, key=lambda s: float(np.linalg.norm(np.asarray(s)[:2] - ref)))
    return [np.asarray(s) for s in ordered[:limit]]


def noisy_tracks_from_measurements(scene, match_gate: float = 3.0) -> dict:
    """Per-track measurement sequences, Hungarian-matched frame by frame.

    Returns track_id -> dict frame index -> matched 4-D measurement.
    """
    out: dict = {}
    for frame in scene.frames:
        if not frame.gt or not frame.measurements:
            continue
        gt_pos = np.stack([o.state[:2] for o in frame.gt])
        meas_pos = np.stack([m.z[:2] for m in frame.measurements])
        matches = gated_match(gt_pos, meas_pos, match_gate)
        for gi, mj in matches.items():
            tid = frame.gt[gi].track_id
            out.setdefault(tid, {})[frame.k] = frame.measurements[mj].z.copy()
    return out


def prediction_mse(predictor, scenes, match_gate: float = 3.0) -> dict:
    """One-step 2-D position MSE of a predictor fed noisy track sequences.

    Predictions are made from each measurement-matched state to the next
    frame's ground truth; tracks roll the predictor context in frame order.
    Returns per-class MSE plus an "overall" entry.
    """
    sq_errors: dict = {}
    for scene in scenes:
        noisy = noisy_tracks_from_measurements(scene, match_gate)
        gt_by_track: dict = {}
        class_of: dict = {}
        for frame in scene.frames:
            for obj in frame.gt:
                gt_by_track.setdefault(obj.track_id, {})[frame.k] = obj.state
                class_of[obj.track_id] = obj.class_id
        for tid, seq in noisy.items():
            ctx = predictor.start()
            for k in sorted(seq):
                neighbors = [
                    other_seq[k]
                    for other_tid, other_seq in noisy.items()
                    if other_tid != tid and k in other_seq
                ]
                pred, ctx = predictor.step(seq[k], neighbors, ctx)
                target = gt_by_track[tid].get(k + 1)
                if target is not None:
                    err = float(np.sum((np.asarray(pred)[:2] - target[:2]) ** 2))
                    sq_errors.setdefault(class_of[tid], []).append(err)
    result = {cls: float(np.mean(v)) for cls, v in sq_errors.items()}
    all_errors = [e for v in sq_errors.values() for e in v]
    result["overall"] = float(np.mean(all_errors)) if all_errors else math.nan
    return result
