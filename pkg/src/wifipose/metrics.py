"""Pose metrics: MPJPE, Procrustes-aligned MPJPE and PCK@alpha."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

DEFAULT_ALPHAS = (20, 30, 40, 50)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean Euclidean joint distance for a single (J, C) pose."""
    return float(joint_errors(pred, gt).mean())


def procrustes_transform(pred, gt):
    """Similarity (s, R, t) minimising ||s R pred_j + t - gt_j|| over joints.

    Closed-form solution from the SVD of the centred cross-covariance, with the
    sign of the last singular direction flipped when needed so that R is a
    proper rotation.
    """
    pred, gt = _check_pair(pred, gt)
    J, C = gt.shape
    if J < C:
        raise DataError(f"Procrustes alignment needs at least {C} joints for {C}-D poses, got {J}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p, g = pred - mu_p, gt - mu_g
    var_g = (g ** 2).sum()
    var_p = (p ** 2).sum()
    if var_g <= 1e-12 * max(1.0, np.abs(gt).max() ** 2):
        raise DataError("ground-truth pose is degenerate (all joints coincide)")
    if var_p == 0:
        return 0.0, np.eye(C), mu_g
    u, sig, vt = np.linalg.svd(g.T @ p)
    sign = np.ones(C)
    sign[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    R = (u * sign) @ vt
    s = float((sig * sign).sum() / var_p)
    t = mu_g - s * R @ mu_p
    return s, R, t


def procrustes_align(pred, gt) -> np.ndarray:
    s, R, t = procrustes_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ R.T + t


def pa_mpjpe(pred, gt) -> float:
    return mpjpe(procrustes_align(pred, gt), gt)


def pck(pred, gt, alpha: float, torso_length: float) -> float:
    """Percentage of joints within alpha% of the torso length (PCK@20 -> alpha=20)."""
    if alpha <= 0:
        raise DataError(f"PCK alpha must be positive, got {alpha}")
    if not torso_length > 0:
        raise DataError(f"torso length must be positive, got {torso_length}")
    d = joint_errors(pred, gt)
    return float(100.0 * np.mean(d <= alpha * torso_length / 100.0))


@dataclass
class MetricReport:
    mpjpe: float
    pa_mpjpe: float
    pck: dict[str, float]
    per_joint: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"mpjpe": self.mpjpe, "pa_mpjpe": self.pa_mpjpe, "pck": dict(self.pck),
                "per_joint": {k: dict(v) for k, v in self.per_joint.items()}}


def evaluate_dataset(pred, gt, skeleton, alphas=DEFAULT_ALPHAS) -> MetricReport:
    """Aggregate metrics over (N, J, C) or (N, 1, J, C) predictions.

    Every aggregate is the mean of the per-sample values; per-joint PA errors
    use each sample's own alignment.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 4:
        if pred.shape[1] != 1:
            raise DataError("only single-person poses (M=1) are supported")
        pred, gt = pred[:, 0], gt[:, 0]
    if pred.ndim != 3 or pred.shape[0] == 0:
        raise DataError("evaluation needs a non-empty (N, J, C) set")
    if pred.shape[1] != skeleton.J:
        raise DataError(f"poses have {pred.shape[1]} joints, skeleton {skeleton.skeleton_id!r} has {skeleton.J}")

    err = np.linalg.norm(pred - gt, axis=-1)  # (N, J)
    aligned = np.stack([procrustes_align(p, g) for p, g in zip(pred, gt)])
    pa_err = np.linalg.norm(aligned - gt, axis=-1)
    torso = skeleton.torso_length(gt)
    if np.any(torso <= 0):
        raise DataError("ground truth contains a frame with zero torso length")
    pck_vals = {
        str(a): float(np.mean(100.0 * np.mean(err <= a * torso[:, None] / 100.0, axis=1)))
        for a in alphas
    }
    per_joint = {
        name: {"mpjpe": float(err[:, j].mean()), "pa_mpjpe": float(pa_err[:, j].mean())}
        for j, name in enumerate(skeleton.joint_names)
    }
    return MetricReport(float(err.mean(axis=1).mean()), float(pa_err.mean(axis=1).mean()), pck_vals, per_joint)
