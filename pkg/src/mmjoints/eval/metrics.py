"""Pose and descriptor error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def joint_errors(pred, gt):
    """Euclidean error per joint, shape ``pred.shape[:-1]``."""
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error (same units as the inputs)."""
    return float(joint_errors(pred, gt).mean())


def mae(pred, gt) -> float:
    """Mean absolute per-axis error."""
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def pck05(pred, gt, torso_diameter) -> float:
    """Percentage of joints within half the torso diameter (boundary inclusive)."""
    if torso_diameter <= 0:
        raise ValueError("torso diameter must be positive")
    err = joint_errors(pred, gt)
    return float(100.0 * np.mean(err <= 0.5 * torso_diameter))


def wmape(pred, gt) -> float:
    """Weighted MAPE: ``100 * sum|gt - pred| / sum|gt|``."""
    pred, gt = _pair(pred, gt)
    denom = np.abs(gt).sum()
    if denom <= 0:
        raise ValueError("wMAPE is undefined when every ground-truth value is zero")
    return float(100.0 * np.abs(gt - pred).sum() / denom)


def smape(pred, gt) -> float:
    """Symmetric MAPE in ``[0, 200]``; ``0/0`` terms count as zero error."""
    pred, gt = _pair(pred, gt)
    num = 2.0 * np.abs(gt - pred)
    den = np.abs(gt) + np.abs(pred)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * ratio.mean()) if ratio.size else 0.0


@dataclass
class MetricReport:
    """Pose errors (cm, %) and descriptor errors (%), with per-joint breakdowns."""

    mpjpe: float = 0.0
    mae: float = 0.0
    pck05: float = 100.0
    wmape_xi: float | None = None
    wmape_kappa: float | None = None
    smape_xi: float | None = None
    smape_kappa: float | None = None
    per_joint: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.pck05 <= 100.0:
            raise ValueError("PCK must lie in [0, 100]")
        for name in ("smape_xi", "smape_kappa"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 200.0:
                raise ValueError(f"{name} must lie in [0, 200]")

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def pose_report(pred, gt, torso_diameter=20.0) -> MetricReport:
    pred, gt = _pair(pred, gt)
    return MetricReport(mpjpe(pred, gt), mae(pred, gt), pck05(pred, gt, torso_diameter),
                        per_joint={"mpjpe": joint_errors(pred, gt).reshape(-1, gt.shape[-2]).mean(axis=0).tolist()})


def descriptor_report(xi, kappa, xi_gt, kappa_gt) -> MetricReport:
    """Descriptor errors; wMAPE entries stay ``None`` when the ground truth is all zero."""

    def safe_wmape(p, g):
        try:
            return wmape(p, g)
        except ValueError:
            return None

    xi, xi_gt = _pair(xi, xi_gt)
    kappa, kappa_gt = _pair(kappa, kappa_gt)
    per_joint = {
        "wmape_xi": [safe_wmape(xi[:, j], xi_gt[:, j]) for j in range(xi.shape[1])],
        "wmape_kappa": [safe_wmape(kappa[:, j], kappa_gt[:, j]) for j in range(kappa.shape[1])],
    }
    return MetricReport(wmape_xi=safe_wmape(xi, xi_gt), wmape_kappa=safe_wmape(kappa, kappa_gt),
                        smape_xi=smape(xi, xi_gt), smape_kappa=smape(kappa, kappa_gt), per_joint=per_joint)
