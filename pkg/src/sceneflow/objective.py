"""Training loss and the standard flow evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, absolute, pow_const, tsum
from .pointcloud import FlowField, ScenePair


@dataclass
class LossConfig:
    epsilon: float = 0.01
    q_exponent: float = 0.4
    supervise_init: bool = True
    init_weight: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.q_exponent <= 1.0):
            raise ValueError("q_exponent must be in (0, 1]")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, FlowField):
        return Tensor.const(x.vectors)
    return Tensor.const(np.asarray(x, dtype=np.float32))


def robust_loss(pred, gt, cfg: LossConfig) -> Tensor:
    """Sum over points of (||pred_i - gt_i||_1 + epsilon)^q.

    The epsilon offset keeps the outer power differentiable at zero residual;
    the L1 subgradient at exactly zero is taken as zero. Accepts per-scene
    [N, 3] or batched [B, N, 3] inputs (summed over everything).
    """
    pred = _as_tensor(pred)
    gt = _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    l1 = tsum(absolute(pred - gt), axis=-1)
    return tsum(pow_const(l1 + cfg.epsilon, cfg.q_exponent))


def total_loss(v_init, v_pred, gt, cfg: LossConfig) -> Tensor:
    """Refined-prediction loss, plus the initial-estimate term when enabled."""
    loss = robust_loss(v_pred, gt, cfg)
    if cfg.supervise_init:
        loss = loss + cfg.init_weight * robust_loss(v_init, gt, cfg)
    return loss


# -- evaluation metrics ---------------------------------------------------------


@dataclass
class MetricReport:
    """EPE plus threshold metrics, over all points and over non-occluded ones.

    The *_noc fields are None when the scene has no valid (non-occluded)
    points at all.
    """

    epe_all: float
    accs_all: float
    accr_all: float
    out_all: float
    epe_noc: float | None
    accs_noc: float | None
    accr_noc: float | None
    out_noc: float | None

    CSV_HEADER = "epe_all,accs_all,accr_all,out_all,epe_noc,accs_noc,accr_noc,out_noc"

    def csv_row(self) -> str:
        vals = [self.epe_all, self.accs_all, self.accr_all, self.out_all,
                self.epe_noc, self.accs_noc, self.accr_noc, self.out_noc]
        return ",".join("" if v is None else f"{v:.6f}" for v in vals)


def _metric_block(err: np.ndarray, rel: np.ndarray) -> tuple[float, float, float, float]:
    epe = float(np.mean(err))
    accs = float(np.mean((err < 0.05) | (rel < 0.05)))
    accr = float(np.mean((err < 0.10) | (rel < 0.10)))
    out = float(np.mean((err > 0.30) | (rel > 0.10)))
    return epe, accs, accr, out


def endpoint_errors(pred, gt) -> np.ndarray:
    """Per-point Euclidean endpoint error."""
    p = pred.vectors if isinstance(pred, FlowField) else np.asarray(pred)
    g = gt.vectors if isinstance(gt, FlowField) else np.asarray(gt)
    return np.linalg.norm(p.astype(np.float64) - g.astype(np.float64), axis=-1)


def metrics(pred, pair: ScenePair) -> MetricReport:
    """EPE3D / ACC_S / ACC_R / Outliers with accuracy thresholds 5 cm / 5%
    and 10 cm / 10% (strict <) and outliers above 30 cm / 10% (strict >)."""
    p = pred.vectors if isinstance(pred, FlowField) else np.asarray(pred)
    g = pair.gt_flow.vectors
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    err = endpoint_errors(p, g)
    gt_norm = np.linalg.norm(g.astype(np.float64), axis=-1)
    rel = err / np.maximum(gt_norm, 1e-8)
    epe_all, accs_all, accr_all, out_all = _metric_block(err, rel)
    mask = pair.valid_mask
    if mask.any():
        epe_noc, accs_noc, accr_noc, out_noc = _metric_block(err[mask], rel[mask])
    else:
        epe_noc = accs_noc = accr_noc = out_noc = None
    return MetricReport(epe_all, accs_all, accr_all, out_all,
                        epe_noc, accs_noc, accr_noc, out_noc)


def macro_average(reports: list[MetricReport]) -> MetricReport:
    """Unweighted per-scene average; *_noc averages only scenes that have it."""
    if not reports:
        raise ValueError("no reports to average")

    def avg(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    return MetricReport(
        epe_all=avg([r.epe_all for r in reports]),
        accs_all=avg([r.accs_all for r in reports]),
        accr_all=avg([r.accr_all for r in reports]),
        out_all=avg([r.out_all for r in reports]),
        epe_noc=avg([r.epe_noc for r in reports]),
        accs_noc=avg([r.accs_noc for r in reports]),
        accr_noc=avg([r.accr_noc for r in reports]),
        out_noc=avg([r.out_noc for r in reports]),
    )
