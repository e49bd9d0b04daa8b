"""Epistemic uncertainty from repeated reverse-process sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, _sample_ddim_batch, _sample_ddpm_batch
from .numerics import RngStream
from .objective import endpoint_errors
from .pointcloud import FlowField, ScenePair


@dataclass
class HypothesisSet:
    """K independently sampled flow fields plus their mean and per-point
    uncertainty (sample std pooled over the 3 components)."""

    flows: np.ndarray  # [K, N, 3] float32
    mean: np.ndarray   # [N, 3]
    std: np.ndarray    # [N]

    @property
    def k(self) -> int:
        return self.flows.shape[0]


@dataclass
class BinStat:
    epe_lo: float
    epe_hi: float
    mean_unc: float | None
    std_unc: float | None
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass
class PRPoint:
    threshold: float
    recall: float | None
    precision: float | None


def pooled_std(flows: np.ndarray) -> np.ndarray:
    """Per-point scalar spread: sqrt of the mean over components of the
    per-component sample variance (K-1 denominator)."""
    var = np.var(flows.astype(np.float64), axis=0, ddof=1)  # [N, 3]
    return np.sqrt(var.mean(axis=-1))


def hypothesis_set_from_flows(flows: np.ndarray) -> HypothesisSet:
    flows = np.asarray(flows, dtype=np.float32)
    if flows.ndim != 3 or flows.shape[0] < 2:
        raise ValueError("need a [K>=2, N, 3] stack of flows")
    mean = flows.astype(np.float64).mean(axis=0)
    return HypothesisSet(flows=flows, mean=mean.astype(np.float32),
                         std=pooled_std(flows).astype(np.float32))


def sample_hypotheses(pair: ScenePair, model, sched: NoiseSchedule, k: int, root_seed: int,
                      flow_scale: float = 1.0, sampler: str = "ddpm",
                      n_steps: int | None = None, ddpm_noise: str = "unit") -> HypothesisSet:
    """Run K reverse processes that differ only in their random stream
    (seed = root_seed XOR hypothesis index) and pool them.

    The default follows the stochastic (ddpm) sampler; `sampler="ddim"` with
    `n_steps` varies only the initial noise draw between hypotheses.
    """
    if k < 2:
        raise ValueError("need at least 2 hypotheses for a standard deviation")
    rngs = [RngStream(root_seed ^ i) for i in range(k)]
    if sampler == "ddpm":
        flows = _sample_ddpm_batch(pair, model, sched, rngs, flow_scale, ddpm_noise)
    elif sampler == "ddim":
        flows = _sample_ddim_batch(pair, model, sched, rngs, n_steps or sched.t_steps, flow_scale)
    else:
        raise ValueError(f"unknown sampler kind: {sampler!r}")
    return hypothesis_set_from_flows(flows)


def uncertainty_error_bins(hyp: HypothesisSet, gt: FlowField | np.ndarray,
                           bin_edges) -> list[BinStat]:
    """Mean/std of per-point uncertainty over points grouped by the endpoint
    error of the mean prediction. Empty bins are flagged, not dropped."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise ValueError("need at least two ascending bin edges")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly ascending")
    err = endpoint_errors(hyp.mean, gt)
    if err.size == 0:
        raise ValueError("no points to bin")
    stats: list[BinStat] = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (err >= lo) & (err < hi)
        cnt = int(sel.sum())
        if cnt == 0:
            stats.append(BinStat(float(lo), float(hi), None, None, 0))
        else:
            u = hyp.std[sel].astype(np.float64)
            stats.append(BinStat(float(lo), float(hi), float(u.mean()), float(u.std()), cnt))
    return stats


def outlier_pr_curve(hyp: HypothesisSet, pair: ScenePair,
                     epe_outlier_threshold: float = 0.30,
                     thresholds=None) -> list[PRPoint]:
    """Precision/recall of retrieving outliers (EPE of the mean prediction
    above `epe_outlier_threshold`) by thresholding the per-point uncertainty:
    a point is retrieved when std > threshold."""
    if thresholds is None:
        thresholds = default_pr_thresholds()
    thresholds = list(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    err = endpoint_errors(hyp.mean, pair.gt_flow)
    outlier = err > epe_outlier_threshold
    n_out = int(outlier.sum())
    points: list[PRPoint] = []
    for u in thresholds:
        retrieved = hyp.std > u
        n_ret = int(retrieved.sum())
        hits = int((retrieved & outlier).sum())
        recall = (hits / n_out) if n_out > 0 else None
        precision = (hits / n_ret) if n_ret > 0 else None
        points.append(PRPoint(float(u), recall, precision))
    return points


def default_pr_thresholds(flow_scale: float = 1.0) -> list[float]:
    """Uncertainty grid 1e-4 .. 2e-3, scaled to the flow units."""
    return [round(i * 1e-4, 10) * flow_scale for i in range(1, 21)]


def default_epe_bin_edges() -> list[float]:
    """EPE intervals of width 0.05 m up to 0.8 m, then open-ended."""
    return [round(0.05 * i, 10) for i in range(17)] + [float("inf")]
