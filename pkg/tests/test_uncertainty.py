"""Hypothesis pooling, uncertainty-error bins and the outlier PR curve."""

import numpy as np
import pytest

from sceneflow.diffusion import make_schedule
from sceneflow.numerics import RngStream
from sceneflow.pointcloud import FlowField, PointCloud, SceneGenConfig, ScenePair, generate_scene
from sceneflow.uncertainty import (
    HypothesisSet,
    hypothesis_set_from_flows,
    outlier_pr_curve,
    pooled_std,
    sample_hypotheses,
    uncertainty_error_bins,
)


def _scene(seed=0, n=24):
    return generate_scene(SceneGenConfig(n1=n, n2=n, n_parts=1), RngStream(seed))


def _pair_with_gt(gt):
    n = gt.shape[0]
    return ScenePair(
        source=PointCloud(np.zeros((n, 3), np.float32) + np.arange(n, dtype=np.float32)[:, None]),
        target=PointCloud(np.zeros((n, 3), np.float32)),
        gt_flow=FlowField(gt.astype(np.float32)),
        valid_mask=np.ones(n, dtype=bool),
    )


def test_oracle_denoiser_collapses_hypotheses():
    pair = _scene(1)
    sched = make_schedule(5)
    model = lambda v, p: pair.gt_flow.vectors
    hyp = sample_hypotheses(pair, model, sched, k=4, root_seed=7)
    assert np.all(hyp.std == 0.0)
    np.testing.assert_allclose(hyp.mean, pair.gt_flow.vectors, atol=1e-6)
    for k in range(4):
        np.testing.assert_array_equal(hyp.flows[k], hyp.flows[0])


def test_same_root_seed_reproduces():
    pair = _scene(2)
    sched = make_schedule(4)
    model = lambda v, p: np.clip(v * 0.3, -1, 1)
    a = sample_hypotheses(pair, model, sched, k=3, root_seed=11)
    b = sample_hypotheses(pair, model, sched, k=3, root_seed=11)
    assert np.array_equal(a.flows, b.flows)
    assert np.array_equal(a.std, b.std)
    c = sample_hypotheses(pair, model, sched, k=3, root_seed=12)
    assert not np.array_equal(a.flows, c.flows)


def test_hypotheses_vary_for_stochastic_model():
    pair = _scene(3)
    sched = make_schedule(4)
    model = lambda v, p: np.clip(v * 0.3, -1, 1)
    hyp = sample_hypotheses(pair, model, sched, k=5, root_seed=1)
    assert hyp.std.max() > 0.0
    assert hyp.k == 5


def test_k_below_two_rejected():
    pair = _scene(4)
    sched = make_schedule(3)
    with pytest.raises(ValueError):
        sample_hypotheses(pair, lambda v, p: pair.gt_flow.vectors, sched, k=1, root_seed=0)


def test_pooled_std_matches_definition():
    rng = RngStream(5)
    flows = rng.gaussian((6, 10, 3)).astype(np.float64)
    expected = np.sqrt(flows.var(axis=0, ddof=1).mean(axis=-1))
    np.testing.assert_allclose(pooled_std(flows), expected, rtol=1e-12)


def test_ddim_hypotheses_exposed():
    pair = _scene(6)
    sched = make_schedule(6)
    model = lambda v, p: np.clip(v * 0.2, -1, 1)
    hyp = sample_hypotheses(pair, model, sched, k=3, root_seed=5, sampler="ddim", n_steps=2)
    assert hyp.flows.shape == (3, pair.n1, 3)
    with pytest.raises(ValueError):
        sample_hypotheses(pair, model, sched, k=3, root_seed=5, sampler="euler")


# -- uncertainty-error bins ---------------------------------------------------------


def test_bins_single_population():
    n = 50
    flows = np.zeros((4, n, 3), dtype=np.float32)
    flows[:, :, 0] = np.array([0.0, 0.1, 0.2, 0.3])[:, None]  # same spread per point
    hyp = hypothesis_set_from_flows(flows)
    gt = hyp.mean + np.array([0.07, 0, 0], dtype=np.float32)  # every EPE identical
    stats = uncertainty_error_bins(hyp, FlowField(gt), [0.0, 0.05, 0.1, 0.2])
    assert [s.count for s in stats] == [0, n, 0]
    populated = stats[1]
    np.testing.assert_allclose(populated.mean_unc, hyp.std[0], rtol=1e-6)
    np.testing.assert_allclose(populated.std_unc, 0.0, atol=1e-7)
    assert stats[0].empty and stats[0].mean_unc is None


def test_bins_recover_two_injected_noise_magnitudes():
    rng = RngStream(7)
    n, k = 3000, 40
    sig_a, sig_b = 0.01, 0.05
    mean = np.zeros((n, 3), dtype=np.float64)
    noise = rng.gaussian((k, n, 3), dtype=np.float64)
    scale = np.where(np.arange(n) < n // 2, sig_a, sig_b)[None, :, None]
    flows = (mean[None] + noise * scale).astype(np.float32)
    hyp = hypothesis_set_from_flows(flows)
    # errors: group A at 0.02, group B at 0.3
    gt = mean.copy()
    gt[: n // 2, 0] = 0.02
    gt[n // 2:, 0] = 0.30
    stats = uncertainty_error_bins(hyp, FlowField(gt.astype(np.float32)), [0.0, 0.1, 1.0])
    assert stats[0].count == n // 2 and stats[1].count == n // 2
    np.testing.assert_allclose(stats[0].mean_unc, sig_a, rtol=0.05)
    np.testing.assert_allclose(stats[1].mean_unc, sig_b, rtol=0.05)


def test_bins_validation():
    hyp = hypothesis_set_from_flows(np.zeros((2, 4, 3), dtype=np.float32))
    gt = FlowField(np.zeros((4, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        uncertainty_error_bins(hyp, gt, [0.1])
    with pytest.raises(ValueError):
        uncertainty_error_bins(hyp, gt, [0.2, 0.1])


# -- precision/recall curve ------------------------------------------------------------


def _constructed_hypset(std_values, mean=None):
    n = len(std_values)
    mean = np.zeros((n, 3)) if mean is None else mean
    flows = np.stack([mean - np.array(std_values)[:, None] * np.sqrt(1.5),
                      mean,
                      mean + np.array(std_values)[:, None] * np.sqrt(1.5)])
    return hypothesis_set_from_flows(flows.astype(np.float32))


def test_pr_all_retrieved_and_none_retrieved():
    rng = RngStream(8)
    n = 400
    std = 0.001 + 0.002 * rng.uniform((n,))
    hyp = _constructed_hypset(std)
    gt = np.zeros((n, 3), dtype=np.float32)
    gt[: n // 4, 0] = 0.5  # quarter of the points are outliers (EPE 0.5)
    pair = _pair_with_gt(gt)
    pts = outlier_pr_curve(hyp, pair, thresholds=[1e-9, 1.0])
    assert pts[0].recall == 1.0
    np.testing.assert_allclose(pts[0].precision, 0.25, atol=1e-9)
    assert pts[1].recall == 0.0 and pts[1].precision is None


def test_pr_recall_monotone_nonincreasing():
    rng = RngStream(9)
    n = 1000
    std = rng.uniform((n,)) * 0.003
    hyp = _constructed_hypset(std)
    gt = np.zeros((n, 3), dtype=np.float32)
    outlier_rows = rng.uniform((n,)) < 0.2
    gt[outlier_rows, 1] = 0.4
    pair = _pair_with_gt(gt)
    pts = outlier_pr_curve(hyp, pair, thresholds=[i * 2e-4 for i in range(1, 16)])
    recalls = [p.recall for p in pts]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))


def test_pr_independent_uncertainty_gives_base_rate_precision():
    rng = RngStream(10)
    n = 10_000
    std = rng.uniform((n,)) * 0.002
    hyp = _constructed_hypset(std)
    gt = np.zeros((n, 3), dtype=np.float32)
    outlier_rows = rng.uniform((n,)) < 0.175
    gt[outlier_rows, 2] = 0.45
    pair = _pair_with_gt(gt)
    base_rate = outlier_rows.mean()
    pts = outlier_pr_curve(hyp, pair, thresholds=[i * 1e-4 for i in range(1, 20)])
    for p in pts:
        if p.precision is None:
            continue
        retrieved = int((hyp.std > p.threshold).sum())
        if retrieved < 50:
            continue
        sigma = np.sqrt(base_rate * (1 - base_rate) / retrieved)
        assert abs(p.precision - base_rate) < 3 * sigma + 1e-9


def test_pr_threshold_validation():
    hyp = _constructed_hypset(np.full(4, 0.01))
    pair = _pair_with_gt(np.zeros((4, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        outlier_pr_curve(hyp, pair, thresholds=[0.2, 0.1])


def test_mean_prediction_jensen_inequality():
    rng = RngStream(11)
    flows = rng.gaussian((8, 40, 3)) * 0.2
    hyp = hypothesis_set_from_flows(flows)
    gt = rng.gaussian((40, 3)) * 0.2
    mean_epe = np.linalg.norm(hyp.mean - gt, axis=1).mean()
    per_hyp = np.mean([np.linalg.norm(flows[k] - gt, axis=1).mean() for k in range(8)])
    assert mean_epe <= per_hyp + 1e-7
