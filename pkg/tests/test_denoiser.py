"""Two-stage denoiser blocks against brute-force per-point oracles."""

import numpy as np
import pytest

from sceneflow.denoiser import (
    DenoiserConfig,
    GraphCache,
    denoise_forward,
    edgeconv_features,
    edgeconv_layer,
    global_correlation_flow,
    global_cross_block,
    init_denoiser_params,
    local_transformer,
    similarity_matrices,
)
from sceneflow.numerics import ParamStore, RngStream, Tensor, grad_check
from sceneflow.objective import LossConfig, total_loss
from sceneflow.pointcloud import (
    FlowField,
    PointCloud,
    SceneGenConfig,
    ScenePair,
    generate_scene,
    knn,
)

CFG = DenoiserConfig(feature_dim=16, knn_k=4, n_global_cross_layers=2, n_edgeconv_layers=2)
PARAMS = init_denoiser_params(CFG, RngStream(1))


def _scene(seed=0, n=16, occlusion=0.0):
    return generate_scene(
        SceneGenConfig(n1=n, n2=n, n_parts=1, occlusion_fraction=occlusion), RngStream(seed))


def _np(p, name):
    return PARAMS[name].data.astype(np.float64)


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(feature_dim=4)
    with pytest.raises(ValueError):
        DenoiserConfig(heads=2)
    with pytest.raises(ValueError):
        DenoiserConfig(n_global_cross_layers=0)
    assert DenoiserConfig(feature_dim=48).edgeconv_widths() == [24, 24, 48]


# -- edge convolution -------------------------------------------------------------


def test_edgeconv_degenerate_identical_points():
    pts = np.zeros((8, 3), dtype=np.float32) + 0.5
    out = edgeconv_features(PointCloud(pts), PARAMS, CFG).data
    # every pairwise edge feature is zero, so all rows collapse to one value
    assert np.allclose(out, out[0], atol=1e-6)
    assert np.isfinite(out).all()


def test_edgeconv_permutation_equivariance():
    rng = RngStream(3)
    pts = rng.gaussian((32, 3))
    perm = RngStream(4).permutation(32)
    base = edgeconv_features(PointCloud(pts), PARAMS, CFG).data
    permuted = edgeconv_features(PointCloud(pts[perm]), PARAMS, CFG).data
    np.testing.assert_allclose(permuted, base[perm], atol=1e-5)


def test_edgeconv_single_layer_full_neighborhood_oracle():
    # linear h with stacked-identity weights reduces to max_j x_j per channel
    rng = RngStream(5)
    n, c = 10, 3
    feats = rng.gaussian((n, c))
    w = np.concatenate([np.eye(c), np.eye(c)], axis=0).astype(np.float32)  # h = x_i + (x_j - x_i)
    idx = knn(feats, feats, n)
    out = edgeconv_layer(Tensor.const(feats[None]), idx[None],
                         Tensor.const(w), Tensor.const(np.zeros(c, dtype=np.float32)),
                         norm=None, slope=None).data[0]
    loop = np.empty_like(feats)
    for i in range(n):
        h_vals = [np.concatenate([feats[i], feats[j] - feats[i]]) @ w.astype(np.float64) for j in idx[i]]
        loop[i] = np.max(np.stack(h_vals), axis=0)
    np.testing.assert_allclose(out, loop, atol=1e-6)
    np.testing.assert_allclose(out, feats.max(axis=0)[None].repeat(n, 0), atol=1e-6)


def test_edgeconv_rejects_small_clouds():
    with pytest.raises(ValueError):
        edgeconv_features(PointCloud(np.zeros((2, 3)) + np.arange(2)[:, None]), PARAMS, CFG)


# -- local transformer -------------------------------------------------------------


def test_local_transformer_residual_identity():
    cfg = CFG
    params = init_denoiser_params(cfg, RngStream(2))
    for name, t in params.items():
        if name.startswith("loc."):
            t.data = np.zeros_like(t.data)
    rng = RngStream(6)
    pts = rng.gaussian((12, 3))
    feats = Tensor.const(rng.gaussian((12, cfg.feature_dim)))
    out = local_transformer(feats, PointCloud(pts), params, cfg)
    np.testing.assert_array_equal(out.data, feats.data)


def _local_oracle(feats, pts, params, cfg):
    """Per-point loop over Eq. of the vector attention; returns output and the
    softmax weights for the row-sum check."""
    n, d = feats.shape
    idx = knn(pts, pts, cfg.knn_k)
    f64 = feats.astype(np.float64)
    p64 = pts.astype(np.float64)

    def lin(x, name):
        return x @ _np(params, f"loc.{name}_w") + _np(params, f"loc.{name}_b")

    out = np.empty_like(f64)
    all_weights = []
    for i in range(n):
        nbrs = idx[i]
        rel = p64[i][None, :] - p64[nbrs]
        delta = np.maximum(lin(rel, "delta0"), 0.0) @ _np(params, "loc.delta1_w") + _np(params, "loc.delta1_b")
        pre = lin(f64[i][None, :], "phi") - lin(f64[nbrs], "psi") + delta
        gamma = np.maximum(lin(pre, "gamma0"), 0.0) @ _np(params, "loc.gamma1_w") + _np(params, "loc.gamma1_b")
        weights = _softmax(gamma, axis=0)  # over the neighbor axis
        all_weights.append(weights)
        agg = (weights * (lin(f64[nbrs], "alpha") + delta)).sum(axis=0)
        out[i] = f64[i] + lin(agg[None, :], "out")[0]
    return out, np.stack(all_weights)


def test_local_transformer_matches_loop_oracle():
    rng = RngStream(7)
    pts = rng.gaussian((16, 3))
    feats = rng.gaussian((16, CFG.feature_dim))
    out = local_transformer(Tensor.const(feats), PointCloud(pts), PARAMS, CFG).data
    oracle, weights = _local_oracle(feats, pts, PARAMS, CFG)
    np.testing.assert_allclose(out, oracle, atol=1e-5)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-6)


# -- global/cross blocks -------------------------------------------------------------


def test_global_cross_symmetric_inputs():
    rng = RngStream(8)
    f = rng.gaussian((10, CFG.feature_dim))
    o1, o2 = global_cross_block(Tensor.const(f), Tensor.const(f.copy()), PARAMS, CFG, layer=0)
    np.testing.assert_array_equal(o1.data, o2.data)


def _attn_oracle(xq, xkv, params, prefix):
    d = xq.shape[-1]
    q = xq @ _np(params, f"{prefix}.phi_w") + _np(params, f"{prefix}.phi_b")
    k = xkv @ _np(params, f"{prefix}.psi_w") + _np(params, f"{prefix}.psi_b")
    v = xkv @ _np(params, f"{prefix}.alpha_w") + _np(params, f"{prefix}.alpha_b")
    attn = _softmax(q @ k.T / np.sqrt(d), axis=-1)
    return attn @ v, attn


def _ln_oracle(x, params, prefix):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + 1e-5)
    return y * _np(params, f"{prefix}_g") + _np(params, f"{prefix}_b")


def _block_oracle(f1, f2, params, li):
    pre = f"gc{li}"

    def half_step(x, other, kind):
        a, attn = _attn_oracle(x, other, params, f"{pre}.{kind}")
        assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
        proj = a @ _np(params, f"{pre}.{kind}.out_w") + _np(params, f"{pre}.{kind}.out_b")
        return x + _ln_oracle(proj, params, f"{pre}.{kind}.ln")

    f1 = half_step(f1, f1, "self")
    f2 = half_step(f2, f2, "self")
    n1, n2 = half_step(f1, f2, "cross"), half_step(f2, f1, "cross")
    f1, f2 = n1, n2

    def ffn(x):
        h = np.maximum(x @ _np(params, f"{pre}.ffn0_w") + _np(params, f"{pre}.ffn0_b"), 0.0)
        h = h @ _np(params, f"{pre}.ffn1_w") + _np(params, f"{pre}.ffn1_b")
        return x + _ln_oracle(h, params, f"{pre}.ffn.ln")

    return ffn(f1), ffn(f2)


def test_global_cross_two_blocks_match_sequential_oracle():
    rng = RngStream(9)
    f1 = rng.gaussian((8, CFG.feature_dim))
    f2 = rng.gaussian((8, CFG.feature_dim))
    o1, o2 = global_cross_block(Tensor.const(f1), Tensor.const(f2), PARAMS, CFG, layer=0)
    o1, o2 = global_cross_block(o1, o2, PARAMS, CFG, layer=1)
    e1, e2 = _block_oracle(f1.astype(np.float64), f2.astype(np.float64), PARAMS, 0)
    e1, e2 = _block_oracle(e1, e2, PARAMS, 1)
    # float32 pipeline vs float64 oracle, two blocks deep
    np.testing.assert_allclose(o1.data, e1, atol=3e-5)
    np.testing.assert_allclose(o2.data, e2, atol=3e-5)


def test_global_cross_dim_mismatch():
    with pytest.raises(ValueError):
        global_cross_block(Tensor.const(np.zeros((4, 16))), Tensor.const(np.zeros((4, 8))),
                           PARAMS, CFG, layer=0)


# -- similarity + correlation ----------------------------------------------------------


def test_similarity_orthogonal_limit():
    scale = 60.0
    f = np.eye(8, CFG.feature_dim).astype(np.float32) * scale
    mc, _ = similarity_matrices(Tensor.const(f), Tensor.const(f), PARAMS)
    np.testing.assert_allclose(mc.data, np.eye(8), atol=1e-5)


def test_similarity_rows_stochastic_and_oracle():
    rng = RngStream(10)
    f1 = rng.gaussian((8, CFG.feature_dim))
    f2 = rng.gaussian((12, CFG.feature_dim))
    mc, ms = similarity_matrices(Tensor.const(f1), Tensor.const(f2), PARAMS, stage="corr2")
    np.testing.assert_allclose(mc.data.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ms.data.sum(axis=-1), 1.0, atol=1e-6)
    d = CFG.feature_dim
    mc_exp = _softmax(f1.astype(np.float64) @ f2.astype(np.float64).T / np.sqrt(d))
    q = f1.astype(np.float64) @ _np(PARAMS, "corr2.wq_w") + _np(PARAMS, "corr2.wq_b")
    k = f1.astype(np.float64) @ _np(PARAMS, "corr2.wk_w") + _np(PARAMS, "corr2.wk_b")
    ms_exp = _softmax(q @ k.T / np.sqrt(d))
    np.testing.assert_allclose(mc.data, mc_exp, atol=1e-6)
    np.testing.assert_allclose(ms.data, ms_exp, atol=1e-6)


def test_correlation_hard_assignment():
    rng = RngStream(11)
    n = 8
    src = rng.gaussian((n, 3))
    tgt = rng.gaussian((n, 3))
    perm = RngStream(12).permutation(n)
    m_cross = np.eye(n, dtype=np.float32)[perm]
    out = global_correlation_flow(m_cross, np.eye(n, dtype=np.float32), src, tgt).data
    np.testing.assert_allclose(out, tgt[perm] - src, atol=1e-6)


def test_correlation_identity_zero_flow():
    pts = RngStream(13).gaussian((6, 3))
    eye = np.eye(6, dtype=np.float32)
    out = global_correlation_flow(eye, eye, pts, pts).data
    np.testing.assert_allclose(out, 0.0, atol=1e-7)


def test_correlation_matches_two_matmul_oracle():
    rng = RngStream(14)
    n1, n2 = 8, 10
    mc = _softmax(rng.gaussian((n1, n2)).astype(np.float64)).astype(np.float32)
    ms = _softmax(rng.gaussian((n1, n1)).astype(np.float64)).astype(np.float32)
    src, tgt = rng.gaussian((n1, 3)), rng.gaussian((n2, 3))
    out = global_correlation_flow(mc, ms, src, tgt).data
    oracle = ms.astype(np.float64) @ (mc.astype(np.float64) @ tgt.astype(np.float64) - src.astype(np.float64))
    np.testing.assert_allclose(out, oracle, atol=1e-6)


def test_correlation_shape_errors():
    rng = RngStream(15)
    with pytest.raises(ValueError):
        global_correlation_flow(np.ones((4, 5), np.float32), np.ones((4, 3), np.float32),
                                rng.gaussian((4, 3)), rng.gaussian((5, 3)))
    with pytest.raises(ValueError):
        global_correlation_flow(np.ones((4, 5), np.float32), np.ones((4, 4), np.float32),
                                rng.gaussian((5, 3)), rng.gaussian((5, 3)))


# -- full forward -----------------------------------------------------------------


def test_denoise_forward_shapes():
    pair = _scene(seed=20, n=24)
    v_t = RngStream(21).gaussian((24, 3))
    v_init, v_pred = denoise_forward(v_t, pair, PARAMS, CFG)
    assert v_init.shape == (24, 3) and v_pred.shape == (24, 3)
    assert np.isfinite(v_init.data).all() and np.isfinite(v_pred.data).all()
    with pytest.raises(ValueError):
        denoise_forward(np.zeros((7, 3), np.float32), pair, PARAMS, CFG)


def test_denoise_forward_translation_invariance():
    pair = _scene(seed=22, n=20)
    v_t = RngStream(23).gaussian((20, 3)) * 0.2
    base_i, base_p = denoise_forward(v_t, pair, PARAMS, CFG)
    c = np.array([1.7, -2.3, 0.9], dtype=np.float32)
    shifted = ScenePair(
        source=PointCloud(pair.source.points + c),
        target=PointCloud(pair.target.points + c),
        gt_flow=pair.gt_flow,
        valid_mask=pair.valid_mask,
    )
    shift_i, shift_p = denoise_forward(v_t, shifted, PARAMS, CFG)
    np.testing.assert_allclose(shift_i.data, base_i.data, atol=1e-4)
    np.testing.assert_allclose(shift_p.data, base_p.data, atol=1e-4)


def test_denoise_forward_permutation_equivariance():
    pair = _scene(seed=24, n=32)
    v_t = RngStream(25).gaussian((32, 3)) * 0.2
    base_i, base_p = denoise_forward(v_t, pair, PARAMS, CFG)
    perm = RngStream(26).permutation(32)
    permuted = ScenePair(
        source=PointCloud(pair.source.points[perm]),
        target=pair.target,
        gt_flow=FlowField(pair.gt_flow.vectors[perm]),
        valid_mask=pair.valid_mask[perm],
    )
    out_i, out_p = denoise_forward(v_t[perm], permuted, PARAMS, CFG)
    np.testing.assert_allclose(out_i.data, base_i.data[perm], atol=1e-5)
    np.testing.assert_allclose(out_p.data, base_p.data[perm], atol=1e-5)


def test_denoise_forward_convex_combination_bound():
    pair = _scene(seed=27, n=24)
    v_t = RngStream(28).gaussian((24, 3))
    v_init, v_pred = denoise_forward(v_t, pair, PARAMS, CFG)
    bound = (np.linalg.norm(pair.target.points, axis=1).max()
             + np.linalg.norm(pair.source.points, axis=1).max() + 1e-5)
    assert np.linalg.norm(v_init.data, axis=1).max() <= bound
    assert np.linalg.norm(v_pred.data, axis=1).max() <= bound


def test_denoise_forward_deterministic():
    pair = _scene(seed=29, n=20)
    v_t = RngStream(30).gaussian((20, 3))
    a = denoise_forward(v_t, pair, PARAMS, CFG)
    b = denoise_forward(v_t, pair, PARAMS, CFG)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_denoise_forward_grad_check():
    # graphs are frozen across the +/-eps evaluations: neighbor flips make the
    # raw forward only piecewise differentiable
    params = init_denoiser_params(CFG, RngStream(2))
    pair = _scene(seed=40, n=16)
    v_t = RngStream(41).gaussian((16, 3)) * 0.3
    lcfg = LossConfig()
    graphs = GraphCache()

    def f(p):
        vi, vp = denoise_forward(v_t, pair, p, CFG, graphs=graphs)
        return total_loss(vi, vp, pair.gt_flow.vectors, lcfg)

    report = grad_check(f, params, eps=1e-3, tol=1e-3, n_coords=50, rng=RngStream(42))
    assert report.passed, str(report)


def test_denoise_forward_grad_converges_with_eps():
    # the finite difference converges to the analytic gradient, so the
    # backward pass is exact (eps=1e-3 straddles activation kinks on some
    # instances; shrinking eps removes the disagreement)
    params = init_denoiser_params(CFG, RngStream(1))
    pair = _scene(seed=9, n=16)
    v_t = RngStream(11).gaussian((16, 3)) * 0.3
    lcfg = LossConfig()
    graphs = GraphCache()

    def f(p):
        vi, vp = denoise_forward(v_t, pair, p, CFG, graphs=graphs)
        return total_loss(vi, vp, pair.gt_flow.vectors, lcfg)

    report = grad_check(f, params, eps=1e-5, tol=1e-4, n_coords=40, rng=RngStream(3))
    assert report.passed, str(report)


def test_denoise_forward_distinct_cloud_sizes():
    pair = generate_scene(
        SceneGenConfig(n1=20, n2=28, n_parts=1, occlusion_fraction=0.0), RngStream(34))
    v_t = RngStream(35).gaussian((20, 3)) * 0.1
    v_init, v_pred = denoise_forward(v_t, pair, PARAMS, CFG)
    assert v_init.shape == (20, 3) and v_pred.shape == (20, 3)
