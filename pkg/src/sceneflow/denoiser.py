"""Two-stage flow denoiser over point cloud pairs.

Stage 1 warps the source by the noisy flow, extracts edge-convolution
features on both clouds and produces an initial estimate through global
correlation. Stage 2 re-warps the original source by that estimate, runs a
deeper feature pipeline (edge convolutions, a local vector-attention
transformer, a stack of global/cross attention blocks) and correlates again
for the refined prediction.

All geometry enters the feature path through differences or centroid-centered
coordinates, so translating both clouds together leaves the predictions
unchanged; the raw positions appear only inside the correlation readout,
where the row-stochastic matrices cancel a common offset.

The internal compute path is batched over [B, N, *]; the public operations
are single-cloud wrappers around it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ParamStore,
    RngStream,
    Tensor,
    affine_norm,
    broadcast_to,
    concat,
    gather_rows,
    leaky_relu,
    linear,
    matmul,
    narrow,
    relu,
    reshape,
    softmax,
    tmax,
    tmean,
    transpose,
    tsum,
)
from .pointcloud import FlowField, PointCloud, ScenePair, knn_batched


@dataclass
class DenoiserConfig:
    feature_dim: int = 128
    knn_k: int = 16
    n_global_cross_layers: int = 14
    n_edgeconv_layers: int = 3
    heads: int = 1

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if self.knn_k < 1 or self.n_global_cross_layers < 1 or self.n_edgeconv_layers < 1:
            raise ValueError("knn_k, n_global_cross_layers and n_edgeconv_layers must be >= 1")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")

    def edgeconv_widths(self) -> list[int]:
        d = self.feature_dim
        return [d // 2] * (self.n_edgeconv_layers - 1) + [d]


# -- parameter construction ---------------------------------------------------


def _kaiming_uniform(rng: RngStream, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return (rng.uniform(shape) * 2.0 - 1.0) * bound


def _add_linear(params: ParamStore, rng: RngStream, name: str, fan_in: int, fan_out: int):
    params.add(f"{name}_w", _kaiming_uniform(rng, fan_in, (fan_in, fan_out)))
    params.add(f"{name}_b", np.zeros(fan_out))


def _add_norm(params: ParamStore, name: str, width: int):
    params.add(f"{name}_g", np.ones(width))
    params.add(f"{name}_b", np.zeros(width))


def init_denoiser_params(cfg: DenoiserConfig, rng: RngStream) -> ParamStore:
    """Fresh weights for every block, Kaiming-uniform fan-in scaling."""
    d = cfg.feature_dim
    params = ParamStore()
    for stage in ("ec1", "ec2"):
        c_in = 3
        for li, width in enumerate(cfg.edgeconv_widths()):
            _add_linear(params, rng, f"{stage}.l{li}", 2 * c_in, width)
            _add_norm(params, f"{stage}.l{li}.n", width)
            c_in = width
    for proj in ("phi", "psi", "alpha"):
        _add_linear(params, rng, f"loc.{proj}", d, d)
    _add_linear(params, rng, "loc.delta0", 3, d)
    _add_linear(params, rng, "loc.delta1", d, d)
    _add_linear(params, rng, "loc.gamma0", d, d)
    _add_linear(params, rng, "loc.gamma1", d, d)
    _add_linear(params, rng, "loc.out", d, d)
    for li in range(cfg.n_global_cross_layers):
        for kind in ("self", "cross"):
            for proj in ("phi", "psi", "alpha"):
                _add_linear(params, rng, f"gc{li}.{kind}.{proj}", d, d)
            _add_linear(params, rng, f"gc{li}.{kind}.out", d, d)
            _add_norm(params, f"gc{li}.{kind}.ln", d)
        _add_linear(params, rng, f"gc{li}.ffn0", d, 2 * d)
        _add_linear(params, rng, f"gc{li}.ffn1", 2 * d, d)
        _add_norm(params, f"gc{li}.ffn.ln", d)
    for stage in ("corr1", "corr2"):
        _add_linear(params, rng, f"{stage}.wq", d, d)
        _add_linear(params, rng, f"{stage}.wk", d, d)
    return params


def _lin(x: Tensor, params: ParamStore, name: str) -> Tensor:
    return linear(x, params[f"{name}_w"], params[f"{name}_b"])


class GraphCache:
    """Replays the dynamic KNN graphs of one forward pass across later passes.

    The neighbor graphs depend on intermediate features, so an ordinary
    forward is only piecewise differentiable; finite-difference gradient
    checks pass a cache so every evaluation sees the same graphs.
    """

    def __init__(self):
        self._store: list[np.ndarray] = []
        self._pos = 0

    def _begin(self) -> None:
        self._pos = 0

    def fetch(self, compute) -> np.ndarray:
        if self._pos < len(self._store):
            idx = self._store[self._pos]
        else:
            idx = compute()
            self._store.append(idx)
        self._pos += 1
        return idx


def _knn_graph(x: np.ndarray, k: int, graphs: GraphCache | None) -> np.ndarray:
    if graphs is None:
        return knn_batched(x, k)
    return graphs.fetch(lambda: knn_batched(x, k))


# -- batched building blocks ---------------------------------------------------


def edgeconv_layer(feats: Tensor, idx: np.ndarray, w: Tensor, b: Tensor, *,
                   norm: tuple[Tensor, Tensor] | None = None, slope: float | None = 0.2) -> Tensor:
    """One edge-convolution layer on [B, N, c] features with neighbor indices
    [B, N, k]: h(concat(x_i, x_j - x_i)) reduced by max over the neighbors.

    `norm` supplies per-channel (gain, bias) for normalization over the edge
    responses of each scene; `slope=None` skips the activation (plain linear
    h, used by the brute-force oracles in the tests)."""
    bsz, n, c = feats.shape
    k = idx.shape[-1]
    nbr = gather_rows(feats, idx)  # [B, N, k, c]
    center = broadcast_to(reshape(feats, (bsz, n, 1, c)), (bsz, n, k, c))
    h = linear(concat([center, nbr - center], axis=-1), w, b)
    if norm is not None:
        h = affine_norm(h, norm[0], norm[1], axes=(1, 2))
    if slope is not None:
        h = leaky_relu(h, slope)
    return tmax(h, axis=2)


def _edgeconv(xyz: Tensor, params: ParamStore, cfg: DenoiserConfig, stage: str,
              graphs: GraphCache | None = None) -> Tensor:
    """Stacked dynamic-graph edge convolutions; layer 1 sees centroid-centered
    coordinates, deeper layers rebuild the KNN graph in feature space."""
    if xyz.shape[1] < cfg.knn_k:
        raise ValueError(f"need at least knn_k={cfg.knn_k} points, got {xyz.shape[1]}")
    feats = xyz - tmean(xyz, axis=1, keepdims=True)
    for li in range(cfg.n_edgeconv_layers):
        idx = _knn_graph(feats.data, cfg.knn_k, graphs)
        feats = edgeconv_layer(
            feats, idx,
            params[f"{stage}.l{li}_w"], params[f"{stage}.l{li}_b"],
            norm=(params[f"{stage}.l{li}.n_g"], params[f"{stage}.l{li}.n_b"]),
        )
    return feats


def _local_transformer(feats: Tensor, xyz: Tensor, params: ParamStore, cfg: DenoiserConfig,
                       graphs: GraphCache | None = None) -> Tensor:
    """Vector attention over the k spatial nearest neighbors with relative
    positional embeddings, followed by a linear layer and a residual."""
    if xyz.shape[1] < cfg.knn_k:
        raise ValueError(f"need at least knn_k={cfg.knn_k} points, got {xyz.shape[1]}")
    bsz, n, d = feats.shape
    k = cfg.knn_k
    idx = _knn_graph(xyz.data, k, graphs)
    q = _lin(feats, params, "loc.phi")
    keys = gather_rows(_lin(feats, params, "loc.psi"), idx)
    values = gather_rows(_lin(feats, params, "loc.alpha"), idx)
    p_nbr = gather_rows(xyz, idx)
    rel = broadcast_to(reshape(xyz, (bsz, n, 1, 3)), (bsz, n, k, 3)) - p_nbr  # p_i - p_j
    delta = _lin(relu(_lin(rel, params, "loc.delta0")), params, "loc.delta1")
    pre = broadcast_to(reshape(q, (bsz, n, 1, d)), (bsz, n, k, d)) - keys + delta
    weights = softmax(_lin(relu(_lin(pre, params, "loc.gamma0")), params, "loc.gamma1"), axis=2)
    agg = tsum(weights * (values + delta), axis=2)
    return feats + _lin(agg, params, "loc.out")


def _attention(x_q: Tensor, x_kv: Tensor, params: ParamStore, prefix: str) -> Tensor:
    d = x_q.shape[-1]
    # the 1/sqrt(d) logit scale is applied to q, which is much smaller than
    # the [N, M] logit matrix
    q = _lin(x_q, params, f"{prefix}.phi") * (1.0 / math.sqrt(d))
    k = _lin(x_kv, params, f"{prefix}.psi")
    v = _lin(x_kv, params, f"{prefix}.alpha")
    logits = matmul(q, transpose(k, (0, 2, 1)))
    return matmul(softmax(logits, axis=-1), v)


def _attn_residual(x: Tensor, attn_out: Tensor, params: ParamStore, prefix: str) -> Tensor:
    projected = _lin(attn_out, params, f"{prefix}.out")
    return x + affine_norm(projected, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"], axes=-1)


def _ffn_residual(f: Tensor, params: ParamStore, pre: str) -> Tensor:
    ffn = _lin(relu(_lin(f, params, f"{pre}.ffn0")), params, f"{pre}.ffn1")
    return f + affine_norm(ffn, params[f"{pre}.ffn.ln_g"], params[f"{pre}.ffn.ln_b"], axes=-1)


def _global_cross_block(f1: Tensor, f2: Tensor, params: ParamStore, li: int) -> tuple[Tensor, Tensor]:
    if f1.shape[-1] != f2.shape[-1]:
        raise ValueError(f"feature dims differ: {f1.shape[-1]} vs {f2.shape[-1]}")
    pre = f"gc{li}"
    f1 = _attn_residual(f1, _attention(f1, f1, params, f"{pre}.self"), params, f"{pre}.self")
    f2 = _attn_residual(f2, _attention(f2, f2, params, f"{pre}.self"), params, f"{pre}.self")
    c1 = _attention(f1, f2, params, f"{pre}.cross")
    c2 = _attention(f2, f1, params, f"{pre}.cross")
    f1 = _attn_residual(f1, c1, params, f"{pre}.cross")
    f2 = _attn_residual(f2, c2, params, f"{pre}.cross")
    return _ffn_residual(f1, params, pre), _ffn_residual(f2, params, pre)


def _global_cross_block_stacked(f: Tensor, half: int, params: ParamStore, li: int) -> Tensor:
    """Same block on the [2B, N, d] stack of both clouds: self-attention acts
    per item, cross-attention swaps the two halves of the batch."""
    pre = f"gc{li}"
    f = _attn_residual(f, _attention(f, f, params, f"{pre}.self"), params, f"{pre}.self")
    swapped = concat([narrow(f, 0, half, half), narrow(f, 0, 0, half)], axis=0)
    f = _attn_residual(f, _attention(f, swapped, params, f"{pre}.cross"), params, f"{pre}.cross")
    return _ffn_residual(f, params, pre)


def _similarity(f1: Tensor, f2: Tensor, params: ParamStore, stage: str) -> tuple[Tensor, Tensor]:
    d = f1.shape[-1]
    if f2.shape[-1] != d:
        raise ValueError(f"feature dims differ: {d} vs {f2.shape[-1]}")
    scale = 1.0 / math.sqrt(d)
    m_cross = softmax(matmul(f1 * scale, transpose(f2, (0, 2, 1))), axis=-1)
    q = _lin(f1, params, f"{stage}.wq") * scale
    k = _lin(f1, params, f"{stage}.wk")
    m_self = softmax(matmul(q, transpose(k, (0, 2, 1))), axis=-1)
    return m_cross, m_self


def _correlation(m_cross: Tensor, m_self: Tensor, p_src: Tensor, p_tgt: Tensor) -> Tensor:
    n1, n2 = m_cross.shape[-2], m_cross.shape[-1]
    if m_self.shape[-2:] != (n1, n1):
        raise ValueError(f"m_self must be [{n1}x{n1}], got {m_self.shape[-2:]}")
    if p_src.shape[-2:] != (n1, 3) or p_tgt.shape[-2:] != (n2, 3):
        raise ValueError("point matrices do not match the similarity shapes")
    return matmul(m_self, matmul(m_cross, p_tgt) - p_src)


def denoise_core(v_t: Tensor, p_src: Tensor, p_tgt: Tensor,
                 params: ParamStore, cfg: DenoiserConfig,
                 graphs: GraphCache | None = None) -> tuple[Tensor, Tensor]:
    """Batched two-stage forward: [B, N1, 3] noisy flow plus the two clouds
    to (initial, refined) flow predictions.

    When the clouds have matching batch and point counts the two sides run
    stacked along the batch axis (the weights are shared anyway); otherwise
    each side is processed separately, which also covers the sampling fast
    path of K noisy flows against one [1, N, 3] cloud pair.
    """
    if graphs is not None:
        graphs._begin()
    if v_t.shape == p_src.shape == p_tgt.shape:
        return _denoise_core_stacked(v_t, p_src, p_tgt, params, cfg, graphs)
    return _denoise_core_plain(v_t, p_src, p_tgt, params, cfg, graphs)


def _denoise_core_plain(v_t, p_src, p_tgt, params, cfg, graphs=None):
    f1 = _edgeconv(p_src + v_t, params, cfg, "ec1", graphs)
    f2 = _edgeconv(p_tgt, params, cfg, "ec1", graphs)
    m_cross, m_self = _similarity(f1, f2, params, "corr1")
    v_init = _correlation(m_cross, m_self, p_src, p_tgt)

    warped = p_src + v_init
    g1 = _edgeconv(warped, params, cfg, "ec2", graphs)
    g2 = _edgeconv(p_tgt, params, cfg, "ec2", graphs)
    g1 = _local_transformer(g1, warped, params, cfg, graphs)
    g2 = _local_transformer(g2, p_tgt, params, cfg, graphs)
    for li in range(cfg.n_global_cross_layers):
        g1, g2 = _global_cross_block(g1, g2, params, li)
    m_cross2, m_self2 = _similarity(g1, g2, params, "corr2")
    v_pred = _correlation(m_cross2, m_self2, p_src, p_tgt)
    return v_init, v_pred


def _denoise_core_stacked(v_t, p_src, p_tgt, params, cfg, graphs=None):
    half = v_t.shape[0]
    xy1 = concat([p_src + v_t, p_tgt], axis=0)
    f = _edgeconv(xy1, params, cfg, "ec1", graphs)
    m_cross, m_self = _similarity(narrow(f, 0, 0, half), narrow(f, 0, half, half), params, "corr1")
    v_init = _correlation(m_cross, m_self, p_src, p_tgt)

    xy2 = concat([p_src + v_init, p_tgt], axis=0)
    g = _edgeconv(xy2, params, cfg, "ec2", graphs)
    g = _local_transformer(g, xy2, params, cfg, graphs)
    for li in range(cfg.n_global_cross_layers):
        g = _global_cross_block_stacked(g, half, params, li)
    m_cross2, m_self2 = _similarity(narrow(g, 0, 0, half), narrow(g, 0, half, half), params, "corr2")
    v_pred = _correlation(m_cross2, m_self2, p_src, p_tgt)
    return v_init, v_pred


# -- public single-cloud operations --------------------------------------------


def _as_batched(x, width: int) -> Tensor:
    arr = x if isinstance(x, Tensor) else Tensor.const(np.asarray(x, dtype=np.float32))
    if arr.ndim == 2:
        return reshape(arr, (1,) + arr.shape)
    if arr.ndim == 3 and (width == 0 or arr.shape[-1] == width):
        return arr
    raise ValueError(f"expected [N, {width}] or [B, N, {width}], got {arr.shape}")


def edgeconv_features(pc: PointCloud, params: ParamStore, cfg: DenoiserConfig, stage: str = "ec1") -> Tensor:
    """[N, d] features for one cloud from the stacked edge convolutions."""
    out = _edgeconv(_as_batched(pc.points, 3), params, cfg, stage)
    return reshape(out, out.shape[1:])


def local_transformer(feat: Tensor, pc: PointCloud, params: ParamStore, cfg: DenoiserConfig) -> Tensor:
    out = _local_transformer(_as_batched(feat, 0), _as_batched(pc.points, 3), params, cfg)
    return reshape(out, out.shape[1:])


def global_cross_block(f1: Tensor, f2: Tensor, params: ParamStore, cfg: DenoiserConfig, layer: int = 0) -> tuple[Tensor, Tensor]:
    o1, o2 = _global_cross_block(_as_batched(f1, 0), _as_batched(f2, 0), params, layer)
    return reshape(o1, o1.shape[1:]), reshape(o2, o2.shape[1:])


def similarity_matrices(f1: Tensor, f2: Tensor, params: ParamStore, stage: str = "corr2") -> tuple[Tensor, Tensor]:
    mc, ms = _similarity(_as_batched(f1, 0), _as_batched(f2, 0), params, stage)
    return reshape(mc, mc.shape[1:]), reshape(ms, ms.shape[1:])


def global_correlation_flow(m_cross, m_self, p_source, p_target) -> Tensor:
    """V = M_self (M_cross P_target - P_source) for one scene."""
    out = _correlation(
        _as_batched(m_cross, 0), _as_batched(m_self, 0),
        _as_batched(p_source, 3), _as_batched(p_target, 3),
    )
    return reshape(out, out.shape[1:])


def denoise_forward(v_t: FlowField | np.ndarray, pair: ScenePair,
                    params: ParamStore, cfg: DenoiserConfig,
                    graphs: GraphCache | None = None) -> tuple[Tensor, Tensor]:
    """Initial and refined flow predictions ([N1, 3] tensors) for one pair."""
    v = v_t.vectors if isinstance(v_t, FlowField) else np.asarray(v_t, dtype=np.float32)
    if v.shape != (pair.n1, 3):
        raise ValueError(f"v_t must be [{pair.n1}, 3], got {v.shape}")
    v_init, v_pred = denoise_core(
        _as_batched(v, 3), _as_batched(pair.source.points, 3),
        _as_batched(pair.target.points, 3), params, cfg, graphs,
    )
    return reshape(v_init, v_init.shape[1:]), reshape(v_pred, v_pred.shape[1:])
