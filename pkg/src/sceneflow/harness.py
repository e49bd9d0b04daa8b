"""Training and evaluation drivers; the only module with side effects."""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np

from . import reports
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, parse_config, serialize_config
from .denoiser import denoise_core, init_denoiser_params
from .diffusion import make_schedule, q_sample, sample_ddim, sample_ddpm
from .numerics import ParamStore, RngStream, Tensor, no_grad
from .objective import MetricReport, macro_average, metrics, total_loss
from .optim import AdamW, clip_global_norm, one_cycle_lr
from .pointcloud import (
    ScenePair,
    farthest_point_sampling,
    load_scene,
    read_manifest,
)
from .uncertainty import sample_hypotheses


def make_model(params: ParamStore, cfg: Config):
    """Wrap the denoiser as `model(v_t_meters, pair) -> v0_hat_meters` for the
    samplers; accepts [N, 3] or a stacked [K, N, 3] noisy flow."""
    dcfg = cfg.denoiser

    def model(v_t: np.ndarray, pair: ScenePair) -> np.ndarray:
        v_t = np.asarray(v_t, dtype=np.float32)
        squeeze = v_t.ndim == 2
        if squeeze:
            v_t = v_t[None]
        with no_grad():
            _, v_pred = denoise_core(
                Tensor.const(v_t),
                Tensor.const(pair.source.points[None]),
                Tensor.const(pair.target.points[None]),
                params, dcfg,
            )
        out = v_pred.data
        return out[0] if squeeze else out

    return model


def subsample_pair(pair: ScenePair, n_points: int, rng: RngStream, sampling: str = "fps") -> ScenePair:
    """Reduce both clouds to n_points (FPS or uniform random without
    replacement); flow and mask follow the source indices."""
    if sampling not in ("fps", "random"):
        raise ValueError(f"unknown sampling kind: {sampling!r}")
    if n_points > pair.n1 or n_points > pair.n2:
        raise ValueError(f"cannot sample {n_points} points from ({pair.n1}, {pair.n2})")
    if pair.n1 == n_points and pair.n2 == n_points:
        return pair
    if sampling == "fps":
        src_idx = farthest_point_sampling(pair.source, n_points, rng)
        tgt_idx = farthest_point_sampling(pair.target, n_points, rng)
    else:
        src_idx = rng.choice(pair.n1, n_points)
        tgt_idx = rng.choice(pair.n2, n_points)
    return pair.subsample(src_idx, tgt_idx)


def _init_params(cfg: Config) -> ParamStore:
    return init_denoiser_params(cfg.denoiser, RngStream(cfg.train.seed).derive(0))


def train(cfg: Config, data_dir: str | Path, out_dir: str | Path,
          resume: str | Path | None = None, log=print) -> Path:
    """Run the training loop and return the path of the final checkpoint.

    Everything random is drawn from a single counter-based stream whose state
    is checkpointed, so a resumed run replays the uninterrupted one bit for
    bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_paths = read_manifest(data_dir)
    tcfg = cfg.train

    if resume is not None:
        ck = load_checkpoint(resume)
        cfg = parse_config(ck.config_text)
        tcfg = cfg.train
        params = _init_params(cfg)
        params.load_state(ck.params_state)
        opt = AdamW(params, weight_decay=tcfg.weight_decay)
        opt.load_state(ck.opt_state, t=ck.iteration)
        stream = RngStream(*ck.rng_state)
        start_iter = ck.iteration
    else:
        params = _init_params(cfg)
        opt = AdamW(params, weight_decay=tcfg.weight_decay)
        stream = RngStream(tcfg.seed)
        start_iter = 0

    sched = make_schedule(cfg.diffusion.t_train, cfg.diffusion.schedule)
    scale = cfg.diffusion.flow_scale
    n_pts = tcfg.points_train
    log_rows: list[tuple[int, float, float]] = []
    started = time.time()

    for it in range(start_iter, tcfg.iterations):
        lr = one_cycle_lr(it, tcfg.iterations, tcfg.peak_lr)
        scene_ids = [stream.randint(0, len(scene_paths)) for _ in range(tcfg.batch_size)]
        v_t = np.empty((tcfg.batch_size, n_pts, 3), dtype=np.float32)
        srcs = np.empty_like(v_t)
        tgts = np.empty_like(v_t)
        gts = np.empty_like(v_t)
        for b, sid in enumerate(scene_ids):
            pair = subsample_pair(load_scene(scene_paths[sid]), n_pts, stream)
            t = stream.randint(1, sched.t_steps + 1)
            eps = stream.gaussian((n_pts, 3))
            v0 = pair.gt_flow.vectors / scale
            v_t[b] = q_sample(v0, t, sched, eps) * scale
            srcs[b] = pair.source.points
            tgts[b] = pair.target.points
            gts[b] = pair.gt_flow.vectors

        params.zero_grad()
        v_init, v_pred = denoise_core(
            Tensor.const(v_t), Tensor.const(srcs), Tensor.const(tgts), params, cfg.denoiser
        )
        loss = total_loss(v_init, v_pred, Tensor.const(gts), cfg.loss) * (
            1.0 / (tcfg.batch_size * n_pts)
        )
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise RuntimeError(
                f"non-finite loss at iteration {it} (scenes {scene_ids})"
            )
        loss.backward()
        clip_global_norm(params, tcfg.grad_clip)
        opt.step(lr)

        if it % tcfg.log_every == 0 or it == tcfg.iterations - 1:
            log_rows.append((it, loss_val, lr))
            if log is not None and (it % (tcfg.log_every * 10) == 0 or it == tcfg.iterations - 1):
                rate = (it - start_iter + 1) / max(time.time() - started, 1e-9)
                log(f"iter {it:6d}  loss {loss_val:.4f}  lr {lr:.2e}  ({rate:.2f} it/s)")
        if tcfg.checkpoint_every and (it + 1) % tcfg.checkpoint_every == 0 and it + 1 < tcfg.iterations:
            _save(out_dir / f"ckpt_{it + 1:06d}.dsfc", cfg, params, opt, it + 1, stream)

    final = out_dir / "ckpt_final.dsfc"
    _save(final, cfg, params, opt, tcfg.iterations, stream)
    if log_rows:
        reports.write_train_log(out_dir / "train_log.csv", log_rows)
        reports.fig_train_loss(out_dir / "train_loss.png", log_rows)
    return final


def _save(path: Path, cfg: Config, params: ParamStore, opt: AdamW,
          iteration: int, stream: RngStream) -> None:
    save_checkpoint(path, Checkpoint(
        config_text=serialize_config(cfg),
        iteration=iteration,
        params_state=params.state_dict(),
        opt_state=opt.state_dict(),
        rng_state=stream.state,
    ))


def load_trained(ckpt_path: str | Path) -> tuple[Config, ParamStore]:
    ck = load_checkpoint(ckpt_path)
    cfg = parse_config(ck.config_text)
    params = _init_params(cfg)
    params.load_state(ck.params_state)
    return cfg, params


def parse_steps(steps: str) -> tuple[int, int]:
    """Parse an 'A@B' ablation label into (sampling steps, training steps)."""
    try:
        a, b = steps.split("@")
        a, b = int(a), int(b)
    except ValueError as e:
        raise ValueError(f"bad steps spec {steps!r}, expected 'A@B'") from e
    if not (1 <= a <= b):
        raise ValueError(f"need 1 <= A <= B in {steps!r}")
    return a, b


def evaluate(ckpt_path: str | Path, data_dir: str | Path, steps: str | None = None,
             out_csv: str | Path | None = None, seed: int | None = None,
             max_scenes: int | None = None,
             model_fn=None) -> tuple[list[tuple[str, MetricReport]], MetricReport]:
    """Sample a flow per scene with the configured sampler and report metrics.

    The point estimate is a single fixed-seed sample by default; setting
    train.eval_hypotheses > 1 in the config averages that many hypotheses.
    `model_fn` substitutes the denoiser (the oracle hook used in tests).
    """
    cfg, params = load_trained(ckpt_path)
    tcfg = cfg.train
    n_steps, t_train = parse_steps(steps) if steps else (cfg.diffusion.t_sample, cfg.diffusion.t_train)
    if t_train != cfg.diffusion.t_train:
        raise ValueError(
            f"checkpoint was trained with T={cfg.diffusion.t_train}, requested {t_train}"
        )
    if cfg.diffusion.sampler == "ddpm" and n_steps != t_train:
        raise ValueError("the ddpm sampler runs the full chain; use A == B or sampler=ddim")
    sched = make_schedule(cfg.diffusion.t_train, cfg.diffusion.schedule)
    model = make_model(params, cfg) if model_fn is None else model_fn
    base_seed = tcfg.seed if seed is None else seed

    scene_paths = read_manifest(data_dir)
    if max_scenes is None and tcfg.eval_scenes:
        max_scenes = tcfg.eval_scenes
    if max_scenes is not None:
        scene_paths = scene_paths[:max_scenes]

    rows: list[tuple[str, MetricReport]] = []
    for si, path in enumerate(scene_paths):
        pair = load_scene(path)
        sub_rng = RngStream(base_seed).derive(1_000_000 + si)
        pair = subsample_pair(pair, min(tcfg.points_eval, pair.n1, pair.n2), sub_rng, tcfg.eval_sampling)
        flow = _point_estimate(pair, model, sched, cfg, n_steps,
                               RngStream(base_seed).derive(2_000_000 + si))
        rows.append((path.name, metrics(flow, pair)))
    aggregate = macro_average([r for _, r in rows])

    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        reports.write_metrics_csv(out_csv, rows, aggregate)
        reports.fig_eval(out_csv.with_suffix(".png"), [r[0] for r in rows],
                         [r[1].epe_all for r in rows], aggregate)
    return rows, aggregate


def _point_estimate(pair: ScenePair, model, sched, cfg: Config, n_steps: int, rng: RngStream):
    if cfg.train.eval_hypotheses > 1:
        hyp = sample_hypotheses(
            pair, model, sched, cfg.train.eval_hypotheses, root_seed=rng.seed,
            flow_scale=cfg.diffusion.flow_scale,
            sampler=cfg.diffusion.sampler, n_steps=n_steps,
            ddpm_noise=cfg.diffusion.ddpm_noise,
        )
        return hyp.mean
    if cfg.diffusion.sampler == "ddpm":
        return sample_ddpm(pair, model, sched, rng, cfg.diffusion.flow_scale,
                           cfg.diffusion.ddpm_noise)
    return sample_ddim(pair, model, sched, rng, n_steps, cfg.diffusion.flow_scale)
