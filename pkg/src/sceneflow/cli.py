"""Command-line interface: data generation, training, evaluation, sampling,
uncertainty reports and the step-count ablation."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import reports
from .config import load_config
from .diffusion import make_schedule
from .harness import evaluate, load_trained, make_model, parse_steps, subsample_pair, train
from .numerics import RngStream
from .objective import MetricReport, endpoint_errors, metrics
from .pointcloud import generate_scene, load_scene, read_manifest, save_scene, write_manifest
from .uncertainty import (
    BinStat,
    PRPoint,
    default_epe_bin_edges,
    default_pr_thresholds,
    sample_hypotheses,
)


def _cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = RngStream(args.seed)
    names = []
    for i in range(args.scenes):
        pair = generate_scene(cfg.scene, root.derive(i))
        name = f"scene_{i:05d}.dsf1"
        save_scene(pair, out / name)
        names.append(name)
    write_manifest(out, names)
    print(f"wrote {len(names)} scenes to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    final = train(cfg, args.data, args.out, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def _cmd_eval(args) -> int:
    rows, aggregate = evaluate(args.ckpt, args.data, steps=args.steps,
                               out_csv=args.out, seed=args.seed,
                               max_scenes=args.scenes)
    print(f"evaluated {len(rows)} scenes -> {args.out}")
    print(f"macro avg: {aggregate.csv_row()}")
    return 0


def _cmd_sample(args) -> int:
    cfg, params = load_trained(args.ckpt)
    pair = load_scene(args.scene)
    if args.points:
        pair = subsample_pair(pair, args.points, RngStream(args.seed).derive(7),
                              cfg.train.eval_sampling)
    sched = make_schedule(cfg.diffusion.t_train, cfg.diffusion.schedule)
    model = make_model(params, cfg)
    hyp = sample_hypotheses(
        pair, model, sched, args.hypotheses, root_seed=args.seed,
        flow_scale=cfg.diffusion.flow_scale, sampler=cfg.diffusion.sampler,
        n_steps=cfg.diffusion.t_sample, ddpm_noise=cfg.diffusion.ddpm_noise,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(hyp.k):
        reports.write_flow_csv(out / f"hypothesis_{k:02d}.csv", hyp.flows[k])
    reports.write_flow_csv(out / "mean.csv", hyp.mean)
    reports.write_scalar_csv(out / "std.csv", "std", hyp.std)
    report = metrics(hyp.mean, pair)
    reports.write_metrics_csv(out / "metrics.csv", [(Path(args.scene).name, report)])
    print(f"wrote {hyp.k} hypotheses + mean/std to {out}")
    return 0


def _cmd_uncertainty(args) -> int:
    cfg, params = load_trained(args.ckpt)
    sched = make_schedule(cfg.diffusion.t_train, cfg.diffusion.schedule)
    model = make_model(params, cfg)
    paths = read_manifest(args.data)
    if args.scenes:
        paths = paths[: args.scenes]
    all_std = []
    all_err = []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for si, path in enumerate(paths):
        pair = load_scene(path)
        pair = subsample_pair(pair, min(cfg.train.points_eval, pair.n1, pair.n2),
                              RngStream(args.seed).derive(1_000_000 + si),
                              cfg.train.eval_sampling)
        hyp = sample_hypotheses(
            pair, model, sched, args.k,
            root_seed=RngStream(args.seed).derive(3_000_000 + si).seed,
            flow_scale=cfg.diffusion.flow_scale, sampler="ddpm",
            ddpm_noise=cfg.diffusion.ddpm_noise,
        )
        all_std.append(hyp.std)
        all_err.append(endpoint_errors(hyp.mean, pair.gt_flow))

    std = np.concatenate(all_std)
    err = np.concatenate(all_err)
    edges = np.asarray(default_epe_bin_edges())
    stats = _pooled_bins(err, std, edges)
    pr = _pooled_pr(err, std, default_pr_thresholds(cfg.diffusion.flow_scale))
    reports.write_bins_csv(out / "bins.csv", stats)
    reports.write_pr_csv(out / "pr.csv", pr)
    reports.fig_bins(out / "bins.png", stats)
    reports.fig_pr(out / "pr.png", pr)
    print(f"wrote bins.csv/pr.csv (+figures) over {len(paths)} scenes to {out}")
    return 0


def _pooled_bins(err: np.ndarray, std: np.ndarray, edges: np.ndarray):
    stats = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (err >= lo) & (err < hi)
        cnt = int(sel.sum())
        if cnt == 0:
            stats.append(BinStat(float(lo), float(hi), None, None, 0))
        else:
            u = std[sel].astype(np.float64)
            stats.append(BinStat(float(lo), float(hi), float(u.mean()), float(u.std()), cnt))
    return stats


def _pooled_pr(err: np.ndarray, std: np.ndarray, thresholds, epe_outlier: float = 0.30):
    outlier = err > epe_outlier
    n_out = int(outlier.sum())
    pts = []
    for u in thresholds:
        retrieved = std > u
        n_ret = int(retrieved.sum())
        hits = int((retrieved & outlier).sum())
        pts.append(PRPoint(float(u),
                           (hits / n_out) if n_out else None,
                           (hits / n_ret) if n_ret else None))
    return pts


def _cmd_ablate_steps(args) -> int:
    grid = [g.strip() for g in args.grid.split(",") if g.strip()]
    ckpt_dir = Path(args.ckpt_dir)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["steps," + MetricReport.CSV_HEADER]
    labels, epes = [], []
    for spec in grid:
        a, b = parse_steps(spec)
        ckpt = ckpt_dir / f"ckpt_t{b}.dsfc"
        if not ckpt.exists():
            raise FileNotFoundError(
                f"no checkpoint for training steps {b}: expected {ckpt}"
            )
        _, aggregate = evaluate(ckpt, args.data, steps=spec, seed=args.seed,
                                max_scenes=args.scenes)
        lines.append(f"{spec},{aggregate.csv_row()}")
        labels.append(spec)
        epes.append(aggregate.epe_all)
        print(f"{spec}: epe_all={aggregate.epe_all:.4f}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    reports.fig_ablation(out.with_suffix(".png"), labels, epes)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sceneflow",
                                description="Diffusion scene flow estimation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--steps", default=None, help="A@B sampling/training steps")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--scenes", type=int, default=None)
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("sample", help="sample flow hypotheses for one scene")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--hypotheses", type=int, default=20)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=None)
    s.set_defaults(fn=_cmd_sample)

    u = sub.add_parser("uncertainty", help="uncertainty bins and PR curve")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--data", required=True)
    u.add_argument("--k", type=int, default=20)
    u.add_argument("--out", required=True)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--scenes", type=int, default=None)
    u.set_defaults(fn=_cmd_uncertainty)

    a = sub.add_parser("ablate-steps", help="evaluate an A@B step grid")
    a.add_argument("--ckpt-dir", required=True)
    a.add_argument("--grid", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--scenes", type=int, default=None)
    a.set_defaults(fn=_cmd_ablate_steps)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
