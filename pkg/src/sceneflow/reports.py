"""CSV emission and the matplotlib figures rendered alongside each report."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .objective import MetricReport
from .uncertainty import BinStat, PRPoint


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_metrics_csv(path: str | Path, rows: list[tuple[str, MetricReport]],
                      aggregate: MetricReport | None = None) -> None:
    lines = ["scene," + MetricReport.CSV_HEADER]
    for label, report in rows:
        lines.append(f"{label},{report.csv_row()}")
    if aggregate is not None:
        lines.append(f"macro_avg,{aggregate.csv_row()}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_bins_csv(path: str | Path, stats: list[BinStat]) -> None:
    lines = ["epe_lo,epe_hi,mean_unc,std_unc,count"]
    for s in stats:
        lines.append(",".join([_fmt(s.epe_lo), _fmt(s.epe_hi), _fmt(s.mean_unc),
                               _fmt(s.std_unc), str(s.count)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pr_csv(path: str | Path, points: list[PRPoint]) -> None:
    lines = ["threshold,recall,precision"]
    for p in points:
        lines.append(",".join([_fmt(p.threshold), _fmt(p.recall), _fmt(p.precision)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_train_log(path: str | Path, rows: list[tuple[int, float, float]]) -> None:
    lines = ["iteration,loss,lr"]
    for it, loss, lr in rows:
        lines.append(f"{it},{loss:.6f},{lr:.8f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_flow_csv(path: str | Path, flow: np.ndarray) -> None:
    lines = ["dx,dy,dz"]
    for row in np.asarray(flow, dtype=np.float64):
        lines.append(",".join(f"{v:.6f}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_scalar_csv(path: str | Path, header: str, values: np.ndarray) -> None:
    lines = [header] + [f"{float(v):.6f}" for v in np.asarray(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- figures -------------------------------------------------------------------


def fig_train_loss(path: str | Path, rows: list[tuple[int, float, float]]) -> None:
    if not rows:
        return
    its = [r[0] for r in rows]
    losses = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(its, losses, lw=0.8, alpha=0.5, label="loss")
    if len(losses) >= 20:
        win = max(1, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(win) / win, mode="valid")
        ax.plot(its[win - 1:], smooth, lw=1.6, label=f"smoothed ({win})")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_eval(path: str | Path, labels: list[str], epes: list[float],
             aggregate: MetricReport | None = None) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(epes, bins=min(30, max(5, len(epes) // 3 + 1)), color="tab:blue", alpha=0.8)
    ax.set_xlabel("per-scene EPE3D (m)")
    ax.set_ylabel("scenes")
    if aggregate is not None:
        ax.axvline(aggregate.epe_all, color="tab:red", lw=1.5,
                   label=f"macro avg {aggregate.epe_all:.4f} m")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_bins(path: str | Path, stats: list[BinStat]) -> None:
    populated = [s for s in stats if not s.empty]
    fig, ax = plt.subplots(figsize=(8, 4))
    if populated:
        xs = np.arange(len(populated))
        ax.errorbar(xs, [s.mean_unc for s in populated],
                    yerr=[s.std_unc for s in populated],
                    fmt="o", capsize=3, color="tab:blue")
        labels = [
            f"[{s.epe_lo:.2f}, {'inf' if np.isinf(s.epe_hi) else f'{s.epe_hi:.2f}'})"
            for s in populated
        ]
        ax.set_xticks(xs, labels, rotation=45, ha="right", fontsize=7)
    ax.set_xlabel("EPE interval (m)")
    ax.set_ylabel("average uncertainty")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_pr(path: str | Path, points: list[PRPoint]) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    ts = [p.threshold for p in points]
    rec = [p.recall if p.recall is not None else np.nan for p in points]
    pre = [p.precision if p.precision is not None else np.nan for p in points]
    ax.plot(ts, rec, "x-", color="tab:red", label="recall")
    ax.plot(ts, pre, "o-", color="tab:blue", label="precision")
    ax.set_xlabel("uncertainty threshold")
    ax.set_ylabel("fraction")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_ablation(path: str | Path, labels: list[str], epes: list[float]) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(labels))
    ax.bar(xs, epes, color="tab:blue", width=0.6)
    ax.set_xticks(xs, labels)
    ax.set_xlabel("sampling steps @ training steps")
    ax.set_ylabel("EPE3D (m)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
