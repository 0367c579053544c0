"""Report rendering: delimited files plus matplotlib figures.

Every CLI report path writes machine-readable CSV/JSON next to a rendered
PNG of the same data: per-layer cost breakdowns, pruning-history curves,
and precision/recall curves. Rendering is headless (Agg) and byte-stable
across runs for identical inputs.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .cost import CostReport  # noqa: E402
from .evaluation import EvalResult  # noqa: E402

_PNG_META = {"Software": "slimdet"}  # keep PNG bytes run-independent


def write_cost_csv(path, rep: CostReport, units: str = "macs") -> None:
    scale = 2 if units == "flops2x" else 1
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer_id", "macs" if scale == 1 else "flops", "params"])
        for c in rep.per_layer:
            w.writerow([c.layer_id, c.macs * scale, c.params])
        w.writerow(["total", rep.total_macs * scale, rep.total_params])


def render_cost_figure(path, rep: CostReport, title: str = "per-layer cost",
                       top_n: int = 25) -> None:
    layers = [c for c in rep.per_layer if c.macs > 0]
    layers.sort(key=lambda c: c.macs, reverse=True)
    layers = layers[:top_n][::-1]
    fig, ax = plt.subplots(figsize=(8, max(3, 0.3 * len(layers) + 1.2)))
    ax.barh([c.layer_id for c in layers], [c.macs / 1e6 for c in layers], color="#4878a8")
    ax.set_xlabel("MMACs")
    ax.set_title(f"{title}  (total {rep.total_macs / 1e9:.3f} GMACs, "
                 f"{rep.total_params / 1e6:.3f} MParams)")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["round", "macs", "params"])
        for h in history:
            w.writerow([h["round"], h["macs"], h["params"]])


def render_history_figure(path, history: list[dict], title: str = "pruning history") -> None:
    rounds = [h["round"] for h in history]
    macs = [h["macs"] / 1e9 for h in history]
    params = [h["params"] / 1e6 for h in history]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(rounds, macs, marker="o", color="#4878a8", label="GMACs")
    ax.set_xlabel("round")
    ax.set_ylabel("GMACs", color="#4878a8")
    ax2 = ax.twinx()
    ax2.plot(rounds, params, marker="s", color="#b05a5a", label="MParams")
    ax2.set_ylabel("MParams", color="#b05a5a")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def write_pr_csv(path, result: EvalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["recall", "precision"])
        for r, p in zip(result.recall, result.precision):
            w.writerow([f"{r:.6f}", f"{p:.6f}"])


def render_pr_figure(path, result: EvalResult, title: str = "precision/recall") -> None:
    fig, ax = plt.subplots(figsize=(5.6, 5))
    if result.recall:
        ax.step([0.0] + list(result.recall), [1.0] + list(result.precision),
                where="post", color="#4878a8")
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"{title}  (AP {result.ap:.4f})")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
