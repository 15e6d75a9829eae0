"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep PNG bytes stable across reruns
_SAVEKW = {"dpi": 110, "metadata": {"Software": None}}


def save_scaling_figure(rows, path) -> Path:
    """One line per stage of mean accuracy vs data size; perplexity inset."""
    path = Path(path)
    stages = sorted({r[0] for r in rows})
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for stage in stages:
        pts = sorted((r[1], r[3]) for r in rows
                     if r[0] == stage and r[2] == "mean_accuracy")
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=stage)
        ppl = sorted((r[1], r[3]) for r in rows
                     if r[0] == stage and r[2] == "text_perplexity")
        ax2.plot([p[0] for p in ppl], [p[1] for p in ppl], marker="s", label=stage)
    ax.set_xlabel("pre-training samples")
    ax.set_ylabel("mean task accuracy")
    ax.legend(fontsize=8)
    ax2.set_xlabel("pre-training samples")
    ax2.set_ylabel("text perplexity")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)
    return path


def save_ablation_figure(rows, path, tasks) -> Path:
    """Grouped bars: per-task accuracy for each arm, plus ppl degradation."""
    path = Path(path)
    arms = [r.arm for r in rows]
    x = np.arange(len(tasks))
    width = 0.8 / max(len(arms), 1)
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.6),
                                  gridspec_kw={"width_ratios": [3, 1]})
    for i, r in enumerate(rows):
        vals = [r.report.accuracies[t] for t in tasks]
        ax.bar(x + i * width, vals, width, label=r.arm)
    ax.set_xticks(x + width * (len(arms) - 1) / 2)
    ax.set_xticklabels(tasks)
    ax.set_ylabel("exact match / token accuracy")
    ax.legend(fontsize=8)
    ax2.bar(np.arange(len(arms)), [r.ppl_degradation for r in rows],
            color="tab:red")
    ax2.set_xticks(np.arange(len(arms)))
    ax2.set_xticklabels(arms, rotation=45, ha="right", fontsize=7)
    ax2.set_ylabel("text ppl degradation")
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)
    return path


def save_latency_figure(reports, path) -> Path:
    """TTFT bars per token budget, monolithic vs modular."""
    path = Path(path)
    budgets = sorted({(r.image_tokens, r.text_tokens) for r in reports})
    archs = ("monolithic", "modular")
    x = np.arange(len(budgets))
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for i, arch in enumerate(archs):
        ttfts = []
        speeds = []
        for b in budgets:
            match = [r for r in reports
                     if (r.image_tokens, r.text_tokens) == b and r.arch == arch]
            ttfts.append(match[0].ttft_s if match else np.nan)
            speeds.append(match[0].tokens_per_s if match else np.nan)
        ax.bar(x + i * 0.4, ttfts, 0.4, label=arch)
        ax2.bar(x + i * 0.4, speeds, 0.4, label=arch)
    labels = [f"{b[0]}+{b[1]}" for b in budgets]
    for a, ylab in ((ax, "TTFT (s)"), (ax2, "decode tokens/s")):
        a.set_xticks(x + 0.2)
        a.set_xticklabels(labels)
        a.set_xlabel("image+text tokens")
        a.set_ylabel(ylab)
        a.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)
    return path


def save_attention_heatmaps(mean_maps: np.ndarray, segments: dict, out_dir) -> list:
    """One log-scale heatmap per layer with segment boundary lines."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    bounds = [segments["system"], segments["system"] + segments["visual"]]
    for li, m in enumerate(mean_maps):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        shown = np.log10(np.maximum(m, 1e-8))
        im = ax.imshow(shown, cmap="viridis", interpolation="nearest")
        for b in bounds:
            if 0 < b < m.shape[0]:
                ax.axhline(b - 0.5, color="w", lw=0.6)
                ax.axvline(b - 0.5, color="w", lw=0.6)
        ax.set_title(f"layer {li} (log10 attention)", fontsize=9)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        p = out_dir / f"attn_layer{li}.png"
        fig.savefig(p, **_SAVEKW)
        plt.close(fig)
        paths.append(p)
    return paths


def save_loss_figure(losses, path, title="training loss") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if losses:
        steps, vals = zip(*losses)
        ax.plot(steps, vals, lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("batch loss")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)
    return path
