"""Report figures. Everything renders off-screen to PNG next to the JSON/CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def adaptation_trajectory(report: dict, path):
    """Per-step entropy and neighbour penalty from an adaptation report."""
    hist = report["history"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot([h["entropy"] for h in hist], lw=1, label="mean entropy")
        if any(h["tau_neighbor"] for h in hist):
            ax2 = ax.twinx()
            ax2.plot([h["tau_neighbor"] for h in hist], lw=1, color="tab:orange", label="neighbour penalty")
            ax2.set_ylabel("neighbour penalty")
            ax2.legend(loc="upper center")
        ax.set_xlabel("update")
        ax.set_ylabel("entropy (nats)")
        ax.legend(loc="upper right")
        return _save(fig, path)


def accuracy_comparison(summary: dict, path):
    """Source, target-before and target-after accuracy bars."""
    keys = [("source_accuracy", "source"), ("target_pre_accuracy", "target\nbefore"), ("target_post_accuracy", "target\nafter")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3))
        vals = [summary[k] for k, _ in keys]
        ax.bar(range(3), vals, color=["0.55", "tab:red", "tab:blue"])
        for i, v in enumerate(vals):
            ax.text(i, v + 0.01, f"{100 * v:.1f}", ha="center", va="bottom")
        ax.set_xticks(range(3), [lbl for _, lbl in keys])
        ax.set_ylim(0, 1.08)
        ax.set_ylabel("accuracy")
        return _save(fig, path)


def ablation_bars(rows: list, path):
    """Horizontal bars of mean accuracy per toggle combination, with seed spread."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 0.4 * len(rows) + 1))
        y = range(len(rows))
        ax.barh(y, [r["mean_accuracy"] for r in rows], xerr=[r["std_accuracy"] for r in rows], color="tab:blue", alpha=0.8)
        ax.set_yticks(list(y), [r["label"] for r in rows])
        ax.invert_yaxis()
        ax.set_xlim(0, 1)
        ax.set_xlabel("target accuracy (mean over seeds)")
        return _save(fig, path)


def spectrum(wavelengths_nm, reflectance, path, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(wavelengths_nm, reflectance, lw=1.2)
        ax.set_xlabel("wavelength (nm)")
        ax.set_ylabel("reflectance")
        if title:
            ax.set_title(title)
        return _save(fig, path)
