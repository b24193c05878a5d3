"""Figure rendering for reports: every plot lands next to its TSV table.

All functions take data already assembled by the evaluation/training code
and write a PNG; nothing here computes results.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (7.0, 4.0),
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.25,
})

_SPEAKER_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_trajectories(trajectories: list, path: str | Path, max_utts: int = 3) -> Path:
    """Source vs converted f0/energy curves, one row per utterance."""
    chosen = trajectories[:max_utts]
    fig, axes = plt.subplots(len(chosen), 2, figsize=(9, 2.4 * len(chosen)), squeeze=False)
    for row, tr in enumerate(chosen):
        ax_f0, ax_en = axes[row]
        frames = range(len(tr["source_f0"]))
        ax_f0.plot(frames, tr["source_f0"], label="source", lw=1.4)
        ax_f0.plot(frames, tr["converted_f0"], label="converted", lw=1.0, alpha=0.8)
        ax_f0.set_ylabel("f0 [Hz]")
        ax_f0.set_title(tr["utt_id"], fontsize=8, loc="left")
        ax_en.plot(frames, tr["source_energy"], label="source", lw=1.4)
        ax_en.plot(frames, tr["converted_energy"], label="converted", lw=1.0, alpha=0.8)
        ax_en.set_ylabel("energy")
        if row == 0:
            ax_f0.legend(fontsize=7)
            ax_en.legend(fontsize=7)
    for ax in axes[-1]:
        ax.set_xlabel("frame")
    return _finish(fig, path)


def plot_sweep(sweep_rows: list, path: str | Path) -> Path:
    """Mean estimated f0/energy of converted output per control coefficient."""
    fig, (ax_en, ax_f0) = plt.subplots(1, 2, figsize=(9, 3.2))
    for channel, ax, field, ylabel in (
        ("energy", ax_en, "mean_energy", "mean converted energy"),
        ("f0", ax_f0, "mean_voiced_f0", "mean converted voiced f0 [Hz]"),
    ):
        rows = [r for r in sweep_rows if r.channel == channel]
        by_utt: dict = {}
        for r in rows:
            by_utt.setdefault(r.utt_id, []).append((r.coefficient, getattr(r, field)))
        for utt_id, pairs in by_utt.items():
            pairs.sort()
            ax.plot([c for c, _ in pairs], [v for _, v in pairs],
                    marker="o", ms=3, lw=0.8, alpha=0.5)
        coeffs = sorted({r.coefficient for r in rows})
        means = [
            float(sum(getattr(r, field) for r in rows if r.coefficient == c)
                  / max(sum(1 for r in rows if r.coefficient == c), 1))
            for c in coeffs
        ]
        ax.plot(coeffs, means, marker="s", color="black", lw=2.0, label="mean")
        ax.set_xlabel(f"{channel} coefficient")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
    return _finish(fig, path)


def plot_latents_2d(points, path: str | Path) -> Path:
    """Scatter of projected latents, one color per speaker."""
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    speakers = sorted({int(s) for s in points[:, 2]})
    for i, sid in enumerate(speakers):
        sel = points[:, 2].astype(int) == sid
        ax.scatter(points[sel, 0], points[sel, 1], s=18,
                   color=_SPEAKER_COLORS[i % len(_SPEAKER_COLORS)], label=f"speaker {sid}")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(fontsize=7)
    return _finish(fig, path)


def plot_training_curves(records: list, path: str | Path) -> Path:
    """Loss components against the step counter from a metric log."""
    fig, ax = plt.subplots()
    for key, label in (("recon", "reconstruction"), ("adv", "adversarial"),
                       ("kl", "KL"), ("ce", "classifier CE")):
        steps = [r["step"] for r in records if key in r]
        values = [r[key] for r in records if key in r]
        if steps:
            ax.plot(steps, values, lw=0.9, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    return _finish(fig, path)
