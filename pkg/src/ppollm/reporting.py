"""Per-episode CSV and matplotlib figures for a finished run directory."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .mdp import TEMPLATE_NAMES  # noqa: E402

CSV_FIELDS = (
    "episode", "template", "admitted", "line_pct", "branch_pct",
    "reward", "line_gain", "branch_gain", "uniq_ratio", "untested_ratio",
    "entropy", "clip_fraction",
)


def load_episodes(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "episodes.jsonl"
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def episode_rows(episodes: list[dict]) -> list[dict]:
    rows = []
    for e in episodes:
        r, c, u = e["reward"], e["coverage"], e["update"]
        rows.append({
            "episode": e["episode"],
            "template": e["template"],
            "admitted": e["admitted"],
            "line_pct": c["line_pct"],
            "branch_pct": c["branch_pct"],
            "reward": r["total"],
            "line_gain": r["line_gain"],
            "branch_gain": r["branch_gain"],
            "uniq_ratio": r["uniq_ratio"],
            "untested_ratio": r["untested_ratio"],
            "entropy": u["entropy"],
            "clip_fraction": u["clip_fraction"],
        })
    return rows


def write_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _style(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(alpha=0.3)


def plot_coverage(rows: list[dict], path: str | Path) -> None:
    xs = [r["episode"] + 1 for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(xs, [r["line_pct"] for r in rows], marker="o", ms=3, label="line")
    ax.plot(xs, [r["branch_pct"] for r in rows], marker="s", ms=3, label="branch")
    ax.set_xlabel("episode")
    ax.set_ylabel("cumulative coverage (%)")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_templates(rows: list[dict], path: str | Path) -> None:
    counts = [sum(r["template"] == name for r in rows) for name in TEMPLATE_NAMES]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(TEMPLATE_NAMES, counts, color="0.4")
    ax.set_ylabel("times selected")
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_rewards(rows: list[dict], path: str | Path) -> None:
    xs = [r["episode"] + 1 for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(xs, [r["reward"] for r in rows], color="0.55")
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xlabel("episode")
    ax.set_ylabel("reward")
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_run(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Write episodes.csv and three PNG figures; returns the paths written."""
    out = Path(out_dir) if out_dir is not None else Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = episode_rows(load_episodes(run_dir))
    written = [out / "episodes.csv", out / "coverage.png", out / "templates.png", out / "rewards.png"]
    write_csv(rows, written[0])
    plot_coverage(rows, written[1])
    plot_templates(rows, written[2])
    plot_rewards(rows, written[3])
    return written
