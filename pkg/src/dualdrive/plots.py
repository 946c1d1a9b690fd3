"""Per-run figures rendered next to the report files.

Uses the Agg backend so runs work headless; every figure is derived purely
from the report, so re-rendering a saved report reproduces the same images.
"""

from __future__ import annotations

import os
from typing import List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from dualdrive.simworld import RunReport  # noqa: E402

_LIGHT_COLORS = {"Red": "tab:red", "Yellow": "tab:orange", "Green": "tab:green"}


def plot_trajectory(report: RunReport, path: str) -> None:
    """Top-down overview: route, ego path, agent paths, map elements."""
    fig, ax = plt.subplots(figsize=(9, 5))
    route = report.static.get("route", [])
    if route:
        ax.plot([p[0] for p in route], [p[1] for p in route],
                "--", color="gray", linewidth=1, label="route")
    for el in report.static.get("map_elements", []):
        pts = el["points"]
        if el["kind"] == "TrafficLight":
            color = _LIGHT_COLORS.get(el.get("state", ""), "black")
            ax.plot([p[0] for p in pts], [p[1] for p in pts], color=color, linewidth=2)
        elif el["kind"] == "StopLine":
            ax.plot([p[0] for p in pts], [p[1] for p in pts], color="black", linewidth=2)
        elif el["kind"] == "SpeedLimitSign":
            ax.plot(pts[0][0], pts[0][1], "s", color="tab:blue", markersize=5)

    xs = [row.x for row in report.ticks]
    ys = [row.y for row in report.ticks]
    if xs:
        ax.plot(xs, ys, color="tab:blue", linewidth=2, label="ego")
        ax.plot(xs[0], ys[0], "o", color="tab:blue")
        ax.plot(xs[-1], ys[-1], "x", color="tab:blue", markersize=9)

    agent_tracks: dict = {}
    for row in report.ticks:
        for a in row.agents:
            agent_tracks.setdefault(a["id"], []).append((a["x"], a["y"]))
    for aid, track in sorted(agent_tracks.items()):
        ax.plot([p[0] for p in track], [p[1] for p in track],
                linewidth=1.2, alpha=0.8, label=aid)

    for ev in report.events:
        if ev.kind == "collision":
            row = report.ticks[-1]
            ax.plot(row.x, row.y, "X", color="red", markersize=12, label="collision")

    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(f"{report.scenario} [{report.mode}]")
    ax.axis("equal")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_timeline(report: RunReport, path: str) -> None:
    """Reward/uncertainty traces with slow-system engagements shaded."""
    ticks = report.ticks
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    t = [row.t for row in ticks]
    plan_rows = [row for row in ticks if row.reason != ""]

    ax1.plot([r.t for r in plan_rows], [r.reward for r in plan_rows],
             color="tab:blue", label="best reward")
    ax1.plot([r.t for r in plan_rows], [r.mu for r in plan_rows],
             color="tab:cyan", linestyle="--", label="reward EMA")
    tau_r = report.config.get("tau_r")
    if isinstance(tau_r, (int, float)):
        ax1.axhline(tau_r, color="gray", linestyle=":", linewidth=1, label="reward threshold")
    _shade_slow(ax1, plan_rows)
    ax1.set_ylabel("reward")
    ax1.legend(loc="lower left", fontsize=8)

    ax2.plot([r.t for r in plan_rows], [r.b for r in plan_rows],
             color="tab:purple", label="Laplace scale b")
    tau_b = report.config.get("tau_b")
    if isinstance(tau_b, (int, float)) and tau_b != float("inf"):
        ax2.axhline(tau_b, color="gray", linestyle=":", linewidth=1, label="scale threshold")
    ax2b = ax2.twinx()
    ax2b.plot(t, [row.speed for row in ticks], color="tab:green", alpha=0.6, label="speed")
    ax2b.set_ylabel("speed (m/s)")
    _shade_slow(ax2, plan_rows)
    ax2.set_ylabel("b")
    ax2.set_xlabel("time (s)")
    lines1, labels1 = ax2.get_legend_handles_labels()
    lines2, labels2 = ax2b.get_legend_handles_labels()
    ax2.legend(lines1 + lines2, labels1 + labels2, loc="upper left", fontsize=8)

    for ev in report.events:
        for ax in (ax1, ax2):
            ax.axvline(ev.t, color="red" if ev.kind == "collision" else "orange",
                       linestyle="--", linewidth=1)

    fig.suptitle(f"{report.scenario} [{report.mode}] gate timeline", fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _shade_slow(ax, plan_rows) -> None:
    for row in plan_rows:
        if row.slow_invoked:
            ax.axvspan(row.t, row.t + 0.5, color="tab:orange", alpha=0.15, linewidth=0)


def render_report_figures(report: RunReport, out_dir: str) -> List[str]:
    """Write the standard figure set for one run; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, fn in (("trajectory.png", plot_trajectory), ("timeline.png", plot_timeline)):
        path = os.path.join(out_dir, name)
        fn(report, path)
        paths.append(path)
    return paths
