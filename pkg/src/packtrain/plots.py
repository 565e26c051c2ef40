"""Figure rendering for report rows.  Files land next to the delimited output."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, outdir, name):
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def render_profile_figures(rows, outdir):
    """IMPV vs member count, one line per profile (sweep rows only)."""
    sweeps = [r for r in rows if r["case"] == "sweep" and not r["oom"]]
    paths = []
    by_profile: dict = {}
    for r in sweeps:
        by_profile.setdefault(r["profile"], []).append(r)
    if by_profile:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name in sorted(by_profile):
            pts = sorted({(r["members"], r["impv"]) for r in by_profile[name]})
            counts = sorted({c for c, _ in pts})
            best = [max(i for c, i in pts if c == n) for n in counts]
            ax.plot(counts, best, marker="o", label=name)
        ax.set_xlabel("packed members")
        ax.set_ylabel("improvement over sequential")
        ax.axhline(0.0, color="grey", lw=0.8)
        ax.legend(fontsize=8)
        paths.append(_save(fig, outdir, "impv_vs_members.png"))
    return paths


def render_simulate_figures(rows, outdir):
    ok = [r for r in rows if not r["oom"]]
    paths = []
    if ok:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([r["case"] for r in ok], [r["impv"] for r in ok])
        ax.set_ylabel("improvement over sequential")
        ax.axhline(0.0, color="grey", lw=0.8)
        plt.setp(ax.get_xticklabels(), rotation=45, ha="right", fontsize=7)
        paths.append(_save(fig, outdir, "plan_impv.png"))
    return paths


def render_tune_figures(rows, outdir):
    paths = []
    if rows:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([r["strategy"] for r in rows],
               [r["total_time_ms"] / 1000.0 for r in rows])
        ax.set_ylabel("total time (s)")
        paths.append(_save(fig, outdir, "strategy_times.png"))
    return paths
