"""Static matplotlib figures rendered next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["render_convergence", "render_profile"]


def render_convergence(report, path, x_key=None):
    """Log-log error curves against the refined parameter."""
    rows = report.rows
    if x_key is None:
        x_key = "dt" if report.study in ("time", "fixed_h") else "h"
    x = [row[x_key] for row in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.loglog(x, [r["err_q"] for r in rows], "o-", label="velocity error")
    ax.loglog(x, [r["err_lambda"] for r in rows], "s--", label="surface error")
    ax.set_xlabel(x_key)
    ax.set_ylabel("L2 error")
    ax.set_title(f"{report.study} study, p={report.p}")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_profile(x1, zeta, t, path):
    """Free-surface elevation at one time level."""
    fig, ax = plt.subplots(figsize=(6.0, 2.8))
    ax.plot(x1, zeta, "-", lw=1.0)
    ax.set_xlabel("x1")
    ax.set_ylabel("wave height")
    ax.set_title(f"free surface at t = {t:g}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
