"""Figure rendering for run and study artifacts.

Figures are rendered straight to files (Agg backend) next to the delimited
output they illustrate; nothing here opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import ProbeRecord, StudyReport, sample_on_grid  # noqa: E402
from .space import FeSpace, PairField  # noqa: E402

__all__ = [
    "field_figure",
    "ledger_figure",
    "convergence_figure",
    "probe_figure",
    "projection_figure",
]


def field_figure(path, space: FeSpace, field: PairField, title: str = "",
                 res: int = 256) -> None:
    """Heatmap of the order parameter on the unit square."""
    vals = sample_on_grid(space, field, res=res)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(vals, origin="lower", extent=(0, 1, 0, 1),
                   cmap="RdBu_r", vmin=-1.2, vmax=1.2)
    ax.contour(np.linspace(0, 1, res), np.linspace(0, 1, res), vals,
               levels=[0.0], colors="k", linewidths=0.8)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="c")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ledger_figure(path, times, mass, energy) -> None:
    """Energy decay and mass drift over a run."""
    times = np.asarray(times)
    mass = np.asarray(mass)
    energy = np.asarray(energy)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.plot(times, energy, "-", color="tab:blue")
    ax1.set_xlabel("t")
    ax1.set_ylabel("free energy")
    ax1.set_title("energy ledger")
    ax2.plot(times, mass - mass[0], "-", color="tab:red")
    ax2.set_xlabel("t")
    ax2.set_ylabel("mass - mass(0)")
    ax2.set_title("mass drift")
    ax2.ticklabel_format(axis="y", style="sci", scilimits=(-2, 2))
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def convergence_figure(path, report: StudyReport) -> None:
    """Log-log self-convergence errors per interface parameter."""
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    kappas = sorted({r.kappa for r in report.levels})
    for kappa in kappas:
        rows = [r for r in report.levels if r.kappa == kappa]
        hs = [r.h for r in rows]
        errs = [r.error for r in rows]
        ax.loglog(hs, errs, "o-", label=f"kappa={kappa:.3g}")
    if report.levels:
        h0 = np.array([min(r.h for r in report.levels),
                       max(r.h for r in report.levels)])
        e0 = max(r.error for r in report.levels)
        ax.loglog(h0, e0 * (h0 / h0[-1]) ** 2, "k--", lw=0.8, label="slope 2")
    ax.set_xlabel("h")
    ax.set_ylabel("L2 error vs fine run")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def probe_figure(path, records: list[ProbeRecord]) -> None:
    """Max-ratio trends across mesh levels, one line per probe variant."""
    fig, ax = plt.subplots(figsize=(5.4, 3.8))
    keys = sorted({(r.family, r.variant) for r in records})
    for fam, var in keys:
        rows = sorted([r for r in records
                       if r.family == fam and r.variant == var],
                      key=lambda r: r.n)
        if len(rows) < 2:
            continue
        ax.semilogx([r.n for r in rows], [r.value for r in rows],
                    "o-", ms=3, lw=1, label=f"{fam}/{var}")
    ax.set_xlabel("mesh cells per side n")
    ax.set_ylabel("max ratio")
    ax.legend(fontsize=6, ncol=2)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def projection_figure(path, table: list[dict]) -> None:
    """Projection error decay for the L2 and elliptic projections."""
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    ops = sorted({row["op"] for row in table})
    for op in ops:
        rows = [r for r in table if r["op"] == op]
        ax.loglog([r["h"] for r in rows], [r["err_l2"] for r in rows],
                  "o-", label=f"{op}: L2")
        if rows and rows[0].get("err_1h_star") is not None:
            ax.loglog([r["h"] for r in rows],
                      [r["err_1h_star"] for r in rows],
                      "s--", label=f"{op}: 1,h,*")
    ax.set_xlabel("h")
    ax.set_ylabel("error")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
