"""Figure rendering for evaluation reports and grid inference.

Every figure is written next to its delimited export; the delimited files
remain the normative interface, the PNGs are for human review.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import DensityTrend, MetricTable, SpatialErrorGrid
from .grids import GridField

DPI = 150


def plot_metric_table(table: MetricTable, path) -> None:
    leads = [r.lead for r in table.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(leads, [r.model_rmse for r in table.rows], "o-", label="corrected")
    ax1.plot(leads, [r.nwp_rmse for r in table.rows], "s-", label="forecast")
    era = [r.era5_rmse for r in table.rows]
    if any(not math.isnan(e) for e in era):
        ax1.plot(leads, era, "^--", color="grey", label="reanalysis")
    ax1.set_xlabel("lead time (h)")
    ax1.set_ylabel("RMSE (m/s)")
    ax1.legend()
    ax1.grid(alpha=0.3)

    ax2.bar([str(lead) for lead in leads], [r.improvement_pct for r in table.rows])
    ax2.set_xlabel("lead time (h)")
    ax2.set_ylabel("improvement over forecast (%)")
    ax2.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_platform_stratification(
    strat: dict[tuple[str, int], tuple[float, int]], path
) -> None:
    platforms = sorted({k[0] for k in strat})
    leads = sorted({k[1] for k in strat})
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(len(leads), 1)
    xs = np.arange(len(platforms))
    for li, lead in enumerate(leads):
        vals = [strat.get((p, lead), (math.nan, 0))[0] for p in platforms]
        ax.bar(xs + li * width, vals, width, label=f"{lead} h")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(platforms, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("error diff vs forecast (m/s)")
    ax.legend(title="lead", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def _grid_extent(grid: SpatialErrorGrid):
    return (
        grid.lon_min,
        grid.lon_min + grid.n_lon * grid.cell_deg,
        grid.lat_min,
        grid.lat_min + grid.n_lat * grid.cell_deg,
    )


def plot_spatial_error(grid: SpatialErrorGrid, path, title: str = "") -> None:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    extent = _grid_extent(grid)
    model = grid.model_mae()
    nwp = grid.nwp_mae()
    vmax = np.nanmax([np.nanmax(model, initial=0.0), np.nanmax(nwp, initial=0.0)]) or 1.0
    for ax, data, label in ((axes[0], model, "corrected MAE"), (axes[1], nwp, "forecast MAE")):
        im = ax.imshow(data, origin="lower", extent=extent, vmin=0, vmax=vmax, cmap="viridis")
        ax.set_title(label, fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
    diff = grid.difference()
    lim = np.nanmax(np.abs(diff), initial=0.1)
    im = axes[2].imshow(
        diff, origin="lower", extent=extent, vmin=-lim, vmax=lim, cmap="RdBu_r"
    )
    axes[2].set_title("corrected - forecast", fontsize=9)
    fig.colorbar(im, ax=axes[2], shrink=0.8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_density_scatter(
    rows: np.ndarray, trend: DensityTrend | None, path, title: str = ""
) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if rows.size:
        ax.scatter(rows[:, 0], rows[:, 1], s=12, alpha=0.6)
        if trend is not None:
            xs = np.linspace(rows[:, 0].min(), rows[:, 0].max(), 50)
            ax.plot(xs, trend.intercept + trend.slope * xs, color="brown",
                    label=f"slope {trend.slope:.3g}")
            ax.legend(fontsize=8)
    ax.axhline(0.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("observation fraction per cell")
    ax.set_ylabel("error reduction (m/s)")
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_grid_inference(
    corrected: GridField, baseline: GridField, path, title: str = ""
) -> None:
    spec = corrected.spec
    shape = (spec.n_lat, spec.n_lon)
    speed_c = np.hypot(corrected.u, corrected.v).reshape(shape)
    speed_b = np.hypot(baseline.u, baseline.v).reshape(shape)
    diff = speed_c - speed_b
    extent = (spec.lon_min, spec.lon_max, spec.lat_min, spec.lat_max)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    vmax = max(speed_c.max(), speed_b.max()) or 1.0
    for ax, data, label in (
        (axes[0], speed_c, "corrected speed"),
        (axes[1], speed_b, "forecast speed"),
    ):
        im = ax.imshow(data, origin="lower", extent=extent, vmin=0, vmax=vmax, cmap="viridis")
        ax.set_title(label, fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
    lim = np.abs(diff).max() or 0.1
    im = axes[2].imshow(diff, origin="lower", extent=extent, vmin=-lim, vmax=lim,
                        cmap="BrBG_r")
    axes[2].set_title("corrected - forecast", fontsize=9)
    fig.colorbar(im, ax=axes[2], shrink=0.8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
