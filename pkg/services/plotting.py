"""SVG figures with reproducible bytes (fixed hash salt, no date metadata)"""
from pathlib import Path
from typing import Mapping, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from core.errors import PersistenceError

Curve = Tuple[Sequence[float], Sequence[float]]

plt.rcParams["svg.hashsalt"] = "aeriscast"
plt.rcParams["svg.fonttype"] = "path"


def save_svg(fig, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise PersistenceError(path, f"cannot write figure: {e}") from e
    finally:
        plt.close(fig)


def plot_lead_curves(panels: Mapping[str, Mapping[str, Curve]], ylabel: str, path: Union[str, Path]) -> None:
    """
    One panel per channel, one line per run; x axis is lead time in days.

    Args:
        panels: {channel: {run label: (lead_hours, values)}}
    """
    n = max(len(panels), 1)
    fig, axes = plt.subplots(1, n, figsize=(4.0 * n, 3.2), squeeze=False)
    for ax, (channel, curves) in zip(axes[0], panels.items()):
        for label, (leads, values) in curves.items():
            ax.plot(np.asarray(leads) / 24.0, values, marker="o", markersize=3, label=label)
        ax.set_title(channel)
        ax.set_xlabel("lead time (days)")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    save_svg(fig, path)


def plot_spectra(spectra: Mapping[str, Mapping[str, np.ndarray]], path: Union[str, Path]) -> None:
    """
    Top row: PS1D of truth and predictions (log-log). Bottom row: predicted / true ratio.

    Args:
        spectra: {channel: {"truth": [K], <run label>: [K], ...}}
    """
    n = max(len(spectra), 1)
    fig, axes = plt.subplots(2, n, figsize=(4.0 * n, 6.0), squeeze=False, sharex="col")
    for col, (channel, curves) in enumerate(spectra.items()):
        truth = curves["truth"]
        k = np.arange(len(truth))
        top, bottom = axes[0][col], axes[1][col]
        top.loglog(k[1:], truth[1:], color="black", label="truth")
        for label, spectrum in curves.items():
            if label == "truth":
                continue
            top.loglog(k[1:], spectrum[1:], label=label)
            with np.errstate(divide="ignore", invalid="ignore"):
                bottom.semilogx(k[1:], spectrum[1:] / truth[1:], label=label)
        bottom.axhline(1.0, color="black", linewidth=0.8)
        top.set_title(channel)
        top.set_ylabel("PS1D")
        bottom.set_ylabel("pred / truth")
        bottom.set_xlabel("zonal wavenumber")
        top.legend(fontsize=7)
        for ax in (top, bottom):
            ax.grid(alpha=0.3)
    fig.tight_layout()
    save_svg(fig, path)


def plot_ensemble_panel(panel: Mapping[str, Mapping[str, Curve]], path: Union[str, Path]) -> None:
    """
    3 x n grid: rows are RMSE with spread, spread-skill, CRPS; columns are channels.

    Args:
        panel: {channel: {"ens_mean_rmse": curve, "spread": curve, "spread_skill": curve, "crps": curve}}
    """
    n = max(len(panel), 1)
    fig, axes = plt.subplots(3, n, figsize=(4.0 * n, 8.0), squeeze=False, sharex="col")
    for col, (channel, curves) in enumerate(panel.items()):
        def days(curve: Curve):
            return np.asarray(curve[0]) / 24.0, curve[1]

        axes[0][col].plot(*days(curves["ens_mean_rmse"]), marker="o", markersize=3, label="ensemble-mean RMSE")
        axes[0][col].plot(*days(curves["spread"]), marker="s", markersize=3, label="spread")
        axes[1][col].plot(*days(curves["spread_skill"]), marker="o", markersize=3)
        axes[1][col].axhline(1.0, color="black", linewidth=0.8)
        axes[2][col].plot(*days(curves["crps"]), marker="o", markersize=3)
        axes[0][col].set_title(channel)
        axes[0][col].legend(fontsize=7)
        axes[2][col].set_xlabel("center lead time (days)")
        for ax in axes[:, col]:
            ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("RMSE / spread")
    axes[1][0].set_ylabel("spread-skill")
    axes[2][0].set_ylabel("CRPS")
    fig.tight_layout()
    save_svg(fig, path)

