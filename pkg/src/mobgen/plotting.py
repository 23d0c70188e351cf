"""Figures for validation reports (written to files, no display needed)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .validation import STATES  # noqa: E402


def zonal_scatter(pairs, path, title: str = "Zonal trip attraction") -> None:
    """``pairs`` maps a label to (survey shares, model shares)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    hi = 0.0
    for label, (s, m) in pairs.items():
        ax.scatter(s, m, s=8, alpha=0.6, label=label)
        hi = max(hi, float(np.max(s, initial=0)), float(np.max(m, initial=0)))
    ax.plot([0, hi], [0, hi], color="k", lw=0.8)
    ax.set_xlabel("survey share")
    ax.set_ylabel("model share")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def temporal_plot(times, model, survey, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    hours = np.asarray(times) / 60.0
    for k, state in enumerate(STATES):
        line, = ax.plot(hours, model[:, k], label=state)
        if survey is not None:
            ax.plot(hours, survey[:, k], ls="--", color=line.get_color())
    ax.set_xlabel("hour of day")
    ax.set_ylabel("share of agents")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8, ncol=3)
    ax.set_title("Activity shares (solid: model, dashed: survey)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def distance_histogram(model_km, survey_km, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    top = max(np.quantile(model_km, 0.98) if len(model_km) else 1.0,
              np.quantile(survey_km, 0.98) if len(survey_km) else 1.0, 1.0)
    bins = np.linspace(0, top, 40)
    ax.hist(model_km, bins=bins, density=True, alpha=0.5, label="model")
    ax.hist(survey_km, bins=bins, density=True, alpha=0.5, label="survey")
    ax.set_xlabel("km per person-day")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
