import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Keep text as text so the SVG output is stable across font setups.
matplotlib.rcParams["svg.fonttype"] = "none"
matplotlib.rcParams["svg.hashsalt"] = "adaptive-sense"


def ssim_curves(path, series, title):
    """Per-step SSIM curves with a stderr band.

    ``series`` maps a label to (steps, means, stderrs).
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (steps, means, stderrs) in series.items():
        lower = [m - s for m, s in zip(means, stderrs)]
        upper = [m + s for m, s in zip(means, stderrs)]
        ax.plot(steps, means, marker="o", markersize=3, label=label)
        ax.fill_between(steps, lower, upper, alpha=0.2)
    ax.set_xlabel("Acquisition step")
    ax.set_ylabel("SSIM")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logging.info("Wrote %s", path)


def mse_curve(path, series, title):
    """Per-pixel MSE against the number of measurements, one line per lambda."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (counts, values) in series.items():
        ax.plot(counts, values, marker="o", markersize=3, label=label)
    ax.set_xlabel("Measurements")
    ax.set_ylabel("Per-pixel MSE")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logging.info("Wrote %s", path)
