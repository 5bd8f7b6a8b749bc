"""Per-layer line charts emitted as SVG."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def per_layer_chart(series: dict, ylabel: str, path, title: str = None):
    """One line per named series, x axis = layer index (1-based)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, values in series.items():
        ax.plot(range(1, len(values) + 1), values, marker="o", label=name)
    ax.set_xlabel("layer")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
