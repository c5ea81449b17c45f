"""File-only figures (Agg backend, no timestamps in the PNG metadata)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_META = {"Software": None}


def _save(fig, out) -> None:
    fig.savefig(out, format="png", dpi=100, metadata=PNG_META)
    plt.close(fig)


def sorted_count_histogram(counts: dict[int, int], out, threshold: int = 10) -> None:
    """Per-category instance counts in descending order, log scale, rare threshold marked."""
    values = np.array(sorted(counts.values(), reverse=True), dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(np.arange(len(values)), values, width=1.0, color="#4477aa")
    ax.axhline(threshold, color="#cc3311", lw=1, ls="--", label=f"rare threshold ({threshold})")
    ax.set_yscale("log")
    ax.set_xlabel("HOI category (sorted by count)")
    ax.set_ylabel("instances")
    ax.legend(loc="upper right")
    fig.tight_layout()
    _save(fig, out)


def loss_curves(records: list[dict], out) -> None:
    steps = [r for r in records if r.get("kind") == "step"]
    x = [r["step"] for r in steps]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for key, label in (("l_b", "box L1"), ("l_g", "GIoU"), ("l_c_o", "object contrastive"),
                       ("l_c_i", "interaction contrastive"), ("total", "total")):
        ax.plot(x, [r[key] for r in steps], lw=1, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out)
