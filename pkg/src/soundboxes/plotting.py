"""Figures: selected boxes over the frame, mixture spectrogram and predicted masks."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
from PIL import Image  # noqa: E402

BOX_COLORS = ("tab:red", "tab:cyan")


def save_mask_png(path, mask: np.ndarray) -> None:
    """Grayscale PNG with low frequencies at the bottom."""
    img = (np.clip(mask, 0, 1)[::-1] * 255).round().astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def plot_separation(path, image, boxes, mixture_spec, masks, proposals=None, title: str = ""):
    fig, axes = plt.subplots(1, 2 + len(masks), figsize=(4 * (2 + len(masks)), 4))
    ax = axes[0]
    ax.imshow(np.clip(image, 0, 1))
    if proposals is not None:
        for b in proposals:
            ax.add_patch(Rectangle((b.x0 - 0.5, b.y0 - 0.5), b.width, b.height, fill=False,
                                   edgecolor="white", linewidth=0.4, alpha=0.4))
    for b, c in zip(boxes, BOX_COLORS):
        ax.add_patch(Rectangle((b.x0 - 0.5, b.y0 - 0.5), b.width, b.height, fill=False, edgecolor=c, linewidth=2))
    ax.set_title("selected boxes")
    ax.axis("off")
    axes[1].imshow(np.log1p(mixture_spec.magnitude), origin="lower", aspect="auto", cmap="magma")
    axes[1].set_title("mixture log-magnitude")
    for k, (m, c) in enumerate(zip(masks, BOX_COLORS)):
        a = axes[2 + k]
        a.imshow(m, origin="lower", aspect="auto", cmap="gray", vmin=0, vmax=1)
        a.set_title(f"mask {k + 1}", color=c)
    for a in axes[1:]:
        a.set_xlabel("frame")
        a.set_ylabel("bin")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=100)
    plt.close(fig)
