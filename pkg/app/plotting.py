########################
# Plotting             #
########################

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402

from app.imaging import to_numpy_image  # noqa: E402

LOSS_COLUMNS = ("content", "qa", "gan_g", "gan_d", "perceptual", "loss_g", "loss_d")


def plot_patch_comparison(
    patches: Sequence[torch.Tensor],
    titles: Sequence[str],
    out_path: Union[str, Path],
    suptitle: Optional[str] = None,
) -> Path:
    """Show image patches side by side without interpolation and save a PNG."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(patches), figsize=(4 * len(patches), 4.4))
    if len(patches) == 1:
        axes = [axes]
    for ax, patch, title in zip(axes, patches, titles):
        ax.imshow(to_numpy_image(patch.clamp(0, 1)), interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    if suptitle:
        fig.suptitle(suptitle)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_loss_history(history: pd.DataFrame, out_path: Union[str, Path],
                      columns: Sequence[str] = LOSS_COLUMNS) -> Path:
    """One panel per loss column against the step index."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    present = [c for c in columns if c in history.columns]
    fig, axes = plt.subplots(len(present), 1, figsize=(8, 2.2 * len(present)), sharex=True, squeeze=False)
    for ax, column in zip(axes[:, 0], present):
        ax.plot(history["step"], history[column], linewidth=1)
        ax.set_ylabel(column)
        ax.grid(True, alpha=0.3)
    axes[-1, 0].set_xlabel("Step")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out_path
