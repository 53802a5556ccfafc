import pandas as pd
import torch
from PIL import Image

from app.plotting import plot_loss_history, plot_patch_comparison

# Test cases for plot_patch_comparison

def test_patch_comparison_writes_png(tmp_path):
    patches = [torch.rand(1, 3, 12, 16), torch.rand(1, 3, 12, 16)]
    out = plot_patch_comparison(patches, ["True LR", "Bicubic"], tmp_path / "plots" / "patch.png",
                                suptitle="Patch (0, 0, 16, 12)")
    assert out.is_file()
    with Image.open(out) as image:
        assert image.format == "PNG"

def test_patch_comparison_single_patch(tmp_path):
    out = plot_patch_comparison([torch.rand(1, 3, 8, 8)], ["Only"], tmp_path / "single.png")
    assert out.is_file()

# Test cases for plot_loss_history

def test_loss_history_plot(tmp_path):
    history = pd.DataFrame({
        "step": [0, 1, 2],
        "content": [0.3, 0.2, 0.1],
        "loss_g": [1.0, 0.8, 0.7],
        "loss_d": [0.7, 0.7, 0.6],
    })
    out = plot_loss_history(history, tmp_path / "losses.png")
    assert out.is_file()
    with Image.open(out) as image:
        assert image.size[0] > 0
