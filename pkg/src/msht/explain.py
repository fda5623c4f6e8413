"""Grad-CAM heatmaps over input images for a chosen class.

The default target layer is the deepest backbone stage output (the last
spatial map before tokenization); earlier stages can be selected for
comparison panels. Heatmaps are rectified, bilinearly upsampled to the
input resolution, and min-max normalized to [0, 1]; a constant map
normalizes to all-zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datapipe import LabeledImage


@dataclass
class CamHeatmap:
    values: np.ndarray  # H x W float32 in [0, 1]
    target_class: int
    target_layer_tag: str
    source_id: str = ""


def grad_cam(model: torch.nn.Module, input_tensor: torch.Tensor, target_class: int,
             target_stage: int | None = None, source_id: str = "") -> CamHeatmap:
    """Heatmap of the target-class logit's gradient against a stage map.

    Channel weights are the spatially averaged gradients; the weighted channel
    sum is rectified, upsampled to the input size, and min-max normalized.
    """
    if not 0 <= target_class < model.num_classes:
        raise ValueError(f"target class {target_class} outside 0..{model.num_classes - 1}")
    if input_tensor.dim() == 3:
        input_tensor = input_tensor.unsqueeze(0)
    if input_tensor.dim() != 4 or input_tensor.shape[0] != 1:
        raise ValueError(f"expected a single image tensor, got shape {tuple(input_tensor.shape)}")

    stage = target_stage if target_stage is not None else model.fgd_config.stage_count
    module = model.backbone.stage_module(stage)

    captured: list[torch.Tensor] = []
    handle = module.register_forward_hook(lambda _m, _i, out: captured.append(out))
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(input_tensor)
            activation = captured[-1]
            if activation.grad_fn is None:
                raise RuntimeError(
                    "the target layer recorded no gradients; run the forward pass with "
                    "gradients enabled (outside torch.no_grad/inference_mode)")
            score = logits[0, target_class]
            grads = torch.autograd.grad(score, activation)[0]
    finally:
        handle.remove()
        model.train(was_training)

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * activation).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=input_tensor.shape[-2:], mode="bilinear", align_corners=False)
    cam = cam[0, 0].detach()

    low, high = cam.min().item(), cam.max().item()
    if high > low:
        values = ((cam - low) / (high - low)).numpy().astype(np.float32)
    else:
        values = np.zeros(cam.shape, dtype=np.float32)
    return CamHeatmap(values, target_class, f"stage{stage}", source_id)


def overlay(heatmap: CamHeatmap, image, alpha: float = 0.5, colormap: str = "jet") -> np.ndarray:
    """Alpha-blend the color-mapped heatmap onto the image (uint8 H x W x 3).

    The per-pixel blend weight is alpha * heat, so zero heat leaves the image
    untouched and full heat applies a uniform tint of the colormap maximum.
    """
    from matplotlib import colormaps  # heavy import kept local

    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image)
    if pixels.shape[:2] != heatmap.values.shape:
        raise ValueError(f"heatmap shape {heatmap.values.shape} does not match "
                         f"image shape {pixels.shape[:2]}")
    colors = colormaps[colormap](heatmap.values)[..., :3] * 255.0
    weight = (alpha * heatmap.values)[..., None]
    blended = pixels.astype(np.float64) * (1.0 - weight) + colors * weight
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def heat_statistics(heatmap: CamHeatmap) -> dict:
    values = heatmap.values
    return {"min": float(values.min()), "max": float(values.max()), "mean": float(values.mean())}


def save_overlay(path, heatmap: CamHeatmap, image, alpha: float = 0.5,
                 colormap: str = "jet", sidecar: bool = True) -> Path:
    """Write the rendered overlay PNG (and a JSON sidecar) deterministically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(heatmap, image, alpha, colormap)).save(path)
    if sidecar:
        meta = {
            "source_id": heatmap.source_id,
            "target_class": heatmap.target_class,
            "target_layer_tag": heatmap.target_layer_tag,
            "heat_statistics": heat_statistics(heatmap),
        }
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as handle:
            json.dump(meta, handle, indent=2, sort_keys=True)
            handle.write("\n")
    return path
