"""GradCAM on the CNN branch and heatmap overlays."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .model import CapsuleNet


@dataclass
class Heatmap:
    grid: np.ndarray  # feature-map resolution, values in [0, 1]
    upsampled: np.ndarray  # input resolution
    target_class: str
    input_ref: str = ""

    def centroid(self) -> tuple[float, float]:
        """Mass centroid (x, y) of the upsampled map in pixel units; image centre for a zero map."""
        m = self.upsampled
        h, w = m.shape
        total = m.sum()
        if total <= 0:
            return (w - 1) / 2, (h - 1) / 2
        ys, xs = np.mgrid[0:h, 0:w]
        return float((m * xs).sum() / total), float((m * ys).sum() / total)


def cam_from_maps(activations: np.ndarray | torch.Tensor, gradients: np.ndarray | torch.Tensor) -> np.ndarray:
    """Rectified gradient-weighted channel sum, divided by its maximum.

    Both inputs are (channels, h, w). Channel weights are the spatial means of
    the gradients. A map with no positive value is returned as zeros.
    """
    a = torch.as_tensor(activations, dtype=torch.float64)
    g = torch.as_tensor(gradients, dtype=torch.float64)
    if a.ndim != 3 or a.shape != g.shape:
        raise ValueError(f"activations and gradients must both be (C, h, w); got {tuple(a.shape)} and {tuple(g.shape)}")
    weights = g.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * a).sum(dim=0))
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.numpy()


def _resolve_layer(model: CapsuleNet, layer) -> nn.Module:
    if layer is None:
        return model.backbone.cam_layer
    if isinstance(layer, str):
        return model.get_submodule(layer)
    return layer


def _as_batch(image, input_size: int) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        x = image if image.ndim == 4 else image[None]
    else:
        from .trainer import to_input

        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
        x = to_input(torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None])
    if x.shape[0] != 1:
        raise ValueError("gradcam explains one image at a time")
    return x


def gradcam(model: CapsuleNet, image, target_class: str, layer=None, input_ref: str = "") -> Heatmap:
    """Heatmap for ``target_class``'s logit w.r.t. a convolutional layer (default: last CNN block).

    ``image`` is a normalized (1, 3, H, W) tensor or a uint8 HxWx3 array.
    """
    if target_class not in model.class_names:
        raise ValueError(f"class {target_class!r} is not an output of this model; valid classes: {model.class_names}")
    module = _resolve_layer(model, layer)
    x = _as_batch(image, model.spec.input_size)
    captured = {}

    def hook(_module, _inp, out):
        captured["act"] = out

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x.detach())
            act = captured.get("act")
            if act is None or act.ndim != 4:
                shape = None if act is None else tuple(act.shape)
                raise ValueError(f"selected layer has no spatial output (got shape {shape})")
            score = logits[0, model.class_names.index(target_class)]
            (grad,) = torch.autograd.grad(score, act)
    finally:
        handle.remove()
        model.train(was_training)

    grid = cam_from_maps(act[0].detach(), grad[0].detach())
    h, w = x.shape[-2:]
    up = F.interpolate(torch.from_numpy(grid)[None, None], size=(h, w), mode="bilinear", align_corners=False)
    up = up[0, 0].clamp(0.0, 1.0).numpy()
    return Heatmap(grid, up, target_class, input_ref)


def predicted_class(model: CapsuleNet, image) -> str:
    x = _as_batch(image, model.spec.input_size)
    model.eval()
    with torch.no_grad():
        return model.class_names[int(model(x).argmax(dim=1))]


def overlay(heatmap: Heatmap, image: np.ndarray, alpha: float = 0.4, out: str | os.PathLike | None = None, cmap: str = "jet") -> np.ndarray:
    """Blend the colour-mapped heatmap over ``image`` (uint8 HxWx3) at opacity ``alpha``."""
    import matplotlib

    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    image = np.asarray(image)
    h, w = image.shape[:2]
    m = heatmap.upsampled
    if m.shape != (h, w):
        m = F.interpolate(torch.from_numpy(heatmap.grid)[None, None], size=(h, w), mode="bilinear", align_corners=False)
        m = m[0, 0].clamp(0.0, 1.0).numpy()
    colored = matplotlib.colormaps[cmap](m)[..., :3] * 255.0
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * colored
    result = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    if out is not None:
        from PIL import Image

        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(result).save(out, format="PNG")
    return result


def quadrant_of(x: float, y: float, size: int) -> int:
    half = size / 2
    return int(x >= half - 0.5) + 2 * int(y >= half - 0.5)
