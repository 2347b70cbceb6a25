"""Grad-CAM heatmaps at the pre-attention, GAB and CAB stages, and overlays."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backbone as bb
from .datapipe import bilinear_resize, save_png, to_tensor_batch
from .tensor_core import Tape, ops

# panel file tag -> model stage
PANEL_STAGES = {"noattn": "pre_attention", "gab": "gab", "cab": "cab"}


@dataclass
class Heatmap:
    values: np.ndarray  # (h, w) in [0, 1]
    stage: str
    grade: int
    flat: bool = False
    raw: np.ndarray | None = None  # relu'd map before normalisation


def gradcam_map(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """relu(sum_c mean(grad_c) * act_c) for (c, h, w) arrays."""
    weights = gradients.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, activations, axes=1), 0.0)


def normalize_map(cam: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]; a constant map comes back as zeros with ``flat=True``."""
    lo, hi = cam.min(), cam.max()
    if not hi > lo:
        return np.zeros_like(cam), True
    return (cam - lo) / (hi - lo), False


def grad_cam(assembly: bb.ModelAssembly, image, grade="auto", stage: str = "cab") -> Heatmap:
    """Grad-CAM of the target grade's logit at ``stage`` for a single image.

    ``image`` is an (H, W, 3) uint8 array or a (1, 3, H, W) float batch.
    ``grade="auto"`` targets the predicted grade.
    """
    x = np.asarray(image)
    if x.ndim == 3:
        x = to_tensor_batch([x])
    if x.shape[0] != 1:
        raise ValueError("grad_cam explains one image at a time")
    with Tape() as tape:
        result = bb.model_forward(x, assembly, training=False, tap=stage)
        logits = result.logits
        if grade == "auto":
            grade = int(bb.predict(logits)[0])
        grade = int(grade)
        if not 0 <= grade < assembly.config.num_classes:
            raise ValueError(f"grade {grade} outside [0, {assembly.config.num_classes})")
        onehot = np.zeros(logits.shape)
        onehot[0, grade] = 1.0
        target = ops.weighted_sum(logits, onehot)
    tape.backward(target)
    act = result.intermediates[stage]
    grad = act.grad if act.grad is not None else np.zeros(act.shape)
    raw = gradcam_map(act.data[0], grad[0])
    values, flat = normalize_map(raw)
    return Heatmap(values, stage, grade, flat, raw)


def render_overlay(heatmap: Heatmap, image: np.ndarray, colormap: str = "viridis",
                   alpha: float = 0.4) -> np.ndarray:
    """Blend the colourised heatmap (bilinearly upsampled) over an (H, W, 3) uint8 image."""
    import matplotlib

    h, w = image.shape[:2]
    values = np.clip(bilinear_resize(heatmap.values, (h, w)), 0.0, 1.0)
    colour = matplotlib.colormaps[colormap](values)[..., :3] * 255.0
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * colour
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def attention_panel(assembly: bb.ModelAssembly, image: np.ndarray, stem: str, out_dir,
               grade="auto", stages=("noattn", "gab", "cab"), colormap: str = "viridis",
               alpha: float = 0.4) -> dict:
    """Write ``<stem>.orig.png`` plus one ``<stem>.<tag>.png`` overlay per stage tag."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"orig": out / f"{stem}.orig.png"}
    save_png(paths["orig"], image)
    if grade == "auto":
        grade = int(bb.predict(bb.model_forward(to_tensor_batch([image]), assembly).logits)[0])
    for tag in stages:
        if tag not in PANEL_STAGES:
            raise ValueError(f"unknown stage tag {tag!r}; expected one of {sorted(PANEL_STAGES)}")
        hm = grad_cam(assembly, image, grade, PANEL_STAGES[tag])
        paths[tag] = out / f"{stem}.{tag}.png"
        save_png(paths[tag], render_overlay(hm, image, colormap, alpha))
    return paths
