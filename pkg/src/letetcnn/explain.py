"""Grad-CAM vertex attribution for trained classifiers.

The attribution target is the pre-sigmoid logit; the feature map is the
output of the final convolution stage (node resolution). Channel weights are
the vertex-averaged logit gradients; the rectified, channel-weighted map is
max-normalized to [0, 1].
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .mesh_io import TetMesh, VertexField, write_vtk_scalar
from .model import MeshSample, Model


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class Heatmap:
    """Per-vertex attribution in [0, 1] (max-normalized)."""

    values: np.ndarray
    layer: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ExplainError("heatmap must be one value per vertex")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ExplainError("heatmap values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def gradcam(sample: MeshSample, model: Model) -> Heatmap:
    """Channel-weighted, rectified activation map of the last conv stage.

    An all-zero raw map (e.g. a zeroed head) is returned as zeros with a
    warning rather than an error.
    """
    if model.mcfg.variant == "le":
        raise ExplainError(
            "variant 'le' has no convolutional feature map; "
            "token-level attribution is not vertex-resolved"
        )
    logit, taps = model.forward(sample, tap_features=True)
    feature_map = taps["conv"]
    logit.backward()
    grads = feature_map.grad
    model.params.zero_grads()

    channel_weights = grads.mean(axis=0)
    raw = np.maximum(feature_map.data @ channel_weights, 0.0)
    peak = float(raw.max()) if raw.size else 0.0
    if peak == 0.0:
        warnings.warn("Grad-CAM map is all-zero (no gradient reached the "
                      "feature map)", RuntimeWarning)
        values = np.zeros_like(raw)
    else:
        values = raw / peak
    layer = f"conv{len(model.convs) - 1}"
    return Heatmap(values=values, layer=layer)


def export_heatmap(mesh: TetMesh, heatmap: Heatmap, path) -> None:
    """Write the heatmap as a VTK scalar named ``gradcam``."""
    text = write_vtk_scalar(mesh, VertexField(heatmap.values), "gradcam")
    with open(path, "w") as f:
        f.write(text)


def export_heatmap_csv(heatmap: Heatmap, path) -> None:
    """Per-vertex values as a two-column CSV (vertex index, value)."""
    with open(path, "w") as f:
        f.write("vertex,gradcam\n")
        for i, v in enumerate(heatmap.values):
            f.write(f"{i},{v:.17g}\n")


def heat_mass_in_mask(heatmap: Heatmap, mask: np.ndarray, top_fraction: float = 0.1):
    """Fraction of top-decile heat mass that falls inside a vertex mask."""
    v = heatmap.values
    if v.size != mask.size:
        raise ExplainError("mask length does not match heatmap")
    k = max(1, int(np.ceil(top_fraction * v.size)))
    top_idx = np.argsort(v)[::-1][:k]
    top_mass = v[top_idx].sum()
    if top_mass == 0:
        return 0.0
    return float(v[top_idx][mask[top_idx]].sum() / top_mass)
