"""Patch tokenization: assign every mesh vertex to its nearest super node,
track patch centers/sizes, and build the radius graph over patch centers.

Patch centers are the super-node coordinates themselves (not member
centroids). The radius graph keeps self-loops so downstream attention always
has a non-empty neighborhood, and distances are ambient Euclidean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .landmarks import LandmarkSet


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchAssignment:
    """Per-vertex patch labels plus per-patch centers and sizes."""

    labels: np.ndarray
    centers: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        centers = np.asarray(self.centers, dtype=np.float64)
        sizes = np.asarray(self.sizes, dtype=np.int64)
        if sizes.sum() != labels.size:
            raise PatchError("patch sizes do not sum to vertex count")
        if np.any(sizes < 1):
            raise PatchError("empty patch")
        if labels.min() < 0 or labels.max() >= centers.shape[0]:
            raise PatchError("patch label out of range")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_patches(self) -> int:
        return self.centers.shape[0]


def assign_patches(vertices: np.ndarray, landmarks: LandmarkSet) -> PatchAssignment:
    """1-nearest-super-node labeling; ties go to the lower landmark ordinal."""
    pts = np.asarray(vertices, dtype=np.float64)
    centers = landmarks.positions
    n_patches = centers.shape[0]
    labels = np.empty(pts.shape[0], dtype=np.int64)
    # Blocked scan keeps the N x |P| distance matrix bounded.
    block = max(1, 2_000_000 // max(1, n_patches))
    for start in range(0, pts.shape[0], block):
        chunk = pts[start : start + block]
        d2 = (
            np.einsum("ij,ij->i", chunk, chunk)[:, None]
            - 2.0 * chunk @ centers.T
            + np.einsum("ij,ij->i", centers, centers)[None, :]
        )
        labels[start : start + block] = np.argmin(d2, axis=1)
    # Exact self-membership: a landmark vertex always owns its own patch
    # (guards against floating-point ties resolving elsewhere).
    labels[landmarks.indices] = np.arange(n_patches)
    sizes = np.bincount(labels, minlength=n_patches)
    return PatchAssignment(labels=labels, centers=centers.copy(), sizes=sizes)


def build_radius_graph(centers: np.ndarray, r: float):
    """Directed edge arrays (targets, sources) for all center pairs within r.

    Self-loops are always included. Edges come back sorted by
    (target, source), which downstream softmax segmentation relies on.
    """
    if r <= 0:
        raise PatchError(f"radius must be positive, got {r}")
    c = np.asarray(centers, dtype=np.float64)
    n = c.shape[0]
    d2 = (
        np.einsum("ij,ij->i", c, c)[:, None]
        - 2.0 * c @ c.T
        + np.einsum("ij,ij->i", c, c)[None, :]
    )
    adj = d2 <= r * r
    np.fill_diagonal(adj, True)
    targets, sources = np.nonzero(adj)  # nonzero is row-major: sorted by (t, s)
    return targets.astype(np.int64), sources.astype(np.int64)


def patch_label_field(assignment: PatchAssignment) -> np.ndarray:
    """Per-vertex integer labels, ready for VTK export (Fig-style coloring)."""
    return assignment.labels.astype(np.int32)
