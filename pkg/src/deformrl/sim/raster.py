"""Deterministic grayscale rendering of deformable states.

Constraint edges are drawn as 2-pixel-radius capsules (the union of
stamps along each segment), intensity 1 on a 0 background. Workspace
coordinate x in [0, 1] maps to pixel-center coordinate x * H - 0.5, so a
point at (r + 0.5) / H lands exactly on pixel row r.
"""

from __future__ import annotations

import numpy as np

from .pbd import DeformableState

__all__ = ["rasterize", "workspace_to_pixels", "pixels_to_workspace"]

STROKE_RADIUS_PX = 2.0


def workspace_to_pixels(points: np.ndarray, height: int, width: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    scale = np.array([height, width], dtype=np.float64)
    return np.clip(pts * scale - 0.5, 0.0, scale - 1.0)


def pixels_to_workspace(points: np.ndarray, height: int, width: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    scale = np.array([height, width], dtype=np.float64)
    return np.clip((pts + 0.5) / scale, 0.0, 1.0)


def rasterize(state: DeformableState, height: int = 64, width: int = 64) -> np.ndarray:
    """Render the constraint edges of `state` to an (H, W) float image."""
    if height < 16 or width < 16:
        raise ValueError("render extents must be at least 16 pixels")
    image = np.zeros((height, width))
    if state.n_particles == 0 or len(state.edges) == 0:
        return image
    px = state.positions * np.array([height, width]) - 0.5
    a = px[state.edges[:, 0]]                     # (E, 2)
    b = px[state.edges[:, 1]]
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    grid = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)  # (H, W, 2)
    pix = grid.reshape(-1, 1, 2)                  # (H*W, 1, 2)
    ab = (b - a).reshape(1, -1, 2)                # (1, E, 2)
    ap = pix - a.reshape(1, -1, 2)
    denom = np.maximum((ab * ab).sum(axis=2), 1e-12)
    t = np.clip((ap * ab).sum(axis=2) / denom, 0.0, 1.0)
    nearest = a.reshape(1, -1, 2) + t[:, :, None] * ab
    dist2 = ((pix - nearest) ** 2).sum(axis=2)    # (H*W, E)
    covered = (dist2.min(axis=1) <= STROKE_RADIUS_PX ** 2).reshape(height, width)
    image[covered] = 1.0
    return image
