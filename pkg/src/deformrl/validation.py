"""Input validation helpers shared by the estimator-style classes."""

from __future__ import annotations

import numpy as np

__all__ = ["check_images", "check_keypoint_array", "check_seed"]


def check_images(images, height: int, width: int) -> np.ndarray:
    """Coerce to a float batch (n, H, W) of finite values in [0, 1]."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (height, width):
        raise ValueError(
            f"expected images of shape (n, {height}, {width}), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("images contain non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("image intensities must lie in [0, 1]")
    return arr


def check_keypoint_array(points, n_keypoints: int, batch: int | None = None) -> np.ndarray:
    """Coerce to (n, K, 2) float keypoint coordinates."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[1] != n_keypoints:
        raise ValueError(
            f"expected keypoints of shape (n, {n_keypoints}, 2), got {arr.shape}")
    if batch is not None and arr.shape[0] != batch:
        raise ValueError(f"expected {batch} keypoint rows, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError("keypoints contain non-finite values")
    return arr


def check_seed(seed) -> int:
    value = int(seed)
    if value < 0:
        raise ValueError("seed must be non-negative")
    return value
