"""Ordered 2-D keypoint sets shared by the detector, the Q-network, and
the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["KeypointSet"]


@dataclass(frozen=True)
class KeypointSet:
    """K ordered (x, y) landmarks with a frame tag.

    ``x`` runs along image height / workspace vertical, ``y`` along width.
    Detector-side sets carry pixel coordinates; simulator-side sets carry
    workspace coordinates in [0, 1]^2. Ordering is part of the contract:
    index i in a ``current`` set corresponds to index i in a ``goal`` set.
    """

    coords: np.ndarray
    frame: str = "current"

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError(f"keypoint coords must be (K, 2), got {arr.shape}")
        if self.frame not in ("current", "goal"):
            raise ValueError(f"frame must be 'current' or 'goal', got {self.frame!r}")
        object.__setattr__(self, "coords", arr)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def with_frame(self, frame: str) -> "KeypointSet":
        return KeypointSet(self.coords, frame)

    def translated(self, offset) -> "KeypointSet":
        return KeypointSet(self.coords + np.asarray(offset, dtype=np.float64), self.frame)
