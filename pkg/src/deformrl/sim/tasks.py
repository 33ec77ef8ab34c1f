"""Goal generators for the eight rearranging task families.

Every family samples a randomized goal configuration: position and
orientation always, plus family parameters (V side ratio and included
angle, N joint angles, fold axis). Goals are laid out as particle
positions consistent with the object's topology, then the goal keypoints
are extracted with the same canonical sampling the live object uses, so
current/goal indices correspond.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..keypoints import KeypointSet
from .pbd import DeformableState, closed_chain, cloth_grid, open_chain

__all__ = ["FAMILIES", "ObjectGeometry", "TaskSpec", "make_task", "sample_keypoints"]

FAMILIES = (
    "straighten",
    "v-shape",
    "n-shape",
    "ring-circle",
    "ring-square",
    "ring-translate",
    "cloth-flatten",
    "cloth-fold",
)

CHAIN_FAMILIES = ("straighten", "v-shape", "n-shape")
RING_FAMILIES = ("ring-circle", "ring-square", "ring-translate")
CLOTH_FAMILIES = ("cloth-flatten", "cloth-fold")


@dataclass(frozen=True)
class ObjectGeometry:
    """Canonical sizes of the simulated objects in workspace units."""

    n_particles: int = 32
    rope_length: float = 0.74
    ring_circumference: float = 0.6
    grid_shape: tuple[int, int] = (8, 8)
    cloth_size: float = 0.3
    margin: float = 0.12

    @property
    def cloth_spacing(self) -> float:
        return self.cloth_size / (max(self.grid_shape) - 1)


@dataclass(frozen=True)
class TaskSpec:
    """One rearranging task: a family, its sampled goal, and provenance."""

    family: str
    goal_state: DeformableState
    goal_keypoints: KeypointSet
    seed: int
    params: dict = field(default_factory=dict)


# -- canonical keypoint sampling ------------------------------------------------


def sample_keypoints(state: DeformableState, n_keypoints: int) -> KeypointSet:
    """K canonical samples of the particle polyline, stable across steps.

    Open chains sample K points uniformly in rest arc length (fractional
    particle index, ends included), so K = P returns the particles
    themselves; the traversal starts at the lexicographically smaller
    endpoint, making the ordering a function of the geometry alone. That
    matters: rewards pair keypoints by index, and an index rule that
    geometry cannot determine (such as raw particle order) is invisible
    to any permutation-equivariant policy, capping it at the 50% chance
    of guessing the chain's hidden orientation. The orientation can only
    change when the endpoints swap lexicographic rank, so it is stable
    under small perturbations away from that boundary.

    Closed chains start at particle 0 and wind in index order. Grids use
    a fixed template of evenly spaced flattened indices.
    """
    pos = state.positions
    p = state.n_particles
    if n_keypoints > p:
        raise ValueError(f"requested {n_keypoints} keypoints from {p} particles")
    if n_keypoints < 2:
        raise ValueError("need at least 2 keypoints for correspondence")
    if state.topology == "open-chain":
        first, last = pos[0], pos[-1]
        if (first[0], first[1]) > (last[0], last[1]):
            pos = pos[::-1]
        frac = np.linspace(0.0, p - 1.0, n_keypoints)
        lo = np.floor(frac).astype(int)
        hi = np.minimum(lo + 1, p - 1)
        t = (frac - lo)[:, None]
        coords = pos[lo] * (1.0 - t) + pos[hi] * t
    elif state.topology == "closed-chain":
        frac = np.arange(n_keypoints) * (p / n_keypoints)
        lo = np.floor(frac).astype(int) % p
        hi = (lo + 1) % p
        t = (frac - np.floor(frac))[:, None]
        coords = pos[lo] * (1.0 - t) + pos[hi] * t
    elif state.topology == "grid":
        template = np.round(np.linspace(0.0, p - 1.0, n_keypoints)).astype(int)
        coords = pos[template]
    else:
        raise ValueError(f"unknown topology {state.topology!r}")
    return KeypointSet(coords.copy(), "current")


# -- layout helpers ---------------------------------------------------------------


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return points @ np.array([[c, -s], [s, c]]).T


def _place(points: np.ndarray, rng: np.random.Generator, margin: float) -> np.ndarray:
    """Translate a local layout to a uniform-random pose inside the margins."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = hi - lo
    free = 1.0 - 2.0 * margin - span
    if (free < 0).any():
        # Shape too large for randomization along that axis: center it.
        free = np.maximum(free, 0.0)
    origin = margin + rng.uniform(0.0, 1.0, size=2) * free
    return points - lo + origin


def _polyline_arc_positions(vertices: np.ndarray, arcs: np.ndarray) -> np.ndarray:
    """Points at arc positions `arcs` along the polyline through `vertices`."""
    seg = np.diff(vertices, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    arcs = np.clip(arcs, 0.0, total)
    idx = np.clip(np.searchsorted(cum, arcs, side="right") - 1, 0, len(seg) - 1)
    t = (arcs - cum[idx]) / np.maximum(seg_len[idx], 1e-12)
    return vertices[idx] + seg[idx] * t[:, None]


def _chain_from_vertices(vertices: np.ndarray, geometry: ObjectGeometry,
                         rng: np.random.Generator) -> np.ndarray:
    arcs = np.linspace(0.0, geometry.rope_length, geometry.n_particles)
    points = _polyline_arc_positions(vertices, arcs)
    points = _rotate(points, rng.uniform(0.0, 2.0 * math.pi))
    return _place(points, rng, geometry.margin)


# -- family goal layouts -------------------------------------------------------------


def _goal_straighten(rng, geometry):
    vertices = np.array([[0.0, 0.0], [0.0, geometry.rope_length]])
    return _chain_from_vertices(vertices, geometry, rng), {}


def _goal_v_shape(rng, geometry):
    ratio = rng.uniform(0.5, 1.0)
    angle = rng.uniform(math.radians(30.0), math.radians(120.0))
    long_side = geometry.rope_length / (1.0 + ratio)
    short_side = geometry.rope_length - long_side
    vertex = np.array([0.0, 0.0])
    first = vertex + long_side * np.array([1.0, 0.0])
    second = vertex + short_side * np.array([math.cos(angle), math.sin(angle)])
    vertices = np.array([first, vertex, second])
    return (_chain_from_vertices(vertices, geometry, rng),
            {"side_ratio": ratio, "included_angle_deg": math.degrees(angle)})


def _goal_n_shape(rng, geometry):
    thirds = geometry.rope_length / 3.0
    joints = rng.uniform(math.radians(30.0), math.radians(75.0), size=2)
    heading = 0.0
    vertices = [np.array([0.0, 0.0])]
    for i, joint in enumerate(joints):
        sign = -1.0 if i % 2 == 0 else 1.0
        vertices.append(vertices[-1] + thirds * np.array(
            [math.cos(heading), math.sin(heading)]))
        heading += sign * (math.pi - joint)
    vertices.append(vertices[-1] + thirds * np.array(
        [math.cos(heading), math.sin(heading)]))
    return (_chain_from_vertices(np.asarray(vertices), geometry, rng),
            {"joint_angles_deg": [math.degrees(j) for j in joints]})


def _ring_vertices_on_circle(geometry) -> np.ndarray:
    p = geometry.n_particles
    # Radius chosen so the particle polygon has exactly the rest perimeter.
    radius = geometry.ring_circumference / (2.0 * p * math.sin(math.pi / p))
    theta = 2.0 * math.pi * np.arange(p) / p
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _goal_ring_circle(rng, geometry):
    points = _ring_vertices_on_circle(geometry)
    points = _rotate(points, rng.uniform(0.0, 2.0 * math.pi))
    return _place(points, rng, geometry.margin), {}


def _goal_ring_square(rng, geometry):
    p = geometry.n_particles
    side = geometry.ring_circumference / 4.0
    corners = np.array([[0.0, 0.0], [side, 0.0], [side, side], [0.0, side],
                        [0.0, 0.0]])
    arcs = np.arange(p) * (geometry.ring_circumference / p)
    points = _polyline_arc_positions(corners, arcs)
    points = _rotate(points, rng.uniform(0.0, math.pi / 2.0))
    return _place(points, rng, geometry.margin), {}


def _goal_ring_translate(rng, geometry):
    points = _ring_vertices_on_circle(geometry)
    points = _rotate(points, rng.uniform(0.0, 2.0 * math.pi))
    points -= points.mean(axis=0)
    radius_x = points[:, 0].max()
    radius_y = points[:, 1].max()
    low = np.array([geometry.margin + radius_x, geometry.margin + radius_y])
    high = np.array([1.0 - geometry.margin - radius_x,
                     1.0 - geometry.margin - radius_y])
    center = np.array([0.5, 0.5])
    offset = rng.uniform(low, high) - center
    return points + center + offset, {"offset": offset.tolist()}


def _flat_cloth_layout(geometry) -> np.ndarray:
    rows, cols = geometry.grid_shape
    s = geometry.cloth_spacing
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([rr.reshape(-1) * s, cc.reshape(-1) * s], axis=1)


def _goal_cloth_flatten(rng, geometry):
    points = _rotate(_flat_cloth_layout(geometry), rng.uniform(0.0, 2.0 * math.pi))
    return _place(points, rng, geometry.margin), {}


def _goal_cloth_fold(rng, geometry):
    rows, cols = geometry.grid_shape
    points = _flat_cloth_layout(geometry).reshape(rows, cols, 2)
    axis = int(rng.integers(0, 2))  # 0: fold across rows, 1: across columns
    if axis == 0:
        mid = (rows - 1) / 2.0
        rr = np.arange(rows, dtype=np.float64)
        folded_r = np.where(rr > mid, 2.0 * mid - rr, rr)
        points[:, :, 0] = folded_r[:, None] * geometry.cloth_spacing
    else:
        mid = (cols - 1) / 2.0
        cc = np.arange(cols, dtype=np.float64)
        folded_c = np.where(cc > mid, 2.0 * mid - cc, cc)
        points[:, :, 1] = folded_c[None, :] * geometry.cloth_spacing
    flat = points.reshape(-1, 2)
    flat = _rotate(flat, rng.uniform(0.0, 2.0 * math.pi))
    return _place(flat, rng, geometry.margin), {"fold_axis": axis}


_GOAL_BUILDERS = {
    "straighten": _goal_straighten,
    "v-shape": _goal_v_shape,
    "n-shape": _goal_n_shape,
    "ring-circle": _goal_ring_circle,
    "ring-square": _goal_ring_square,
    "ring-translate": _goal_ring_translate,
    "cloth-flatten": _goal_cloth_flatten,
    "cloth-fold": _goal_cloth_fold,
}


def build_state(family: str, positions: np.ndarray,
                geometry: ObjectGeometry) -> DeformableState:
    """Wrap a particle layout in the constraint structure of its family."""
    if family in CHAIN_FAMILIES:
        return open_chain(positions, geometry.rope_length)
    if family in RING_FAMILIES:
        return closed_chain(positions, geometry.ring_circumference)
    rows, cols = geometry.grid_shape
    return cloth_grid(positions, rows, cols, geometry.cloth_spacing)


def make_task(family: str, seed: int, n_keypoints: int = 8,
              geometry: ObjectGeometry | None = None) -> TaskSpec:
    """Sample a randomized goal for `family`; deterministic per seed."""
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}; choose from {FAMILIES}")
    geometry = geometry or ObjectGeometry()
    rng = np.random.default_rng([int(seed), FAMILIES.index(family)])
    positions, params = _GOAL_BUILDERS[family](rng, geometry)
    goal_state = build_state(family, positions, geometry)
    goal_kps = sample_keypoints(goal_state, n_keypoints).with_frame("goal")
    return TaskSpec(family=family, goal_state=goal_state,
                    goal_keypoints=goal_kps, seed=int(seed), params=params)
