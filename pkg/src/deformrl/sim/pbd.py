"""Position-based dynamics for chains, rings, and grids.

Objects are particle sets joined by distance constraints. A pick-and-place
drag pins one particle on a straight path and repeatedly projects the
constraints; a final unpinned relaxation settles the object to within the
constraint tolerance. Projection is a sequential Gauss-Seidel sweep over
the edges in a fixed order, compiled with numba; positions are clamped to
the unit workspace after every sweep. Everything is deterministic: no
randomness, no threading, IEEE float64 arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "DeformableState",
    "open_chain",
    "closed_chain",
    "cloth_grid",
    "project_constraints",
    "max_constraint_violation",
    "relax",
    "drag_particle",
]

CONSTRAINT_TOLERANCE = 0.02  # max relative edge-length violation after relax


@dataclass
class DeformableState:
    """Particle positions plus the constraint structure that ties them."""

    positions: np.ndarray            # (P, 2) in [0, 1]^2
    topology: str                    # "open-chain" | "closed-chain" | "grid"
    edges: np.ndarray                # (E, 2) particle indices
    rest_lengths: np.ndarray         # (E,)
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64)
        self.rest_lengths = np.ascontiguousarray(self.rest_lengths,
                                                 dtype=np.float64)
        self._ei = np.ascontiguousarray(self.edges[:, 0]) if len(self.edges) \
            else np.zeros(0, dtype=np.int64)
        self._ej = np.ascontiguousarray(self.edges[:, 1]) if len(self.edges) \
            else np.zeros(0, dtype=np.int64)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "DeformableState":
        return DeformableState(self.positions.copy(), self.topology,
                               self.edges, self.rest_lengths, self.grid_shape)

    def with_positions(self, positions: np.ndarray) -> "DeformableState":
        return DeformableState(np.asarray(positions, dtype=np.float64),
                               self.topology, self.edges, self.rest_lengths,
                               self.grid_shape)


def open_chain(positions: np.ndarray, total_length: float) -> DeformableState:
    p = np.asarray(positions, dtype=np.float64)
    n = len(p)
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    rest = np.full(n - 1, total_length / (n - 1))
    return DeformableState(p, "open-chain", edges, rest)


def closed_chain(positions: np.ndarray, circumference: float) -> DeformableState:
    p = np.asarray(positions, dtype=np.float64)
    n = len(p)
    edges = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    rest = np.full(n, circumference / n)
    return DeformableState(p, "closed-chain", edges, rest)


def cloth_grid(positions: np.ndarray, rows: int, cols: int,
               spacing: float) -> DeformableState:
    """Grid with structural (axis-neighbor) distance edges.

    Shear diagonals are deliberately omitted: together with the
    structural edges they over-constrain the sheet, and crumpled
    configurations become stable infeasible attractors of the projection,
    which would break the post-step constraint tolerance.
    """
    p = np.asarray(positions, dtype=np.float64)
    idx = np.arange(rows * cols).reshape(rows, cols)
    edges, rest = [], []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((idx[r, c], idx[r, c + 1])); rest.append(spacing)
            if r + 1 < rows:
                edges.append((idx[r, c], idx[r + 1, c])); rest.append(spacing)
    return DeformableState(p, "grid", np.asarray(edges), np.asarray(rest),
                           grid_shape=(rows, cols))


# -- compiled kernels ----------------------------------------------------------


@njit(cache=True)
def _sweep(pos, ei, ej, rest, pinned, pin_x, pin_y):
    for k in range(ei.shape[0]):
        i = ei[k]
        j = ej[k]
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        length = math.sqrt(dx * dx + dy * dy)
        if length < 1e-12:
            length = 1e-12
        f = (length - rest[k]) / length
        if i == pinned:
            pos[j, 0] -= f * dx
            pos[j, 1] -= f * dy
        elif j == pinned:
            pos[i, 0] += f * dx
            pos[i, 1] += f * dy
        else:
            pos[i, 0] += 0.5 * f * dx
            pos[i, 1] += 0.5 * f * dy
            pos[j, 0] -= 0.5 * f * dx
            pos[j, 1] -= 0.5 * f * dy
    for p in range(pos.shape[0]):
        for d in range(2):
            if pos[p, d] < 0.0:
                pos[p, d] = 0.0
            elif pos[p, d] > 1.0:
                pos[p, d] = 1.0
    if pinned >= 0:
        pos[pinned, 0] = pin_x
        pos[pinned, 1] = pin_y


@njit(cache=True)
def _project(pos, ei, ej, rest, iterations, pinned, pin_x, pin_y):
    for _ in range(iterations):
        _sweep(pos, ei, ej, rest, pinned, pin_x, pin_y)


@njit(cache=True)
def _max_violation(pos, ei, ej, rest):
    worst = 0.0
    for k in range(ei.shape[0]):
        dx = pos[ej[k], 0] - pos[ei[k], 0]
        dy = pos[ej[k], 1] - pos[ei[k], 1]
        length = math.sqrt(dx * dx + dy * dy)
        rel = abs(length - rest[k]) / rest[k]
        if rel > worst:
            worst = rel
    return worst


@njit(cache=True)
def _relax(pos, ei, ej, rest, tol, max_sweeps):
    for _ in range(max_sweeps):
        if _max_violation(pos, ei, ej, rest) <= tol:
            break
        _sweep(pos, ei, ej, rest, -1, 0.0, 0.0)


@njit(cache=True)
def _drag(pos, ei, ej, rest, particle, tx, ty, substeps, iterations,
          tol, relax_max):
    sx = pos[particle, 0]
    sy = pos[particle, 1]
    dx = tx - sx
    dy = ty - sy
    for s in range(1, substeps + 1):
        wx = sx + dx * (s / substeps)
        wy = sy + dy * (s / substeps)
        pos[particle, 0] = wx
        pos[particle, 1] = wy
        _project(pos, ei, ej, rest, iterations, particle, wx, wy)
    _relax(pos, ei, ej, rest, tol, relax_max)


# -- public operations -----------------------------------------------------------


def project_constraints(state: DeformableState, iterations: int,
                        pinned: int | None = None,
                        pin_position: np.ndarray | None = None) -> None:
    """Run `iterations` Gauss-Seidel sweeps over the constraints in place.

    A pinned particle has infinite mass: corrections move only its
    neighbor and its position is restored after every sweep. All
    particles are clamped to the unit workspace.
    """
    if len(state.edges) == 0:
        np.clip(state.positions, 0.0, 1.0, out=state.positions)
        return
    if pinned is None:
        pin, px, py = -1, 0.0, 0.0
    else:
        pin = int(pinned)
        pos = state.positions[pin] if pin_position is None else pin_position
        px, py = float(pos[0]), float(pos[1])
    _project(state.positions, state._ei, state._ej, state.rest_lengths,
             int(iterations), pin, px, py)


def max_constraint_violation(state: DeformableState) -> float:
    """Largest relative deviation of any edge from its rest length."""
    if len(state.edges) == 0:
        return 0.0
    return float(_max_violation(state.positions, state._ei, state._ej,
                                state.rest_lengths))


def relax(state: DeformableState, max_sweeps: int = 5000) -> None:
    """Sweep until violation drops below half the tolerance (or the cap).

    Gauss-Seidel propagation along a chain is diffusive, so a badly
    stretched object can need a few hundred sweeps; the early exit keeps
    the common case cheap.
    """
    if len(state.edges) == 0:
        return
    _relax(state.positions, state._ei, state._ej, state.rest_lengths,
           CONSTRAINT_TOLERANCE / 2, int(max_sweeps))


def drag_particle(state: DeformableState, particle: int, target: np.ndarray,
                  substeps: int, iterations: int) -> None:
    """Drag one particle to `target` along a straight path, in place.

    The grasped particle is pinned at interpolated waypoints with
    ``iterations`` projection sweeps per substep; after release the object
    relaxes to constraint tolerance. A zero-length drag is a no-op so the
    state stays bit-identical.
    """
    target = np.clip(np.asarray(target, dtype=np.float64), 0.0, 1.0)
    start = state.positions[int(particle)]
    if abs(float(target[0]) - start[0]) < 1e-12 and \
       abs(float(target[1]) - start[1]) < 1e-12:
        return
    if len(state.edges) == 0:
        state.positions[int(particle)] = target
        return
    _drag(state.positions, state._ei, state._ej, state.rest_lengths,
          int(particle), float(target[0]), float(target[1]),
          int(substeps), int(iterations), CONSTRAINT_TOLERANCE / 2, 5000)
