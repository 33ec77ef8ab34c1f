from .pbd import (
    DeformableState,
    closed_chain,
    cloth_grid,
    drag_particle,
    max_constraint_violation,
    open_chain,
    project_constraints,
)
from .tasks import FAMILIES, ObjectGeometry, TaskSpec, make_task, sample_keypoints
from .raster import pixels_to_workspace, rasterize, workspace_to_pixels
from .env import (
    DEFAULT_SUCCESS_THRESHOLD,
    MAX_EPISODE_STEPS,
    Observation,
    RearrangeEnv,
    StepResult,
    reward,
    scrambled_reset,
    success,
)

__all__ = [
    "DeformableState", "open_chain", "closed_chain", "cloth_grid",
    "project_constraints", "max_constraint_violation", "drag_particle",
    "FAMILIES", "ObjectGeometry", "TaskSpec", "make_task", "sample_keypoints",
    "rasterize", "workspace_to_pixels", "pixels_to_workspace",
    "DEFAULT_SUCCESS_THRESHOLD", "MAX_EPISODE_STEPS", "Observation",
    "RearrangeEnv", "StepResult", "reward", "success", "scrambled_reset",
]
