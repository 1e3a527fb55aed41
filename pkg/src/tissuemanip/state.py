"""Image-space state, control, and cost primitives shared by the whole stack.

Everything downstream (simulator, dynamics model, planner, agent loops)
speaks pixel coordinates: x grows rightward, y grows downward, matching the
camera image. All types here are immutable values; the operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ImagePoint",
    "Rect",
    "FeatureObservation",
    "ControlInput",
    "TaskSpec",
    "Experience",
    "positioning_error",
    "mpc_cost",
    "apply_input",
    "workspace_bounds",
]


class DimensionError(ValueError):
    """A vector's length disagrees with the session's point/gripper layout."""


def _finite_tuple(values: Iterable[float], what: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    if not all(math.isfinite(v) for v in out):
        raise ValueError(f"{what} contains non-finite values: {out}")
    return out


@dataclass(frozen=True)
class ImagePoint:
    """A pixel position in the camera image."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite image point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle; used for per-gripper workspaces."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"degenerate rectangle {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def clamp(self, x: float, y: float) -> tuple[float, float]:
        return (
            min(max(x, self.x_min), self.x_max),
            min(max(y, self.y_min), self.y_max),
        )


def _points_tuple(points: Iterable[ImagePoint]) -> tuple[ImagePoint, ...]:
    pts = tuple(points)
    if not all(isinstance(p, ImagePoint) for p in pts):
        raise TypeError("expected ImagePoint instances")
    return pts


def _flatten(points: Sequence[ImagePoint]) -> np.ndarray:
    out = np.empty(2 * len(points), dtype=float)
    for i, p in enumerate(points):
        out[2 * i] = p.x
        out[2 * i + 1] = p.y
    return out


def _unflatten(vec: np.ndarray) -> tuple[ImagePoint, ...]:
    vec = np.asarray(vec, dtype=float).reshape(-1)
    if vec.size % 2 != 0:
        raise DimensionError(f"point vector length {vec.size} is odd")
    return tuple(ImagePoint(vec[2 * i], vec[2 * i + 1]) for i in range(vec.size // 2))


@dataclass(frozen=True)
class FeatureObservation:
    """Pixel positions of all tissue points and gripper wrists at one instant.

    Ordering of both lists stays fixed across frames (label consistency); the
    number of tissue points K and grippers M is constant within a session.
    """

    tissue_points: tuple[ImagePoint, ...]
    gripper_wrists: tuple[ImagePoint, ...]
    timestamp: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "tissue_points", _points_tuple(self.tissue_points))
        object.__setattr__(self, "gripper_wrists", _points_tuple(self.gripper_wrists))

    @property
    def k(self) -> int:
        return len(self.tissue_points)

    @property
    def m(self) -> int:
        return len(self.gripper_wrists)

    def tissue_vector(self) -> np.ndarray:
        """Flat [x0, y0, x1, y1, ...] pixel vector of the tissue points."""
        return _flatten(self.tissue_points)

    def gripper_vector(self) -> np.ndarray:
        return _flatten(self.gripper_wrists)

    @classmethod
    def from_vectors(cls, tissue: np.ndarray, grippers: np.ndarray, timestamp: float) -> "FeatureObservation":
        return cls(_unflatten(tissue), _unflatten(grippers), float(timestamp))


@dataclass(frozen=True)
class ControlInput:
    """Per-gripper pixel displacement commanded over one control period.

    ``displacements`` is the flat [dx0, dy0, dx1, dy1, ...] vector of length
    2M; within the control stack each gripper's entry is one of the five
    action primitives scaled by the current step size.
    """

    displacements: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "displacements", _finite_tuple(self.displacements, "control input")
        )
        if len(self.displacements) % 2 != 0:
            raise DimensionError("control input length must be even (2 per gripper)")

    @property
    def m(self) -> int:
        return len(self.displacements) // 2

    def as_array(self) -> np.ndarray:
        return np.array(self.displacements, dtype=float)

    @classmethod
    def zero(cls, m: int) -> "ControlInput":
        return cls((0.0,) * (2 * m))


@dataclass(frozen=True)
class TaskSpec:
    """Desired tissue-point positions plus the success threshold and image bounds."""

    desired_points: tuple[ImagePoint, ...]
    success_threshold: float
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "desired_points", _points_tuple(self.desired_points))
        if not self.success_threshold > 0:
            raise ValueError("success threshold must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def k(self) -> int:
        return len(self.desired_points)

    def desired_vector(self) -> np.ndarray:
        return _flatten(self.desired_points)


@dataclass(frozen=True)
class Experience:
    """One (tissue positions, gripper positions, input, tissue displacement) tuple.

    The unit of the replay memory; ``tissue_delta`` is the tissue-point
    displacement over one control period, in pixels per period.
    """

    tissue_pos: tuple[float, ...]
    gripper_pos: tuple[float, ...]
    input: tuple[float, ...]
    tissue_delta: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tissue_pos", _finite_tuple(self.tissue_pos, "tissue_pos"))
        object.__setattr__(self, "gripper_pos", _finite_tuple(self.gripper_pos, "gripper_pos"))
        object.__setattr__(self, "input", _finite_tuple(self.input, "input"))
        object.__setattr__(self, "tissue_delta", _finite_tuple(self.tissue_delta, "tissue_delta"))
        if len(self.tissue_pos) != len(self.tissue_delta):
            raise DimensionError("tissue_pos and tissue_delta lengths differ")
        if len(self.input) != len(self.gripper_pos):
            raise DimensionError("input and gripper_pos lengths differ")
        if len(self.tissue_pos) % 2 != 0 or len(self.gripper_pos) % 2 != 0:
            raise DimensionError("position vectors must have even length")


def positioning_error(tissue: FeatureObservation, task: TaskSpec) -> float:
    """Sum of per-point Euclidean distances to the desired positions, in pixels.

    This is the quantity reported on learning curves, used by the step-size
    schedule, and compared against the success threshold.
    """
    if tissue.k != task.k:
        raise DimensionError(f"observation has {tissue.k} tissue points, task expects {task.k}")
    diff = (tissue.tissue_vector() - task.desired_vector()).reshape(-1, 2)
    return float(np.sqrt(np.sum(diff * diff, axis=1)).sum())


def mpc_cost(predicted_tissue: np.ndarray, task: TaskSpec) -> float | np.ndarray:
    """Squared 2-norm of the residual to the desired positions, in pixels².

    The planner's objective. Accepts a flat length-2K vector or a batch of
    them (..., 2K); the batch form returns one cost per row.
    """
    pred = np.asarray(predicted_tissue, dtype=float)
    if pred.shape[-1] != 2 * task.k:
        raise DimensionError(f"predicted vector has length {pred.shape[-1]}, expected {2 * task.k}")
    res = task.desired_vector() - pred
    cost = np.sum(res * res, axis=-1)
    return float(cost) if pred.ndim == 1 else cost


def workspace_bounds(workspaces: Sequence[Rect]) -> tuple[np.ndarray, np.ndarray]:
    """Per-component (lo, hi) clamp vectors of length 2M for a workspace list."""
    lo = np.empty(2 * len(workspaces), dtype=float)
    hi = np.empty(2 * len(workspaces), dtype=float)
    for i, ws in enumerate(workspaces):
        lo[2 * i], lo[2 * i + 1] = ws.x_min, ws.y_min
        hi[2 * i], hi[2 * i + 1] = ws.x_max, ws.y_max
    return lo, hi


def apply_input(
    gripper_pos: np.ndarray,
    control: "ControlInput | np.ndarray",
    workspaces: Sequence[Rect],
) -> np.ndarray:
    """Advance gripper pixel positions by a displacement, clamped per workspace.

    ``gripper_pos`` may be a flat length-2M vector or a batch (..., 2M);
    clamping absorbs out-of-range commands, so repeated outward inputs hold
    the gripper at the workspace edge.
    """
    pos = np.asarray(gripper_pos, dtype=float)
    disp = control.as_array() if isinstance(control, ControlInput) else np.asarray(control, dtype=float)
    if pos.shape[-1] != 2 * len(workspaces) or disp.shape[-1] != pos.shape[-1]:
        raise DimensionError(
            f"gripper vector length {pos.shape[-1]}, input length {disp.shape[-1]}, "
            f"workspaces for {len(workspaces)} grippers"
        )
    lo, hi = workspace_bounds(workspaces)
    return np.clip(pos + disp, lo, hi)
