"""Learned-dynamics soft-tissue manipulation in image space.

A 2-D mass-spring-damper tissue simulator, a small learned dynamics network,
a random-shooting receding-horizon controller, reinforcement-learning and
learning-from-demonstration agent loops, a demonstration store, and a
teleoperation service for collecting human demonstrations.
"""

from .state import (
    ControlInput,
    DimensionError,
    Experience,
    FeatureObservation,
    ImagePoint,
    Rect,
    TaskSpec,
    apply_input,
    mpc_cost,
    positioning_error,
)

__all__ = [
    "ControlInput",
    "DimensionError",
    "Experience",
    "FeatureObservation",
    "ImagePoint",
    "Rect",
    "TaskSpec",
    "apply_input",
    "mpc_cost",
    "positioning_error",
]

__version__ = "0.1.0"
