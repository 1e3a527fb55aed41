"""Random-shooting receding-horizon controller over the learned dynamics.

Each control period the planner samples candidate action sequences (or
enumerates them all when the space is small), rolls every candidate through
the dynamics model, scores the predicted tissue positions after every prefix,
and returns the globally best (sequence, prefix length) pair. Only the first
action is executed; the next period re-plans from the fresh observation.

Actions are discrete: per gripper one of five unit primitives (stop and the
four axis directions), scaled by a step size scheduled from the current
positioning error.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .state import (
    ControlInput,
    DimensionError,
    FeatureObservation,
    Rect,
    TaskSpec,
    mpc_cost,
    positioning_error,
    workspace_bounds,
)

__all__ = [
    "PRIMITIVES",
    "PlanningFailed",
    "RolloutDiverged",
    "MpcConfig",
    "PlanResult",
    "num_joint_actions",
    "flat_to_joint",
    "joint_to_flat",
    "joint_displacement",
    "step_scale",
    "rollout",
    "plan",
    "control_step",
]

# Unit moves per gripper: stop, then one step along each image axis direction.
PRIMITIVES = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
NUM_PRIMITIVES = 5


class PlanningFailed(RuntimeError):
    """Every candidate rollout diverged; no plan is available this period."""


class RolloutDiverged(RuntimeError):
    """The dynamics model produced a non-finite prediction mid-rollout."""


def num_joint_actions(m: int) -> int:
    return NUM_PRIMITIVES ** m


def flat_to_joint(flat: int, m: int) -> tuple[int, ...]:
    """Decode a flat joint-action index into per-gripper primitive indices.

    Gripper 0 takes the most significant digit, so numeric order of the flat
    index equals lexicographic order of the tuple.
    """
    digits = []
    for _ in range(m):
        digits.append(flat % NUM_PRIMITIVES)
        flat //= NUM_PRIMITIVES
    return tuple(reversed(digits))


def joint_to_flat(joint: Sequence[int]) -> int:
    flat = 0
    for d in joint:
        flat = flat * NUM_PRIMITIVES + int(d)
    return flat


@lru_cache(maxsize=8)
def _joint_table(m: int) -> np.ndarray:
    """(5^m, 2m) table of unit displacements for every joint action."""
    table = np.zeros((num_joint_actions(m), 2 * m))
    for flat in range(table.shape[0]):
        joint = flat_to_joint(flat, m)
        for g, prim in enumerate(joint):
            table[flat, 2 * g: 2 * g + 2] = PRIMITIVES[prim]
    table.setflags(write=False)
    return table


def joint_displacement(joint: Sequence[int], step: float) -> np.ndarray:
    """Pixel displacement vector (2M,) for a joint action at a step size."""
    return _joint_table(len(joint))[joint_to_flat(joint)] * step


@dataclass(frozen=True)
class MpcConfig:
    """Planner settings: horizon, candidate budget, and the step schedule."""

    horizon: int = 5
    num_candidates: int = 5000
    control_dt: float = 0.5
    error_thresholds: tuple[float, ...] = (150.0, 70.0)
    step_sizes: tuple[float, ...] = (5.0, 2.0, 1.0)
    exhaustive: bool = False
    max_exhaustive: int = 200_000

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.num_candidates < 1:
            raise ValueError("need at least one candidate")
        if len(self.step_sizes) != len(self.error_thresholds) + 1:
            raise ValueError("need one more step size than thresholds")
        if list(self.error_thresholds) != sorted(self.error_thresholds, reverse=True) or \
                len(set(self.error_thresholds)) != len(self.error_thresholds):
            raise ValueError("thresholds must be strictly decreasing")
        if list(self.step_sizes) != sorted(self.step_sizes, reverse=True) or \
                len(set(self.step_sizes)) != len(self.step_sizes) or self.step_sizes[-1] <= 0:
            raise ValueError("step sizes must be strictly decreasing and positive")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "num_candidates": self.num_candidates,
            "control_dt": self.control_dt,
            "error_thresholds": list(self.error_thresholds),
            "step_sizes": list(self.step_sizes),
            "exhaustive": self.exhaustive,
            "max_exhaustive": self.max_exhaustive,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MpcConfig":
        d = dict(d)
        if "error_thresholds" in d:
            d["error_thresholds"] = tuple(d["error_thresholds"])
        if "step_sizes" in d:
            d["step_sizes"] = tuple(d["step_sizes"])
        return cls(**d)


def step_scale(error: float, config: MpcConfig) -> float:
    """Step size for the current positioning error.

    Defaults: above 150 px move 5 px per action to close distance quickly;
    between 150 and 70 move 2 px; below 70 move single pixels to settle.
    """
    if error < 0:
        raise ValueError("error must be non-negative")
    ths = config.error_thresholds
    steps = config.step_sizes
    if error > ths[0]:
        return steps[0]
    for i in range(1, len(ths)):
        if error >= ths[i]:
            return steps[i]
    return steps[-1]


@dataclass(frozen=True)
class PlanResult:
    """Winner of one planning solve.

    ``actions`` holds the optimal prefix (length ``h_star + 1``) of the best
    candidate; ``trajectory`` is the predicted tissue positions from the
    current state through each planned step; ``step`` is the pixel scale the
    plan was rolled out with.
    """

    actions: tuple[tuple[int, ...], ...]
    h_star: int
    predicted_cost: float
    trajectory: np.ndarray
    step: float

    def first_input(self) -> ControlInput:
        return ControlInput(tuple(joint_displacement(self.actions[0], self.step)))


def rollout(
    model,
    tissue_pos: np.ndarray,
    gripper_pos: np.ndarray,
    actions: Sequence[Sequence[int]],
    step: float,
    task: TaskSpec,
    workspaces: Sequence[Rect],
) -> tuple[np.ndarray, np.ndarray]:
    """Propagate one action sequence through the model.

    Per step: the model predicts the tissue displacement from the current
    (tissue, gripper, input) triple, the tissue advances by it, and the
    gripper advances by the input clamped to its workspace. Returns the
    tissue trajectory (len+1, 2K) and the cost after each prefix (len,).
    """
    if len(actions) == 0:
        raise ValueError("action sequence must be non-empty")
    tissue = np.asarray(tissue_pos, dtype=float).copy()
    gripper = np.asarray(gripper_pos, dtype=float).copy()
    lo, hi = workspace_bounds(workspaces)
    trajectory = np.empty((len(actions) + 1, tissue.size))
    trajectory[0] = tissue
    costs = np.empty(len(actions))
    for h, joint in enumerate(actions):
        inp = joint_displacement(joint, step)
        delta = model.predict(tissue, gripper, inp)
        if not np.all(np.isfinite(delta)):
            raise RolloutDiverged(f"non-finite prediction at step {h}")
        tissue = tissue + delta
        gripper = np.clip(gripper + inp, lo, hi)
        trajectory[h + 1] = tissue
        costs[h] = mpc_cost(tissue, task)
    return trajectory, costs


def _enumerate_sequences(m: int, horizon: int) -> np.ndarray:
    """All joint-action index sequences, shape (5^(m*horizon), horizon).

    Row order is lexicographic in the sequence, which is what tie-breaking
    sorts by.
    """
    na = num_joint_actions(m)
    total = na ** horizon
    seqs = np.empty((total, horizon), dtype=np.int64)
    for h in range(horizon):
        block = na ** (horizon - 1 - h)
        seqs[:, h] = (np.arange(total) // block) % na
    return seqs


def plan(
    model,
    observation: FeatureObservation,
    task: TaskSpec,
    config: MpcConfig,
    rng: np.random.Generator,
    workspaces: Sequence[Rect],
    step_override: float | None = None,
) -> PlanResult:
    """One planning solve from a fresh observation.

    Candidates are i.i.d. uniform joint actions per step; when the exhaustive
    flag is set (and the space is feasibly small) or the candidate budget
    covers the whole space, every sequence is evaluated instead. The winner
    minimizes the cost over all (candidate, prefix) pairs; ties prefer the
    shorter prefix, then the lexicographically smaller action sequence.
    Candidates whose rollout turns non-finite are discarded.
    """
    m = observation.m
    if task.k != observation.k:
        raise DimensionError("observation and task disagree on tissue-point count")
    tissue0 = observation.tissue_vector()
    gripper0 = observation.gripper_vector()

    current_cost = float(mpc_cost(tissue0, task))
    error = positioning_error(observation, task)
    step = float(step_override) if step_override is not None else step_scale(error, config)
    if current_cost == 0.0:
        stop = (0,) * m
        return PlanResult(
            actions=(stop,), h_star=0, predicted_cost=0.0,
            trajectory=np.array([tissue0]), step=step,
        )

    na = num_joint_actions(m)
    total = na ** config.horizon
    if config.exhaustive:
        if total > config.max_exhaustive:
            raise ValueError(
                f"exhaustive planning over {total} sequences exceeds the budget {config.max_exhaustive}"
            )
        seqs = _enumerate_sequences(m, config.horizon)
    elif config.num_candidates >= total:
        seqs = _enumerate_sequences(m, config.horizon)
    else:
        seqs = rng.integers(0, na, size=(config.num_candidates, config.horizon))

    table = _joint_table(m)
    lo, hi = workspace_bounds(workspaces)
    n = seqs.shape[0]
    tissue = np.broadcast_to(tissue0, (n, tissue0.size)).copy()
    gripper = np.broadcast_to(gripper0, (n, gripper0.size)).copy()
    costs = np.empty((n, config.horizon))
    trajectories = np.empty((n, config.horizon + 1, tissue0.size))
    trajectories[:, 0] = tissue
    dead = np.zeros(n, dtype=bool)
    desired = task.desired_vector()
    for h in range(config.horizon):
        inp = table[seqs[:, h]] * step
        delta = model.predict(tissue, gripper, inp)
        bad = ~np.all(np.isfinite(delta), axis=1)
        if bad.any():
            delta = np.where(bad[:, None], 0.0, delta)
            dead |= bad
        tissue = tissue + delta
        # freeze diverged rows at a finite value so later predictions stay legal
        tissue[dead] = 0.0
        gripper = np.clip(gripper + inp, lo, hi)
        trajectories[:, h + 1] = tissue
        res = desired - tissue
        costs[:, h] = np.sum(res * res, axis=1)
    costs[dead, :] = np.inf

    best_cost = costs.min()
    if not np.isfinite(best_cost):
        raise PlanningFailed("all candidate rollouts diverged")
    cand_idx, h_idx = np.nonzero(costs == best_cost)
    best = min(
        zip(cand_idx.tolist(), h_idx.tolist()),
        key=lambda ch: (ch[1], tuple(seqs[ch[0], : ch[1] + 1].tolist())),
    )
    c, h = best
    actions = tuple(flat_to_joint(int(f), m) for f in seqs[c, : h + 1])
    return PlanResult(
        actions=actions,
        h_star=h,
        predicted_cost=float(costs[c, h]),
        trajectory=trajectories[c, : h + 2].copy(),
        step=step,
    )


def control_step(
    model,
    observation: FeatureObservation,
    task: TaskSpec,
    config: MpcConfig,
    rng: np.random.Generator,
    workspaces: Sequence[Rect],
    step_override: float | None = None,
) -> tuple[ControlInput, PlanResult]:
    """Plan and return the first input of the optimal sequence.

    Only the first action is applied per period; the rest of the plan is
    discarded and the controller re-plans from the next observation.
    """
    result = plan(model, observation, task, config, rng, workspaces, step_override=step_override)
    return result.first_input(), result
