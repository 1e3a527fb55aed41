"""2-D mass-spring-damper soft-tissue simulator with gripper attraction.

The tissue is a rectangular node grid joined by structural (4-neighbor) and
diagonal shear springs; boundary nodes are pinned. Grippers couple to
designated manipulation nodes through a force proportional to the
gripper-node distance, and the scene is observed through an affine
projection into image pixels — the simulator emits exact feature
observations in place of a camera + vision pipeline.

Integration is semi-implicit Euler at 1 kHz: stable for stiff springs at
this rate, and fixed nodes never move because their inverse mass is zero.
The inner loop is compiled with numba; a control period of 0.5 s costs 500
substeps, so this path is hot in every experiment.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .state import (
    ControlInput,
    DimensionError,
    FeatureObservation,
    ImagePoint,
    Rect,
    apply_input,
)

__all__ = [
    "SimulationDiverged",
    "SimConfig",
    "TissueMesh",
    "GripperState",
    "build_mesh",
    "make_grippers",
    "step",
    "observe",
    "mechanical_energy",
    "TissueEnv",
    "sample_reachable_targets",
    "default_scene",
    "load_scene",
    "save_scene",
]


class SimulationDiverged(RuntimeError):
    """Non-finite state detected; the integration blew up."""


@dataclass(frozen=True)
class SimConfig:
    """Scene description: grid geometry, material constants, projection, workspaces."""

    rows: int = 7
    cols: int = 7
    spacing: float = 55.0
    origin: tuple[float, float] = (157.0, 76.0)
    mass: float = 0.03
    stiffness: float = 1.8
    damping: float = 1.5
    attraction_gain: float = 120.0
    physics_dt: float = 0.001
    tissue_point_cells: tuple[tuple[int, int], ...] = ((2, 2), (2, 4), (4, 2), (4, 4))
    manipulation_cells: tuple[tuple[int, int], ...] = ((3, 1), (3, 5))
    projection_scale: float = 1.0
    projection_offset: tuple[float, float] = (0.0, 0.0)
    image_width: int = 644
    image_height: int = 482
    workspaces: tuple[Rect, ...] = (
        Rect(62.0, 91.0, 362.0, 391.0),
        Rect(282.0, 91.0, 582.0, 391.0),
    )
    gripper_speed_cap: float = 6.0  # px per camera frame, teleop only

    def __post_init__(self) -> None:
        if self.rows < 3 or self.cols < 3:
            raise ValueError("grid must be at least 3x3 so interior nodes exist")
        if self.physics_dt <= 0:
            raise ValueError("physics_dt must be positive")
        if self.mass <= 0 or self.stiffness <= 0 or self.damping < 0:
            raise ValueError("mass and stiffness must be positive, damping non-negative")
        if self.attraction_gain <= 0:
            raise ValueError("attraction gain must be positive")
        if self.projection_scale == 0:
            raise ValueError("projection must be invertible (nonzero scale)")
        if len(self.workspaces) != len(self.manipulation_cells):
            raise ValueError("one workspace rectangle per gripper required")

    @property
    def k(self) -> int:
        return len(self.tissue_point_cells)

    @property
    def m(self) -> int:
        return len(self.manipulation_cells)

    def project(self, sim_xy: np.ndarray) -> np.ndarray:
        return np.asarray(sim_xy, dtype=float) * self.projection_scale + np.asarray(
            self.projection_offset, dtype=float
        )

    def unproject(self, px_xy: np.ndarray) -> np.ndarray:
        return (np.asarray(px_xy, dtype=float) - np.asarray(self.projection_offset, dtype=float)) / self.projection_scale

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "spacing": self.spacing,
            "origin": list(self.origin),
            "mass": self.mass,
            "stiffness": self.stiffness,
            "damping": self.damping,
            "attraction_gain": self.attraction_gain,
            "physics_dt": self.physics_dt,
            "tissue_point_cells": [list(c) for c in self.tissue_point_cells],
            "manipulation_cells": [list(c) for c in self.manipulation_cells],
            "projection_scale": self.projection_scale,
            "projection_offset": list(self.projection_offset),
            "image_width": self.image_width,
            "image_height": self.image_height,
            "workspaces": [[w.x_min, w.y_min, w.x_max, w.y_max] for w in self.workspaces],
            "gripper_speed_cap": self.gripper_speed_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "origin" in d:
            d["origin"] = tuple(d["origin"])
        if "projection_offset" in d:
            d["projection_offset"] = tuple(d["projection_offset"])
        if "tissue_point_cells" in d:
            d["tissue_point_cells"] = tuple(tuple(c) for c in d["tissue_point_cells"])
        if "manipulation_cells" in d:
            d["manipulation_cells"] = tuple(tuple(c) for c in d["manipulation_cells"])
        if "workspaces" in d:
            d["workspaces"] = tuple(Rect(*w) for w in d["workspaces"])
        return cls(**d)

    def scene_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def default_scene() -> SimConfig:
    return SimConfig()


def load_scene(path: str | Path) -> SimConfig:
    return SimConfig.from_dict(json.loads(Path(path).read_text()))


def save_scene(config: SimConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))


@dataclass
class TissueMesh:
    """Node and spring state of the simulated tissue.

    Arrays are the authoritative state; ``inv_mass`` is zero for fixed
    boundary nodes, which is what pins them under any force.
    """

    pos: np.ndarray          # (N, 2) sim units
    vel: np.ndarray          # (N, 2) sim units / s
    mass: np.ndarray         # (N,)
    inv_mass: np.ndarray     # (N,), 0 for fixed nodes
    fixed: np.ndarray        # (N,) bool
    spring_a: np.ndarray     # (S,) int
    spring_b: np.ndarray     # (S,) int
    spring_k: np.ndarray     # (S,)
    spring_c: np.ndarray     # (S,)
    spring_rest: np.ndarray  # (S,)
    tissue_nodes: np.ndarray       # (K,) int
    manipulation_nodes: np.ndarray  # (M,) int
    rows: int
    cols: int
    time: float = 0.0

    @property
    def num_nodes(self) -> int:
        return self.pos.shape[0]

    @property
    def num_springs(self) -> int:
        return self.spring_a.shape[0]

    def clone(self) -> "TissueMesh":
        return TissueMesh(
            pos=self.pos.copy(), vel=self.vel.copy(),
            mass=self.mass, inv_mass=self.inv_mass, fixed=self.fixed,
            spring_a=self.spring_a, spring_b=self.spring_b,
            spring_k=self.spring_k, spring_c=self.spring_c, spring_rest=self.spring_rest,
            tissue_nodes=self.tissue_nodes, manipulation_nodes=self.manipulation_nodes,
            rows=self.rows, cols=self.cols, time=self.time,
        )


@dataclass
class GripperState:
    """One robot wrist: a point that attracts its manipulation node."""

    pos: np.ndarray          # (2,) sim units
    target_node: int
    attraction_gain: float

    def __post_init__(self) -> None:
        self.pos = np.asarray(self.pos, dtype=float).reshape(2).copy()
        if self.attraction_gain <= 0:
            raise ValueError("attraction gain must be positive")

    def copy(self) -> "GripperState":
        return GripperState(self.pos.copy(), self.target_node, self.attraction_gain)


def build_mesh(config: SimConfig) -> TissueMesh:
    """Construct the rest-state grid mesh described by a scene config.

    All springs are built at their construction length, so the fresh mesh is
    in equilibrium: zero net spring force everywhere.
    """
    rows, cols = config.rows, config.cols
    n = rows * cols

    def idx(r: int, c: int) -> int:
        return r * cols + c

    pos = np.empty((n, 2))
    for r in range(rows):
        for c in range(cols):
            pos[idx(r, c)] = (config.origin[0] + c * config.spacing,
                              config.origin[1] + r * config.spacing)

    fixed = np.zeros(n, dtype=bool)
    fixed[[idx(r, c) for r in range(rows) for c in range(cols) if r in (0, rows - 1) or c in (0, cols - 1)]] = True

    pairs: list[tuple[int, int]] = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                pairs.append((idx(r, c), idx(r, c + 1)))
            if r + 1 < rows:
                pairs.append((idx(r, c), idx(r + 1, c)))
            if r + 1 < rows and c + 1 < cols:
                pairs.append((idx(r, c), idx(r + 1, c + 1)))      # shear
                pairs.append((idx(r, c + 1), idx(r + 1, c)))      # shear
    spring_a = np.array([a for a, _ in pairs], dtype=np.int64)
    spring_b = np.array([b for _, b in pairs], dtype=np.int64)
    rest = np.sqrt(np.sum((pos[spring_b] - pos[spring_a]) ** 2, axis=1))

    def feature_nodes(cells: Sequence[tuple[int, int]], what: str) -> np.ndarray:
        out = []
        for r, c in cells:
            if not (0 <= r < rows and 0 <= c < cols):
                raise ValueError(f"{what} cell ({r},{c}) outside the {rows}x{cols} grid")
            if r in (0, rows - 1) or c in (0, cols - 1):
                raise ValueError(f"{what} cell ({r},{c}) lies on the fixed boundary")
            out.append(idx(r, c))
        return np.array(out, dtype=np.int64)

    tissue_nodes = feature_nodes(config.tissue_point_cells, "tissue point")
    manipulation_nodes = feature_nodes(config.manipulation_cells, "manipulation")
    combined = np.concatenate([tissue_nodes, manipulation_nodes])
    if len(set(combined.tolist())) != combined.size:
        raise ValueError("tissue-point and manipulation nodes must be distinct")

    mass = np.full(n, config.mass)
    inv_mass = np.where(fixed, 0.0, 1.0 / mass)

    return TissueMesh(
        pos=pos, vel=np.zeros((n, 2)), mass=mass, inv_mass=inv_mass, fixed=fixed,
        spring_a=spring_a, spring_b=spring_b,
        spring_k=np.full(len(pairs), config.stiffness),
        spring_c=np.full(len(pairs), config.damping),
        spring_rest=rest,
        tissue_nodes=tissue_nodes, manipulation_nodes=manipulation_nodes,
        rows=rows, cols=cols,
    )


def make_grippers(mesh: TissueMesh, config: SimConfig) -> list[GripperState]:
    """Grippers placed exactly on their manipulation nodes (zero initial force)."""
    return [
        GripperState(mesh.pos[node].copy(), int(node), config.attraction_gain)
        for node in mesh.manipulation_nodes
    ]


@njit(cache=True)
def _advance_kernel(pos, vel, inv_mass, sa, sb, sk, sc, srest, mnodes, gains,
                    g_start, g_end, nsteps, dt, force):
    """Semi-implicit Euler substeps; grippers move linearly start -> end."""
    nn = pos.shape[0]
    ns = sa.shape[0]
    nm = mnodes.shape[0]
    for s in range(nsteps):
        for i in range(nn):
            force[i, 0] = 0.0
            force[i, 1] = 0.0
        for j in range(ns):
            a = sa[j]
            b = sb[j]
            dx = pos[b, 0] - pos[a, 0]
            dy = pos[b, 1] - pos[a, 1]
            ln = math.sqrt(dx * dx + dy * dy)
            if ln > 0.0:
                ux = dx / ln
                uy = dy / ln
                rv = (vel[b, 0] - vel[a, 0]) * ux + (vel[b, 1] - vel[a, 1]) * uy
                f = sk[j] * (ln - srest[j]) + sc[j] * rv
                fx = f * ux
                fy = f * uy
                force[a, 0] += fx
                force[a, 1] += fy
                force[b, 0] -= fx
                force[b, 1] -= fy
        frac = (s + 1.0) / nsteps
        for g in range(nm):
            node = mnodes[g]
            gx = g_start[g, 0] + (g_end[g, 0] - g_start[g, 0]) * frac
            gy = g_start[g, 1] + (g_end[g, 1] - g_start[g, 1]) * frac
            force[node, 0] += gains[g] * (gx - pos[node, 0])
            force[node, 1] += gains[g] * (gy - pos[node, 1])
        for i in range(nn):
            vel[i, 0] += dt * force[i, 0] * inv_mass[i]
            vel[i, 1] += dt * force[i, 1] * inv_mass[i]
            pos[i, 0] += dt * vel[i, 0]
            pos[i, 1] += dt * vel[i, 1]


def _advance_in_place(mesh: TissueMesh, grippers: Sequence[GripperState],
                      n_steps: int, dt: float,
                      gripper_end: np.ndarray | None = None) -> None:
    """Run the kernel on a mesh's own arrays; grippers land on gripper_end."""
    if n_steps <= 0:
        return
    nm = len(grippers)
    g_start = np.empty((nm, 2))
    gains = np.empty(nm)
    for i, g in enumerate(grippers):
        g_start[i] = g.pos
        gains[i] = g.attraction_gain
    g_end = g_start.copy() if gripper_end is None else np.asarray(gripper_end, dtype=float).reshape(nm, 2)
    force = np.empty_like(mesh.pos)
    _advance_kernel(mesh.pos, mesh.vel, mesh.inv_mass,
                    mesh.spring_a, mesh.spring_b, mesh.spring_k, mesh.spring_c, mesh.spring_rest,
                    mesh.manipulation_nodes, gains, g_start, g_end,
                    n_steps, dt, force)
    for i, g in enumerate(grippers):
        g.pos = g_end[i].copy()
    mesh.time += n_steps * dt
    if not np.all(np.isfinite(mesh.pos)) or not np.all(np.isfinite(mesh.vel)):
        raise SimulationDiverged(f"non-finite mesh state at t={mesh.time:.3f}s")


def step(mesh: TissueMesh, grippers: Sequence[GripperState], dt: float) -> TissueMesh:
    """One integration substep; returns a new mesh, inputs untouched."""
    out = mesh.clone()
    _advance_in_place(out, [g.copy() for g in grippers], 1, dt)
    return out


def spring_forces(mesh: TissueMesh) -> np.ndarray:
    """Net spring force per node for the current configuration (diagnostics)."""
    d = mesh.pos[mesh.spring_b] - mesh.pos[mesh.spring_a]
    ln = np.sqrt(np.sum(d * d, axis=1))
    ux = np.where(ln > 0, d[:, 0] / ln, 0.0)
    uy = np.where(ln > 0, d[:, 1] / ln, 0.0)
    rel = (mesh.vel[mesh.spring_b] - mesh.vel[mesh.spring_a])
    rv = rel[:, 0] * ux + rel[:, 1] * uy
    f = mesh.spring_k * (ln - mesh.spring_rest) + mesh.spring_c * rv
    out = np.zeros_like(mesh.pos)
    np.add.at(out[:, 0], mesh.spring_a, f * ux)
    np.add.at(out[:, 1], mesh.spring_a, f * uy)
    np.add.at(out[:, 0], mesh.spring_b, -f * ux)
    np.add.at(out[:, 1], mesh.spring_b, -f * uy)
    return out


def mechanical_energy(mesh: TissueMesh, grippers: Sequence[GripperState] = ()) -> float:
    """Kinetic + spring potential energy, plus attraction potential if grippers given."""
    ke = 0.5 * float(np.sum(mesh.mass[:, None] * mesh.vel * mesh.vel))
    d = mesh.pos[mesh.spring_b] - mesh.pos[mesh.spring_a]
    ln = np.sqrt(np.sum(d * d, axis=1))
    pe = 0.5 * float(np.sum(mesh.spring_k * (ln - mesh.spring_rest) ** 2))
    ae = 0.0
    for g in grippers:
        dd = g.pos - mesh.pos[g.target_node]
        ae += 0.5 * g.attraction_gain * float(dd @ dd)
    return ke + pe + ae


def observe(mesh: TissueMesh, grippers: Sequence[GripperState], config: SimConfig) -> FeatureObservation:
    """Project tissue points and gripper wrists to pixels, in label order."""
    tissue_px = config.project(mesh.pos[mesh.tissue_nodes])
    gripper_px = config.project(np.array([g.pos for g in grippers]))
    return FeatureObservation(
        tissue_points=tuple(ImagePoint(p[0], p[1]) for p in tissue_px),
        gripper_wrists=tuple(ImagePoint(p[0], p[1]) for p in gripper_px),
        timestamp=mesh.time,
    )


FrameHook = Callable[[FeatureObservation, "TissueEnv"], None]


class TissueEnv:
    """A live scene: mesh + grippers behind the control-period interface.

    One control loop owns the environment; ``observe`` hands out immutable
    snapshots, ``command`` moves the grippers to their clamped pixel targets
    linearly over one control period while the physics runs underneath.
    An optional frame hook fires at the camera emulation rate (in sim time)
    so services and recorders see frames exactly as a 30 Hz camera would.
    """

    def __init__(
        self,
        config: SimConfig,
        control_dt: float = 0.5,
        frame_hook: FrameHook | None = None,
        frame_rate: float = 30.0,
    ):
        if control_dt <= 0 or control_dt < config.physics_dt:
            raise ValueError("control period must cover at least one physics step")
        self.config = config
        self.control_dt = control_dt
        self.frame_rate = frame_rate
        self.frame_hook = frame_hook
        self.mesh = build_mesh(config)
        self.grippers = make_grippers(self.mesh, config)
        self._step_count = 0
        self._frame_count = 0
        self._initial = self.snapshot()

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def workspaces(self) -> tuple[Rect, ...]:
        return self.config.workspaces

    @property
    def scene_hash(self) -> str:
        return self.config.scene_hash()

    @property
    def substeps_per_period(self) -> int:
        return max(1, round(self.control_dt / self.config.physics_dt))

    def observe(self) -> FeatureObservation:
        return observe(self.mesh, self.grippers, self.config)

    def gripper_pixels(self) -> np.ndarray:
        return self.config.project(np.array([g.pos for g in self.grippers])).reshape(-1)

    def snapshot(self) -> dict:
        return {
            "pos": self.mesh.pos.copy(),
            "vel": self.mesh.vel.copy(),
            "time": self.mesh.time,
            "grippers": np.array([g.pos for g in self.grippers]),
            "step_count": self._step_count,
            "frame_count": self._frame_count,
        }

    def restore(self, snap: dict) -> None:
        self.mesh.pos[:] = snap["pos"]
        self.mesh.vel[:] = snap["vel"]
        self.mesh.time = snap["time"]
        for g, p in zip(self.grippers, snap["grippers"]):
            g.pos = p.copy()
        self._step_count = snap["step_count"]
        self._frame_count = snap["frame_count"]

    def reset(self) -> None:
        """Restore the initial scene exactly (reproducible experiments)."""
        self.restore(self._initial)

    def _next_frame_step(self) -> int:
        boundary = (self._frame_count + 1) / self.frame_rate
        return max(self._step_count + 1, math.ceil(round(boundary / self.config.physics_dt, 9)))

    def steps_to_next_frame(self) -> int:
        return self._next_frame_step() - self._step_count

    def advance_steps(
        self,
        n_steps: int,
        gripper_targets_px: np.ndarray | None = None,
        use_hook: bool = True,
    ) -> None:
        """Advance physics, moving grippers linearly to absolute pixel targets.

        With a frame hook installed, the advance is chunked at camera-frame
        boundaries and the hook sees each frame's observation.
        """
        if n_steps <= 0:
            return
        start_sim = np.array([g.pos for g in self.grippers])
        if gripper_targets_px is None:
            end_sim = start_sim
        else:
            end_sim = self.config.unproject(np.asarray(gripper_targets_px, dtype=float).reshape(-1, 2))
        hook = self.frame_hook if use_hook else None
        done = 0
        while done < n_steps:
            if hook is not None:
                chunk = min(n_steps - done, self._next_frame_step() - self._step_count)
            else:
                chunk = n_steps - done
            frac0 = done / n_steps
            frac1 = (done + chunk) / n_steps
            g0 = start_sim + (end_sim - start_sim) * frac0
            g1 = start_sim + (end_sim - start_sim) * frac1
            for g, p in zip(self.grippers, g0):
                g.pos = p.copy()
            _advance_in_place(self.mesh, self.grippers, chunk, self.config.physics_dt, g1)
            done += chunk
            self._step_count += chunk
            if hook is not None:
                for _ in range(self._frame_boundaries_crossed()):
                    self._frame_count += 1
                    hook(self.observe(), self)

    def _frame_boundaries_crossed(self) -> int:
        """How many camera-frame boundaries the step counter has crossed."""
        crossed = 0
        while True:
            boundary = (self._frame_count + crossed + 1) / self.frame_rate
            if self._step_count * self.config.physics_dt + 1e-12 >= boundary:
                crossed += 1
            else:
                return crossed

    def command(self, control: ControlInput, use_hook: bool = True) -> None:
        """Apply one control period: clamp the commanded displacement into the
        workspaces and servo the grippers there while the tissue responds."""
        if control.m != self.m:
            raise DimensionError(f"control input for {control.m} grippers, scene has {self.m}")
        target_px = apply_input(self.gripper_pixels(), control, self.config.workspaces)
        self.advance_steps(self.substeps_per_period, target_px, use_hook=use_hook)

    def settle(self, duration: float, gripper_targets_px: np.ndarray | None = None,
               use_hook: bool = False) -> None:
        """Run physics for a duration (used for target sampling and demos)."""
        n = max(1, round(duration / self.config.physics_dt))
        self.advance_steps(n, gripper_targets_px, use_hook=use_hook)


def sample_reachable_targets(
    env: TissueEnv,
    rng: np.random.Generator,
    max_pull: float = 140.0,
    settle_time: float = 3.0,
    min_error: float = 0.0,
    attempts: int = 20,
) -> tuple[ImagePoint, ...]:
    """Draw feasible desired tissue-point positions.

    Pulls the grippers to a random workspace position up to ``max_pull``
    pixels away, lets the tissue settle, and records where the tissue points
    land; the scene is restored afterwards. Targets generated this way are
    guaranteed reachable up to the attraction lag. With ``min_error`` set,
    sampling repeats until the targets sit at least that far (summed pixel
    distance) from the current tissue points; the best attempt wins if the
    bound is never met.
    """
    current = observe(env.mesh, env.grippers, env.config).tissue_points
    best: tuple[ImagePoint, ...] | None = None
    best_err = -1.0
    for _ in range(max(1, attempts)):
        snap = env.snapshot()
        try:
            pull = rng.uniform(-max_pull, max_pull, size=(env.m, 2)).reshape(-1)
            target_px = apply_input(env.gripper_pixels(), pull, env.workspaces)
            env.settle(settle_time / 2.0, target_px, use_hook=False)
            env.settle(settle_time / 2.0, None, use_hook=False)
            tissue = observe(env.mesh, env.grippers, env.config).tissue_points
        finally:
            env.restore(snap)
        err = sum(
            math.hypot(t.x - c.x, t.y - c.y) for t, c in zip(tissue, current)
        )
        if err > best_err:
            best, best_err = tissue, err
        if err >= min_error:
            return tissue
    assert best is not None
    return best
