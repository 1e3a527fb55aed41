"""Learned tissue dynamics: a small fully-connected ReLU network.

The network maps (tissue positions, gripper positions, control input) to the
tissue-point displacement over one control period. It is trained online with
Adam on mean-squared error over minibatches drawn from a replay memory.
The implementation is plain numpy with hand-written backpropagation; the
model is small enough that an autodiff framework would be pure overhead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .state import DimensionError, Experience

__all__ = [
    "Normalizer",
    "MlpDynamics",
    "AdamState",
    "ReplayMemory",
    "init_random",
    "train_minibatch",
    "fit_normalizer",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_HIDDEN = (12, 12)
DEFAULT_REPLAY_CAPACITY = 10_000


@dataclass
class Normalizer:
    """Per-component affine map: normalized = (raw - offset) * scale."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self) -> None:
        self.offset = np.asarray(self.offset, dtype=float).reshape(-1)
        self.scale = np.asarray(self.scale, dtype=float).reshape(-1)
        if self.offset.shape != self.scale.shape:
            raise ValueError("offset and scale shapes differ")
        if not np.all(np.isfinite(self.offset)) or not np.all(np.isfinite(self.scale)):
            raise ValueError("normalizer parameters must be finite")
        if np.any(self.scale == 0.0):
            raise ValueError("normalizer scale must be invertible (nonzero)")

    @property
    def dim(self) -> int:
        return self.offset.size

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.offset) * self.scale

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(normalized, dtype=float) / self.scale + self.offset

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def from_range(cls, lo: np.ndarray, hi: np.ndarray) -> "Normalizer":
        """Map observed [lo, hi] to [-1, 1]; degenerate components stay identity."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        span = hi - lo
        degenerate = span <= 0.0
        offset = np.where(degenerate, 0.0, (lo + hi) / 2.0)
        scale = np.where(degenerate, 1.0, 2.0 / np.where(degenerate, 1.0, span))
        return cls(offset, scale)

    @classmethod
    def from_abs_max(cls, abs_max: np.ndarray) -> "Normalizer":
        """Scale each component by 1/max|value|; degenerate components stay identity."""
        abs_max = np.asarray(abs_max, dtype=float)
        degenerate = abs_max <= 0.0
        scale = 1.0 / np.where(degenerate, 1.0, abs_max)
        return cls(np.zeros_like(scale), scale)


@dataclass
class MlpDynamics:
    """Weights, biases, and normalization of the tissue-dynamics network.

    Input layout is [tissue positions (2K), gripper positions (2M), control
    input (2M)]; output is the tissue displacement (2K). With the default
    K=4, M=2 session the network is 16 -> 12 -> 12 -> 8 with ReLU on both
    hidden layers.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    in_norm: Normalizer
    out_norm: Normalizer
    n_tissue: int
    n_grippers: int

    @property
    def input_dim(self) -> int:
        return 2 * self.n_tissue + 4 * self.n_grippers

    @property
    def output_dim(self) -> int:
        return 2 * self.n_tissue

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to the trainable arrays, keyed by name."""
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}

    def copy(self) -> "MlpDynamics":
        return MlpDynamics(
            w1=self.w1.copy(), b1=self.b1.copy(),
            w2=self.w2.copy(), b2=self.b2.copy(),
            w3=self.w3.copy(), b3=self.b3.copy(),
            in_norm=Normalizer(self.in_norm.offset.copy(), self.in_norm.scale.copy()),
            out_norm=Normalizer(self.out_norm.offset.copy(), self.out_norm.scale.copy()),
            n_tissue=self.n_tissue, n_grippers=self.n_grippers,
        )

    def _assemble(self, tissue_pos, gripper_pos, control) -> tuple[np.ndarray, bool]:
        tissue = np.asarray(tissue_pos, dtype=float)
        gripper = np.asarray(gripper_pos, dtype=float)
        ctrl = np.asarray(control, dtype=float)
        single = tissue.ndim == 1
        tissue = np.atleast_2d(tissue)
        gripper = np.atleast_2d(gripper)
        ctrl = np.atleast_2d(ctrl)
        if tissue.shape[-1] != 2 * self.n_tissue or gripper.shape[-1] != 2 * self.n_grippers \
                or ctrl.shape[-1] != 2 * self.n_grippers:
            raise DimensionError(
                f"predict expects widths ({2 * self.n_tissue}, {2 * self.n_grippers}, "
                f"{2 * self.n_grippers}); got ({tissue.shape[-1]}, {gripper.shape[-1]}, {ctrl.shape[-1]})"
            )
        x = np.concatenate([tissue, gripper, ctrl], axis=-1)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input to dynamics prediction")
        return x, single

    def _forward_trace(self, x_raw: np.ndarray):
        """Forward pass keeping pre-activations for backprop."""
        xn = self.in_norm.normalize(x_raw)
        z1 = xn @ self.w1 + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.w2 + self.b2
        h2 = np.maximum(z2, 0.0)
        z3 = h2 @ self.w3 + self.b3
        y = self.out_norm.denormalize(z3)
        return xn, z1, h1, z2, h2, z3, y

    def predict(self, tissue_pos, gripper_pos, control) -> np.ndarray:
        """Predicted tissue displacement over one control period (pixels).

        Accepts flat vectors or batches of matching leading shape; the output
        matches the input's batching.
        """
        x, single = self._assemble(tissue_pos, gripper_pos, control)
        y = self._forward_trace(x)[-1]
        return y[0] if single else y


def init_random(seed: int, k: int = 4, m: int = 2, hidden: tuple[int, int] = DEFAULT_HIDDEN) -> MlpDynamics:
    """Fresh network with Normal(0, 1/sqrt(fan_in)) weights and zero biases.

    Normalizers start as identity; fit them from a replay memory before
    serious training. Reproducible from the seed.
    """
    rng = np.random.default_rng(seed)
    d_in = 2 * k + 4 * m
    d_out = 2 * k
    h1, h2 = hidden

    def layer(fan_in: int, fan_out: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    return MlpDynamics(
        w1=layer(d_in, h1), b1=np.zeros(h1),
        w2=layer(h1, h2), b2=np.zeros(h2),
        w3=layer(h2, d_out), b3=np.zeros(d_out),
        in_norm=Normalizer.identity(d_in),
        out_norm=Normalizer.identity(d_out),
        n_tissue=k, n_grippers=m,
    )


@dataclass
class AdamState:
    """Adam optimizer accumulators for one model's parameter set."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: MlpDynamics, learning_rate: float = 0.01) -> "AdamState":
        state = cls(learning_rate=learning_rate)
        for name, p in model.parameters().items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One bias-corrected Adam update, in place."""
        self.step += 1
        t = self.step
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class ReplayMemory:
    """Bounded FIFO of experience tuples with uniform minibatch sampling.

    Rows are packed into flat ring-buffer arrays so sampling a minibatch is a
    single fancy-index per field. One minibatch never repeats an index.
    """

    def __init__(self, capacity: int = DEFAULT_REPLAY_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._tissue: np.ndarray | None = None
        self._gripper: np.ndarray | None = None
        self._input: np.ndarray | None = None
        self._delta: np.ndarray | None = None
        self._size = 0
        self._next = 0

    def __len__(self) -> int:
        return self._size

    def _allocate(self, exp: Experience) -> None:
        self._tissue = np.empty((self.capacity, len(exp.tissue_pos)))
        self._gripper = np.empty((self.capacity, len(exp.gripper_pos)))
        self._input = np.empty((self.capacity, len(exp.input)))
        self._delta = np.empty((self.capacity, len(exp.tissue_delta)))

    def push(self, exp: Experience) -> None:
        if self._tissue is None:
            self._allocate(exp)
        assert self._tissue is not None
        if len(exp.tissue_pos) != self._tissue.shape[1] or len(exp.gripper_pos) != self._gripper.shape[1]:
            raise DimensionError("experience dimensions differ from the memory's layout")
        i = self._next
        self._tissue[i] = exp.tissue_pos
        self._gripper[i] = exp.gripper_pos
        self._input[i] = exp.input
        self._delta[i] = exp.tissue_delta
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, experiences: Iterable[Experience]) -> None:
        for exp in experiences:
            self.push(exp)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform sample without replacement: (tissue, gripper, input, delta) arrays."""
        if batch_size > self._size:
            raise ValueError(f"batch size {batch_size} exceeds memory size {self._size}")
        idx = rng.choice(self._size, size=batch_size, replace=False)
        return (
            self._tissue[idx],
            self._gripper[idx],
            self._input[idx],
            self._delta[idx],
        )

    def contents(self):
        """All stored rows as (tissue, gripper, input, delta) array views."""
        if self._size == 0:
            raise ValueError("replay memory is empty")
        sl = slice(0, self._size)
        return self._tissue[sl], self._gripper[sl], self._input[sl], self._delta[sl]


def fit_normalizer(memory: ReplayMemory) -> tuple[Normalizer, Normalizer]:
    """Input/output normalizers fitted to the memory's observed ranges.

    Inputs map their min/max to [-1, 1]; outputs are scaled by 1/max|delta|.
    Degenerate components (constant, or all-zero deltas) stay identity.
    """
    tissue, gripper, ctrl, delta = memory.contents()
    x = np.concatenate([tissue, gripper, ctrl], axis=1)
    in_norm = Normalizer.from_range(x.min(axis=0), x.max(axis=0))
    out_norm = Normalizer.from_abs_max(np.abs(delta).max(axis=0))
    return in_norm, out_norm


def _loss_and_grads(model: MlpDynamics, x: np.ndarray, target: np.ndarray):
    """Mean-squared-error loss and analytic gradients for one batch."""
    xn, z1, h1, z2, h2, z3, y = model._forward_trace(x)
    resid = y - target
    n = resid.size
    loss = float(np.sum(resid * resid) / n)

    dy = 2.0 * resid / n
    dz3 = dy / model.out_norm.scale
    gw3 = h2.T @ dz3
    gb3 = dz3.sum(axis=0)
    dh2 = dz3 @ model.w3.T
    dz2 = dh2 * (z2 > 0.0)
    gw2 = h1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dh1 = dz2 @ model.w2.T
    dz1 = dh1 * (z1 > 0.0)
    gw1 = xn.T @ dz1
    gb1 = dz1.sum(axis=0)

    grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
    return loss, grads


def train_minibatch(
    model: MlpDynamics,
    memory: ReplayMemory,
    batch_size: int,
    adam: AdamState,
    rng: np.random.Generator,
) -> float | None:
    """One Adam step on MSE over a uniformly sampled minibatch.

    Returns the pre-update batch loss, or None when the memory does not yet
    hold a full batch (the caller's loop simply proceeds).
    """
    if len(memory) < batch_size:
        return None
    tissue, gripper, ctrl, delta = memory.sample(batch_size, rng)
    x = np.concatenate([tissue, gripper, ctrl], axis=1)
    loss, grads = _loss_and_grads(model, x, delta)
    adam.apply(model.parameters(), grads)
    return loss


CHECKPOINT_FORMAT = "tissuemanip-ckpt/1"


def _norm_to_dict(n: Normalizer) -> dict:
    return {"offset": n.offset.tolist(), "scale": n.scale.tolist()}


def _norm_from_dict(d: dict) -> Normalizer:
    return Normalizer(np.array(d["offset"], dtype=float), np.array(d["scale"], dtype=float))


def save_checkpoint(
    path: str | Path,
    model: MlpDynamics,
    adam: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    """Write model (and optionally optimizer) state as JSON; round-trips bit-exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "n_tissue": model.n_tissue,
        "n_grippers": model.n_grippers,
        "hidden": [model.b1.size, model.b2.size],
        "params": {name: p.tolist() for name, p in model.parameters().items()},
        "in_norm": _norm_to_dict(model.in_norm),
        "out_norm": _norm_to_dict(model.out_norm),
        "adam": None,
        "meta": meta or {},
    }
    if adam is not None:
        doc["adam"] = {
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step": adam.step,
            "m": {k: v.tolist() for k, v in adam.m.items()},
            "v": {k: v.tolist() for k, v in adam.v.items()},
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[MlpDynamics, AdamState | None, dict]:
    """Load a checkpoint written by :func:`save_checkpoint`."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {doc.get('format')!r}")
    params = {name: np.array(v, dtype=float) for name, v in doc["params"].items()}
    model = MlpDynamics(
        w1=params["w1"], b1=params["b1"],
        w2=params["w2"], b2=params["b2"],
        w3=params["w3"], b3=params["b3"],
        in_norm=_norm_from_dict(doc["in_norm"]),
        out_norm=_norm_from_dict(doc["out_norm"]),
        n_tissue=int(doc["n_tissue"]),
        n_grippers=int(doc["n_grippers"]),
    )
    adam = None
    if doc.get("adam"):
        a = doc["adam"]
        adam = AdamState(
            learning_rate=float(a["learning_rate"]),
            beta1=float(a["beta1"]), beta2=float(a["beta2"]), eps=float(a["eps"]),
            step=int(a["step"]),
            m={k: np.array(v, dtype=float) for k, v in a["m"].items()},
            v={k: np.array(v, dtype=float) for k, v in a["v"].items()},
        )
    return model, adam, doc.get("meta", {})
