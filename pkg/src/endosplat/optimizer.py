"""Adam with per-group learning rates and per-Gaussian gradient modulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NonFiniteGradientError

GAUSSIAN_GROUPS = ("positions", "scales", "rotations", "colors", "opacities")
CONTROL_GROUPS = ("offsets", "rot_offsets")

MIN_SCALE = 1e-6
MIN_OPACITY = 1e-4


@dataclass
class ModulationParams:
    c1: float = 0.01
    c2: float = 1.0

    def __post_init__(self):
        if not self.c1 > 0:
            raise ContractViolation("modulation c1 must be positive")


def modulation_factor(v, mp: ModulationParams = ModulationParams()):
    """``2 * (1 - sigmoid(c1 * v - c2))``: 1 at ``c1 v = c2``, decaying to 0."""
    x = mp.c1 * np.asarray(v, dtype=float) - mp.c2
    # 1 - sigmoid(x) == sigmoid(-x); the second form keeps precision for large x
    return 2.0 / (1.0 + np.exp(x))


def default_learning_rates(scene_extent=1.0):
    return {
        "positions": 1.6e-5 * scene_extent,
        "scales": 5e-3,
        "rotations": 1e-3,
        "colors": 2.5e-3,
        "opacities": 5e-2,
        "offsets": 1e-5,
        "rot_offsets": 1e-3,
    }


@dataclass
class AdamState:
    lr: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-row update counts used for bias correction, so rows added later
    # (or frozen by a zero modulation factor) get their own warm-up
    row_steps: dict = field(default_factory=dict)

    def reset(self):
        self.step_count = 0
        self.m.clear()
        self.v.clear()
        self.row_steps.clear()

    def drop(self, names):
        """Forget the moments of the given groups."""
        for name in names:
            self.m.pop(name, None)
            self.v.pop(name, None)
            self.row_steps.pop(name, None)

    def grow(self, name, n_rows):
        """Append zero moments so that group ``name`` has ``n_rows`` rows."""
        if name not in self.m:
            return
        have = len(self.m[name])
        if n_rows < have:
            raise ContractViolation(f"cannot shrink Adam moments of '{name}' from {have} to {n_rows} rows")
        if n_rows > have:
            pad = ((0, n_rows - have),) + ((0, 0),) * (self.m[name].ndim - 1)
            self.m[name] = np.pad(self.m[name], pad)
            self.v[name] = np.pad(self.v[name], pad)
            self.row_steps[name] = np.pad(self.row_steps[name], (0, n_rows - have))


def _project(name, value):
    if name == "rotations":
        value /= np.linalg.norm(value, axis=1, keepdims=True)
    elif name == "scales":
        np.maximum(value, MIN_SCALE, out=value)
    elif name == "opacities":
        np.clip(value, MIN_OPACITY, 1.0, out=value)


def step(params, grads, state: AdamState, modulation=None):
    """One in-place Adam update of ``params`` (dict of arrays).

    Gradients of Gaussian-owned groups are scaled row-wise by ``modulation``
    before the update; rows whose factor is exactly 0 are left untouched
    (parameters and moments). Constraints are re-imposed afterwards:
    unit quaternions, scales >= 1e-6 and opacities in [1e-4, 1].
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=float)
        if p.shape != g.shape:
            raise ContractViolation(f"gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        lr = state.lr[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.row_steps[name] = np.zeros(p.shape[:1], dtype=np.int64)
        m, v, steps = state.m[name], state.v[name], state.row_steps[name]
        if m.shape != p.shape:
            raise ContractViolation(f"Adam moments for '{name}' have shape {m.shape}, expected {p.shape}")
        if modulation is not None and name in GAUSSIAN_GROUPS:
            rho = np.asarray(modulation, dtype=float).reshape((-1,) + (1,) * (p.ndim - 1))
            g = g * rho
            live = np.broadcast_to(rho != 0.0, p.shape)
        else:
            live = None
        rows = None if live is None else live.reshape(len(p), -1)[:, 0]
        t = (steps + 1).reshape(steps.shape + (1,) * (p.ndim - steps.ndim))
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        update = lr * (m_new / (1.0 - b1**t)) / (np.sqrt(v_new / (1.0 - b2**t)) + state.eps)
        if live is None:
            m[...] = m_new
            v[...] = v_new
            steps += 1
            p -= update
            _project(name, p)
        else:
            m[live] = m_new[live]
            v[live] = v_new[live]
            steps[rows] += 1
            updated = p[rows] - update[rows]
            _project(name, updated)
            p[rows] = updated
    return params
