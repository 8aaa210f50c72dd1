"""Online per-frame fitting and dense point tracking.

Each new frame goes through: canonical scene extension at poorly covered
pixels, control point resampling, flow-based offset initialization, and joint
energy minimization. The fitted deformation is then committed into the
canonical scene (warped positions/orientations replace the canonical ones and
offsets reset), so the next frame's rigidity terms compare against it.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import quaternion as quat
from .config import Config
from .deformation import ControlPointSet, default_gamma, field_weights, warp
from .energy import (
    DEPTH_MIN_OPACITY,
    EnergyBreakdown,
    PreviousState,
    anchor_neighbors,
    total_energy_and_gradients,
)
from .errors import FrameUnusableError
from .optimizer import CONTROL_GROUPS, GAUSSIAN_GROUPS, AdamState, modulation_factor, step
from .render import render
from .scene import NO_LABEL, Frame, GaussianSet, pixel_grid, project_point, sample_depth, unproject

logger = logging.getLogger(__name__)


@dataclass
class SceneState:
    scene: GaussianSet
    cps: ControlPointSet
    prev: PreviousState
    t: int
    adam: AdamState
    rng: np.random.Generator
    scene_extent: float
    last_frame: Optional[Frame] = None
    last_opacity: Optional[np.ndarray] = None
    history: list = field(default_factory=list)  # EnergyBreakdown per fitted frame
    added: list = field(default_factory=list)  # Gaussians added per frame
    fitted_cps: Optional[ControlPointSet] = None  # control points with the last fitted offsets

    def copy(self):
        return copy.deepcopy(self)


def _new_gaussians(positions, colors, scales, opacity, labels=None):
    n = len(positions)
    return GaussianSet(
        positions=positions,
        scales=np.repeat(scales[:, None], 3, axis=1),
        rotations=quat.identity(n),
        colors=colors,
        opacities=np.full(n, opacity),
        labels=labels,
    )


def _pixel_labels(frame, rows, cols):
    if frame.labels is None:
        return None
    return frame.labels[rows, cols]


def _zero_controls(scene, extent):
    return ControlPointSet.at(scene.positions[:1].copy(), default_gamma(scene.positions[:1], extent), anchors=[0])


def _fit(state: SceneState, frame: Frame, config: Config, iterations, deform):
    """Adam loop on the total energy; mutates ``state.scene`` and ``state.cps``."""
    scene, cps = state.scene, state.cps
    weights = config.energy_weights()
    # Gaussian moments persist across frames (new Gaussians start from zero);
    # control points are resampled every frame, so their moments start fresh
    state.adam.lr = config.learning_rates(state.scene_extent)
    state.adam.drop(CONTROL_GROUPS)
    for name in GAUSSIAN_GROUPS:
        state.adam.grow(name, len(scene))
    params = {
        "positions": scene.positions,
        "scales": scene.scales,
        "rotations": scene.rotations,
        "colors": scene.colors,
    }
    if config.optimize_opacity:
        params["opacities"] = scene.opacities
    if deform:
        params["offsets"] = cps.offsets
        params["rot_offsets"] = cps.rot_offsets
    prev = state.prev if deform else None
    rho = modulation_factor(scene.update_counts, config.modulation())
    touched = np.zeros(len(scene), dtype=bool)
    breakdown = None
    for _ in range(iterations):
        res = total_energy_and_gradients(scene, cps, frame, weights, prev)
        breakdown = res.breakdown
        gg = res.gaussian_grads.as_dict()
        grads = {name: gg[name] for name in params if name in gg}
        if deform:
            grads["offsets"] = res.control_grads.offsets
            grads["rot_offsets"] = res.control_grads.rot_offsets
        for name in ("positions", "scales", "rotations", "colors"):
            touched |= np.any(grads[name] != 0.0, axis=1)
        step(params, grads, state.adam, rho)
    final = total_energy_and_gradients(scene, cps, frame, weights, prev).breakdown if iterations else breakdown
    scene.update_counts += touched
    return final


def initialize(frame: Frame, config: Config = None) -> SceneState:
    """Seed the canonical scene from the first frame and fit it without deformation."""
    config = config or Config()
    ok = frame.unmasked & frame.valid_depth
    grid = np.zeros_like(ok)
    grid[:: config.stride, :: config.stride] = True
    rows, cols = np.nonzero(ok & grid)
    if len(rows) == 0:
        raise FrameUnusableError("no unmasked pixel with valid depth", frame.index)
    u = np.stack([cols, rows], axis=1).astype(float)
    positions = unproject(u, frame.depth[rows, cols], frame.camera)
    if len(positions) > 1:
        dist, _ = cKDTree(positions).query(positions, k=2)
        scales = dist[:, 1]
    else:
        scales = frame.depth[rows, cols] / frame.camera.fx * config.stride
    scales = np.maximum(scales, 1e-6)
    scene = _new_gaussians(positions, frame.rgb[rows, cols], scales, config.initial_opacity, _pixel_labels(frame, rows, cols))
    centroid = positions.mean(axis=0)
    extent = float(np.max(np.linalg.norm(positions - centroid, axis=1))) or 1.0

    state = SceneState(
        scene=scene,
        cps=_zero_controls(scene, extent),
        prev=PreviousState(scene.positions.copy(), scene.rotations.copy()),
        t=frame.index,
        adam=AdamState(
            lr=config.learning_rates(extent),
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
        ),
        rng=np.random.default_rng(config.seed),
        scene_extent=extent,
    )
    breakdown = _fit(state, frame, config, config.first_iterations, deform=False)
    state.cps = resample_control_points(state, config)
    _commit(state, frame)
    state.history.append(breakdown)
    state.added.append(len(scene))
    return state


def extend_canonical(state: SceneState, frame: Frame, config: Config = None):
    """Add a Gaussian at every usable pixel whose rendered opacity is below threshold.

    Returns ``(scene, prev, added_pixels)`` where ``added_pixels`` holds the
    (row, col) of each new Gaussian, in the order they were appended.
    """
    config = config or Config()
    warped = warp(state.scene, state.cps)
    opacity = render(warped, frame.camera).opacity
    low = (opacity < config.opacity_threshold) & frame.unmasked & frame.valid_depth
    rows, cols = np.nonzero(low)
    pixels = np.stack([rows, cols], axis=1)
    if len(rows) == 0:
        return state.scene, state.prev, pixels
    u = np.stack([cols, rows], axis=1).astype(float)
    positions = unproject(u, frame.depth[rows, cols], frame.camera)
    dist, _ = cKDTree(warped.positions).query(positions, k=1)
    new = _new_gaussians(
        positions, frame.rgb[rows, cols], np.maximum(dist, 1e-6), config.initial_opacity, _pixel_labels(frame, rows, cols)
    )
    scene = state.scene.concatenate(new)
    prev = PreviousState(
        np.concatenate([state.prev.positions, new.positions]),
        np.concatenate([state.prev.rotations, new.rotations]),
    )
    return scene, prev, pixels


def resample_control_points(state: SceneState, config: Config = None) -> ControlPointSet:
    """Draw ``max(1, G // k_frac)`` anchor Gaussians without replacement."""
    config = config or Config()
    G = len(state.scene)
    K = max(1, G // config.k_frac)
    sigma = state.rng.choice(G, size=K, replace=False)
    positions = state.scene.positions[sigma].copy()
    gamma = config.gamma or default_gamma(positions, state.scene_extent)
    cps = ControlPointSet.at(positions, gamma, anchors=sigma)
    cps.neighbors = anchor_neighbors(positions, config.n_neighbors)
    return cps


def smoothness_laplacian(positions, neighbors, gamma):
    """Graph Laplacian ``D - W`` of the symmetrized control-point neighbor graph,
    with kernel weights ``exp(-gamma |p_k - p_j|^2)`` on its edges."""
    K = len(positions)
    L = np.zeros((K, K))
    if neighbors is None or neighbors.size == 0:
        return L
    i = np.repeat(np.arange(K), neighbors.shape[1])
    j = neighbors.reshape(-1)
    w = np.exp(-gamma * np.sum((positions[i] - positions[j]) ** 2, axis=1))
    W = np.zeros((K, K))
    np.maximum.at(W, (i, j), w)
    W = np.maximum(W, W.T)
    L[...] = np.diag(W.sum(axis=1)) - W
    return L


def solve_offsets_least_squares(weights, targets, ridge=1e-8, laplacian=None, smoothing=0.0):
    """Offsets ``d`` minimizing

        |A d - v|^2 + smoothing * tr(d^T L d) + ridge * sum_k |d_k - mean(d)|^2.

    ``A`` (M, K) is row-stochastic, so a constant target field is reproduced
    exactly. The Laplacian term fills control points the samples do not reach
    from their neighbors; the ridge only fixes what is still undetermined.
    """
    A = np.asarray(weights, dtype=float)
    v = np.asarray(targets, dtype=float)
    K = A.shape[1]
    if len(A) == 0:
        return np.zeros((K,) + v.shape[1:])
    centering = np.eye(K) - np.full((K, K), 1.0 / K)
    normal = A.T @ A + ridge * centering
    if laplacian is not None and smoothing:
        normal += smoothing * laplacian
    return np.linalg.solve(normal, A.T @ v)


def flow_targets(state: SceneState, frame: Frame, config: Config = None):
    """Sampled surface points of the previous frame and their 3D motion to ``frame``."""
    config = config or Config()
    prev = state.last_frame
    if prev is None or frame.flow is None:
        return np.zeros((0, 3)), np.zeros((0, 3))
    H, W = frame.depth.shape
    ok = prev.unmasked & prev.valid_depth
    if state.last_opacity is not None:
        ok &= state.last_opacity >= DEPTH_MIN_OPACITY
    grid = pixel_grid(H, W)
    target = grid + frame.flow
    ok &= np.all(np.isfinite(target), axis=2) & frame.camera.in_image(np.nan_to_num(target, nan=-1e9))
    rows, cols = np.nonzero(ok)
    # every bilinear tap must be unmasked, or the instrument's depth leaks in
    d_next = sample_depth(np.where(frame.unmasked, frame.depth, np.nan), target[rows, cols])
    good = np.isfinite(d_next)
    rows, cols, d_next = rows[good], cols[good], d_next[good]
    if len(rows) > config.flow_samples:
        pick = np.sort(state.rng.choice(len(rows), size=config.flow_samples, replace=False))
        rows, cols, d_next = rows[pick], cols[pick], d_next[pick]
    x = unproject(grid[rows, cols], prev.depth[rows, cols], prev.camera)
    y = unproject(target[rows, cols], d_next, frame.camera)
    return x, y - x


def init_offsets_from_flow(state: SceneState, frame: Frame, config: Config = None) -> ControlPointSet:
    config = config or Config()
    cps = state.cps.copy()
    x, v = flow_targets(state, frame, config)
    if len(x) == 0:
        if frame.flow is not None:
            logger.warning("frame %d: no usable flow samples, offsets stay zero", frame.index)
        return cps
    A, degenerate = field_weights(x, cps)
    A, v = A[~degenerate], v[~degenerate]
    # both regularizers are relative to the mean squared weight per control
    # point, so control points no sample reaches follow their neighbors
    # instead of absorbing residuals through near-zero weight columns
    scale = max(np.sum(A * A) / A.shape[1], 1e-300) if len(A) else 1.0
    L = smoothness_laplacian(cps.positions, cps.neighbors, cps.gamma)
    cps.offsets = solve_offsets_least_squares(
        A, v, config.flow_ridge * scale, laplacian=L, smoothing=config.flow_smoothing * scale
    )
    cps.rot_offsets = np.zeros_like(cps.rot_offsets)
    return cps


def _commit(state: SceneState, frame: Frame):
    state.fitted_cps = state.cps.copy()
    warped = warp(state.scene, state.cps)
    state.scene.positions = warped.positions
    state.scene.rotations = warped.rotations
    state.prev = PreviousState(warped.positions.copy(), warped.rotations.copy())
    state.cps.offsets[:] = 0.0
    state.cps.rot_offsets[:] = 0.0
    state.last_frame = frame
    state.last_opacity = render(state.scene, frame.camera).opacity
    state.t = frame.index


def fit_frame(state: SceneState, frame: Frame, config: Config = None) -> SceneState:
    """Fit one new frame; returns a new state and leaves ``state`` untouched."""
    config = config or Config()
    new = state.copy()
    scene, prev, pixels = extend_canonical(new, frame, config)
    new.scene, new.prev = scene, prev
    new.cps = resample_control_points(new, config)
    if config.use_flow:
        new.cps = init_offsets_from_flow(new, frame, config)
    breakdown = _fit(new, frame, config, config.iterations, deform=True)
    _commit(new, frame)
    new.history.append(breakdown)
    new.added.append(len(pixels))
    return new


class TrackSet:
    """Query points bound to their nearest Gaussians, with per-frame trajectories.

    A query is either a screen point ``(u, v)`` or a world point ``(x, y, z)``
    born at a given frame. Queries whose pixel has no valid depth are dead at
    birth and emit NaN rows.
    """

    UNBOUND = -2
    DEAD = -1

    def __init__(self, births, points):
        self.births = np.asarray(births, dtype=np.int64).reshape(-1)
        pts = [np.asarray(p, dtype=float) for p in points]
        self.points = pts
        self.gaussian = np.full(len(pts), self.UNBOUND, dtype=np.int64)
        self.rows = [[] for _ in pts]  # (frame, u, v, x, y, z, visible)

    def __len__(self):
        return len(self.points)

    def bind(self, state: SceneState, frame: Frame):
        new = np.flatnonzero((self.births == frame.index) & (self.gaussian == self.UNBOUND))
        if len(new) == 0:
            return
        tree = cKDTree(state.scene.positions)
        for q in new:
            p = self.points[q]
            if p.shape == (2,):
                z = sample_depth(frame.depth, p[None])[0]
                if not np.isfinite(z):
                    self.gaussian[q] = self.DEAD
                    continue
                p = unproject(p[None], np.array([z]), frame.camera)[0]
            self.gaussian[q] = int(tree.query(p)[1])

    def record(self, state: SceneState, frame: Frame):
        cam = frame.camera
        for q in range(len(self)):
            if self.births[q] > frame.index:
                continue
            g = self.gaussian[q]
            if g < 0:
                self.rows[q].append((frame.index,) + (np.nan,) * 5 + (False,))
                continue
            x = state.scene.positions[g]
            u, _, ok = project_point(x, cam)
            visible = bool(ok and cam.in_image(u))
            self.rows[q].append((frame.index, u[0], u[1], x[0], x[1], x[2], visible))

    def update(self, state: SceneState, frame: Frame):
        self.bind(state, frame)
        self.record(state, frame)

    def trajectories_2d(self):
        """(N, T, 2) screen trajectories; frames before birth are NaN."""
        T = max((len(r) + int(b) for r, b in zip(self.rows, self.births)), default=0)
        out = np.full((len(self), T, 2), np.nan)
        for q, rows in enumerate(self.rows):
            for row in rows:
                out[q, row[0]] = row[1:3]
        return out

    def visibility(self):
        T = max((len(r) + int(b) for r, b in zip(self.rows, self.births)), default=0)
        out = np.zeros((len(self), T), dtype=bool)
        for q, rows in enumerate(self.rows):
            for row in rows:
                out[q, row[0]] = row[6]
        return out


def track(state: SceneState, queries: TrackSet, frame: Frame) -> TrackSet:
    queries.update(state, frame)
    return queries


class OnlineTracker:
    """Feeds frames through the online fitter and keeps a TrackSet up to date."""

    def __init__(self, config: Config = None, tracks: TrackSet = None):
        self.config = config or Config()
        self.tracks = tracks
        self.state: Optional[SceneState] = None

    def process(self, frame: Frame) -> SceneState:
        try:
            if self.state is None:
                self.state = initialize(frame, self.config)
            else:
                self.state = fit_frame(self.state, frame, self.config)
        except FrameUnusableError:
            raise
        except (ArithmeticError, ValueError) as exc:
            raise FrameUnusableError(str(exc), frame.index) from exc
        if self.tracks is not None:
            track(self.state, self.tracks, frame)
        return self.state

    def run(self, frames):
        for frame in frames:
            self.process(frame)
        return self.state


__all__ = [
    "EnergyBreakdown",
    "OnlineTracker",
    "SceneState",
    "TrackSet",
    "extend_canonical",
    "fit_frame",
    "flow_targets",
    "init_offsets_from_flow",
    "initialize",
    "resample_control_points",
    "smoothness_laplacian",
    "solve_offsets_least_squares",
    "track",
]
