"""Fitting energies and their gradients.

External terms compare rendered color/depth with the observed frame. Internal
terms regularize the deformation on pairs of neighboring anchor Gaussians
(local rigidity of positions and orientations, isometry) and penalize
offsets of control points that fall outside the view.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import quaternion as quat
from .deformation import ControlPointSet, warp, warp_adjoint
from .errors import ContractViolation, FrameUnusableError
from .render import ParamGradients, RenderOutput, render, render_adjoint
from .scene import Camera, Frame, GaussianSet, project_point

# depth is only compared where the model claims at least this much coverage
DEPTH_MIN_OPACITY = 0.5


@dataclass
class EnergyWeights:
    image: float = 1.0
    depth: float = 0.1
    rigid_loc: float = 1.0
    rigid_rot: float = 1.0
    iso: float = 1.0
    visible: float = 1.0
    n_neighbors: int = 4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ContractViolation(f"energy weight '{f.name}' must be non-negative")
        if self.n_neighbors < 1:
            raise ContractViolation("n_neighbors must be at least 1")


@dataclass
class EnergyBreakdown:
    e_img: float = 0.0
    e_depth: float = 0.0
    e_rigidloc: float = 0.0
    e_rigidrot: float = 0.0
    e_iso: float = 0.0
    e_visible: float = 0.0
    total: float = 0.0


@dataclass
class ExternalEnergy:
    image: float
    depth: float
    value: float
    grad_color: np.ndarray
    grad_depth: np.ndarray
    depth_mask: np.ndarray


@dataclass
class ControlGradients:
    offsets: np.ndarray
    rot_offsets: np.ndarray


@dataclass
class PreviousState:
    """Warped positions/orientations of every Gaussian at the previous frame."""

    positions: np.ndarray
    rotations: np.ndarray


@dataclass
class EnergyResult:
    breakdown: EnergyBreakdown
    gaussian_grads: ParamGradients
    control_grads: ControlGradients
    rendered: RenderOutput
    warped: GaussianSet


def external_energy(frame: Frame, rendered: RenderOutput, weights: EnergyWeights) -> ExternalEnergy:
    """Weighted color and depth MSE over usable pixels, with pixel gradients."""
    if rendered.color.shape != frame.rgb.shape or rendered.depth.shape != frame.depth.shape:
        raise ContractViolation("rendered and observed images differ in shape")
    valid = frame.unmasked & np.all(np.isfinite(frame.rgb), axis=2)
    n_img = int(valid.sum())
    if n_img == 0:
        raise FrameUnusableError("no unmasked pixels to fit", frame.index)
    resid = np.where(valid[..., None], rendered.color - np.nan_to_num(frame.rgb), 0.0)
    e_img = float(np.sum(resid * resid)) / (3 * n_img)
    grad_color = weights.image * 2.0 * resid / (3 * n_img)

    dmask = valid & frame.valid_depth & (rendered.opacity >= DEPTH_MIN_OPACITY)
    n_depth = int(dmask.sum())
    grad_depth = np.zeros_like(frame.depth)
    e_depth = 0.0
    if n_depth:
        dres = np.where(dmask, rendered.depth - np.nan_to_num(frame.depth), 0.0)
        e_depth = float(np.sum(dres * dres)) / n_depth
        grad_depth = weights.depth * 2.0 * dres / n_depth
    value = weights.image * e_img + weights.depth * e_depth
    return ExternalEnergy(e_img, e_depth, value, grad_color, grad_depth, dmask)


def anchor_neighbors(positions, n):
    """Indices of the ``n`` nearest other anchors (ties broken by index)."""
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    K = len(p)
    m = min(n, K - 1)
    if m <= 0:
        return np.zeros((K, 0), dtype=np.int64)
    d = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :m].astype(np.int64)


def _pairs(neighbors):
    K, m = neighbors.shape
    return np.repeat(np.arange(K), m), neighbors.reshape(-1)


def _pair_weights(canon, i, j, gamma):
    d = canon[i] - canon[j]
    w = np.exp(-gamma * np.sum(d * d, axis=1))
    return w, d


def _scatter(n, i, j, gi, gj):
    out = np.zeros((n,) + gi.shape[1:])
    np.add.at(out, i, gi)
    np.add.at(out, j, gj)
    return out


def rigid_loc_energy(canon, prev, cur, neighbors, gamma, n_neighbors):
    """Local rigidity of relative anchor positions between consecutive frames.

    Returns ``(value, grad_canon, grad_cur)``.
    """
    K = len(canon)
    i, j = _pairs(neighbors)
    if len(i) == 0:
        return 0.0, np.zeros((K, 3)), np.zeros((K, 3))
    norm = 1.0 / (n_neighbors * K)
    w, d = _pair_weights(canon, i, j, gamma)
    e = (prev[j] - prev[i]) - (cur[j] - cur[i])
    sq = np.sum(e * e, axis=1)
    value = norm * float(np.sum(w * sq))
    ge = (2.0 * norm * w)[:, None] * e
    g_cur = _scatter(K, i, j, ge, -ge)
    gw = (norm * sq * -2.0 * gamma * w)[:, None] * d  # d/dcanon_i; negated for j
    g_canon = _scatter(K, i, j, gw, -gw)
    return value, g_canon, g_cur


def rigid_rot_energy(canon, prev_q, cur_q, neighbors, gamma, n_neighbors):
    """Local rigidity of relative anchor orientations ``q_j * q_i^-1``.

    Returns ``(value, grad_canon, grad_cur_q)``.
    """
    K = len(canon)
    i, j = _pairs(neighbors)
    if len(i) == 0:
        return 0.0, np.zeros((K, 3)), np.zeros((K, 4))
    norm = 1.0 / (n_neighbors * K)
    w, d = _pair_weights(canon, i, j, gamma)
    conj_prev = quat.conjugate(prev_q[i])
    conj_cur = quat.conjugate(cur_q[i])
    r_prev = quat.multiply(prev_q[j], conj_prev)
    r_cur = quat.multiply(cur_q[j], conj_cur)
    e = r_prev - r_cur
    sq = np.sum(e * e, axis=1)
    value = norm * float(np.sum(w * sq))
    g_r = (-2.0 * norm * w)[:, None] * e
    g_qj = np.einsum("nab,na->nb", quat.right_matrix(conj_cur), g_r)
    g_conj = np.einsum("nab,na->nb", quat.left_matrix(cur_q[j]), g_r)
    g_cur = _scatter(K, i, j, quat.conjugate(g_conj), g_qj)
    gw = (norm * sq * -2.0 * gamma * w)[:, None] * d
    g_canon = _scatter(K, i, j, gw, -gw)
    return value, g_canon, g_cur


def iso_energy(canon, cur, neighbors, gamma, n_neighbors):
    """L1 penalty on changes of squared anchor-pair distances.

    Returns ``(value, grad_canon, grad_cur)``; sign(0) is taken as 0.
    """
    K = len(canon)
    i, j = _pairs(neighbors)
    if len(i) == 0:
        return 0.0, np.zeros((K, 3)), np.zeros((K, 3))
    norm = 1.0 / (n_neighbors * K)
    w, d = _pair_weights(canon, i, j, gamma)
    dc = cur[j] - cur[i]
    a = np.sum(d * d, axis=1)
    b = np.sum(dc * dc, axis=1)
    diff = a - b
    value = norm * float(np.sum(w * np.abs(diff)))
    s = np.sign(diff)
    gc = (norm * w * s * -2.0)[:, None] * dc  # d/dcur_j
    g_cur = _scatter(K, i, j, -gc, gc)
    # canonical enters through both the kernel weight and the rest length; d = c_i - c_j
    gd = (norm * w * s * 2.0)[:, None] * d + (norm * np.abs(diff) * -2.0 * gamma * w)[:, None] * d
    g_canon = _scatter(K, i, j, gd, -gd)
    return value, g_canon, g_cur


def invisible_control_points(cps: ControlPointSet, cam: Camera):
    u, _, ok = project_point(cps.positions, cam)
    return ~(ok & cam.in_image(np.nan_to_num(u, nan=-1e9)))


def visible_energy(cps: ControlPointSet, cam: Camera):
    """Mean squared offset of control points that do not project into the image.

    Returns ``(value, grad_offsets)``.
    """
    invisible = invisible_control_points(cps, cam)
    count = int(invisible.sum())
    grad = np.zeros_like(cps.offsets)
    if count == 0:
        return 0.0, grad
    off = cps.offsets[invisible]
    grad[invisible] = 2.0 * off / count
    return float(np.sum(off * off)) / count, grad


def total_energy_and_gradients(
    scene: GaussianSet,
    cps: ControlPointSet,
    frame: Frame,
    weights: EnergyWeights,
    prev: Optional[PreviousState] = None,
) -> EnergyResult:
    """Full fitting energy and its gradient w.r.t. Gaussian and control-point
    parameters. Internal terms are skipped when ``prev`` is None (first frame).
    """
    cam = frame.camera
    warped, A = warp(scene, cps, return_weights=True)
    rendered = render(warped, cam)
    ext = external_energy(frame, rendered, weights)
    g_warped = render_adjoint(warped, cam, ext.grad_color, ext.grad_depth, output=rendered)

    bd = EnergyBreakdown(e_img=ext.image, e_depth=ext.depth)
    g_wpos = g_warped.positions
    g_wrot = g_warped.rotations
    g_canon_direct = np.zeros_like(scene.positions)
    g_off_direct = np.zeros_like(cps.offsets)

    if prev is not None:
        sigma = cps.anchors
        neighbors = cps.neighbors
        if neighbors is None:
            neighbors = anchor_neighbors(scene.positions[sigma], weights.n_neighbors)
        canon = scene.positions[sigma]
        cur = warped.positions[sigma]
        n = weights.n_neighbors

        bd.e_rigidloc, gc1, gcur1 = rigid_loc_energy(canon, prev.positions[sigma], cur, neighbors, cps.gamma, n)
        bd.e_rigidrot, gc2, gq = rigid_rot_energy(
            canon, prev.rotations[sigma], warped.rotations[sigma], neighbors, cps.gamma, n
        )
        bd.e_iso, gc3, gcur3 = iso_energy(canon, cur, neighbors, cps.gamma, n)
        bd.e_visible, g_vis = visible_energy(cps, cam)

        g_wpos = g_wpos.copy()
        g_wrot = g_wrot.copy()
        np.add.at(g_wpos, sigma, weights.rigid_loc * gcur1 + weights.iso * gcur3)
        np.add.at(g_wrot, sigma, weights.rigid_rot * gq)
        np.add.at(g_canon_direct, sigma, weights.rigid_loc * gc1 + weights.rigid_rot * gc2 + weights.iso * gc3)
        g_off_direct += weights.visible * g_vis

    g_pos, g_rot, g_off, g_rot_off = warp_adjoint(scene, cps, g_wpos, g_wrot, weights=A)
    bd.total = (
        ext.value
        + weights.rigid_loc * bd.e_rigidloc
        + weights.rigid_rot * bd.e_rigidrot
        + weights.iso * bd.e_iso
        + weights.visible * bd.e_visible
    )
    grads = ParamGradients(
        positions=g_pos + g_canon_direct,
        scales=g_warped.scales,
        rotations=g_rot,
        colors=g_warped.colors,
        opacities=g_warped.opacities,
    )
    return EnergyResult(bd, grads, ControlGradients(g_off + g_off_direct, g_rot_off), rendered, warped)
