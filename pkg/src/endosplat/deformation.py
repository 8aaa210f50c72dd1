"""Sparse control-point warp fields.

Both fields are kernel-weighted averages of per-control-point offsets,
``field(x) = sum_k w(x, p_k) d_k / sum_k w(x, p_k)`` with the Gaussian kernel
``w(a, b) = exp(-gamma |a - b|^2)``. Fields are evaluated at canonical
positions; the warped orientation is the renormalized sum ``q + dq(mu)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import quaternion as quat
from .errors import ContractViolation, DegenerateQuaternionError
from .scene import GaussianSet

# weight sum below which a location counts as out of reach of every control point
DEGENERATE_WEIGHT = 1e-30


@dataclass
class ControlPointSet:
    positions: np.ndarray  # (K, 3) p_k, fixed during a frame
    offsets: np.ndarray  # (K, 3) translation offsets
    rot_offsets: np.ndarray  # (K, 4) quaternion increments
    anchors: np.ndarray  # (K,) indices of anchor Gaussians
    gamma: float
    neighbors: Optional[np.ndarray] = None  # (K, n') anchor-local neighbor indices

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        K = len(self.positions)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(K, 3)
        self.rot_offsets = np.asarray(self.rot_offsets, dtype=float).reshape(K, 4)
        self.anchors = np.asarray(self.anchors, dtype=np.int64).reshape(K)
        if not self.gamma > 0:
            raise ContractViolation("kernel bandwidth gamma must be positive")
        if len(np.unique(self.anchors)) != K:
            raise ContractViolation("anchor indices must be unique")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def at(cls, positions, gamma, anchors=None, offsets=None, rot_offsets=None):
        """Control points at ``positions`` with zero offsets unless given."""
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        K = len(positions)
        return cls(
            positions=positions,
            offsets=np.zeros((K, 3)) if offsets is None else offsets,
            rot_offsets=np.zeros((K, 4)) if rot_offsets is None else rot_offsets,
            anchors=np.arange(K) if anchors is None else anchors,
            gamma=gamma,
        )

    def copy(self):
        return ControlPointSet(
            self.positions.copy(),
            self.offsets.copy(),
            self.rot_offsets.copy(),
            self.anchors.copy(),
            self.gamma,
            None if self.neighbors is None else self.neighbors.copy(),
        )


def kernel(x1, x2, gamma):
    if not gamma > 0:
        raise ContractViolation("gamma must be positive")
    d = np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)
    return np.exp(-gamma * np.sum(d * d, axis=-1))


def default_gamma(control_positions, fallback_extent=1.0):
    """``1 / (2 h^2)`` with ``h`` the median nearest-control-point distance."""
    p = np.asarray(control_positions, dtype=float).reshape(-1, 3)
    h = 0.0
    if len(p) > 1:
        dist, _ = cKDTree(p).query(p, k=2)
        h = float(np.median(dist[:, 1]))
    if not h > 0:
        h = float(fallback_extent) if fallback_extent > 0 else 1.0
    return 1.0 / (2.0 * h * h)


def field_weights(x, cps: ControlPointSet):
    """Row-normalized kernel weights (N, K) and the mask of degenerate rows."""
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    diff = x[:, None, :] - cps.positions[None, :, :]
    w = np.exp(-cps.gamma * np.einsum("nkc,nkc->nk", diff, diff))
    total = w.sum(axis=1)
    degenerate = total < DEGENERATE_WEIGHT
    A = w / np.where(degenerate, 1.0, total)[:, None]
    A[degenerate] = 0.0
    return A, degenerate


def translation_field(x, cps: ControlPointSet):
    x = np.asarray(x, dtype=float)
    A, _ = field_weights(x, cps)
    return (A @ cps.offsets).reshape(x.shape)


def orientation_field(x, cps: ControlPointSet):
    x = np.asarray(x, dtype=float)
    A, _ = field_weights(x, cps)
    return (A @ cps.rot_offsets).reshape(x.shape[:-1] + (4,))


def warp(scene: GaussianSet, cps: ControlPointSet, return_weights=False):
    """Deformed copy of ``scene``; scales, colors and opacities are untouched."""
    A, _ = field_weights(scene.positions, cps)
    warped = scene.copy()
    warped.positions = scene.positions + A @ cps.offsets
    q = scene.rotations + A @ cps.rot_offsets
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms < 1e-8):
        bad = int(np.flatnonzero(norms < 1e-8)[0])
        raise DegenerateQuaternionError(f"warped orientation of Gaussian {bad} has near-zero norm")
    warped.rotations = q / norms[:, None]
    if return_weights:
        return warped, A
    return warped


def warp_adjoint(scene: GaussianSet, cps: ControlPointSet, grad_positions, grad_rotations, weights=None):
    """Pull gradients on warped positions/orientations back to canonical
    parameters and control-point offsets.

    Returns ``(g_positions, g_rotations, g_offsets, g_rot_offsets)``.
    """
    A = field_weights(scene.positions, cps)[0] if weights is None else weights
    q_sum = scene.rotations + A @ cps.rot_offsets
    g_qsum = quat.normalize_vjp(q_sum, grad_rotations)
    g_offsets = A.T @ grad_positions
    g_rot_offsets = A.T @ g_qsum

    # positions also move the kernel weights: d w_k / dx = -2 gamma (x - p_k) w_k
    field_t = A @ cps.offsets
    field_q = A @ cps.rot_offsets
    proj = grad_positions @ cps.offsets.T - np.sum(grad_positions * field_t, axis=1, keepdims=True)
    proj += g_qsum @ cps.rot_offsets.T - np.sum(g_qsum * field_q, axis=1, keepdims=True)
    coef = A * proj  # (N, K)
    diff_term = coef.sum(axis=1, keepdims=True) * scene.positions - coef @ cps.positions
    g_positions = grad_positions - 2.0 * cps.gamma * diff_term
    return g_positions, g_qsum, g_offsets, g_rot_offsets
