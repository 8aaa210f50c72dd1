"""Per-Gaussian screen-space projection (EWA) and its vector-Jacobian product.

This is the O(G) part of rendering; the per-pixel work lives in the
rasterizer backends.
"""

from dataclasses import dataclass

import numpy as np

from .. import quaternion as quat
from ..scene import NEAR_PLANE, Camera

# Mahalanobis cutoff: the footprint is truncated at 3 sigma.
MAX_MAHALANOBIS_SQ = 9.0
MIN_DET = 1e-20


@dataclass
class Projected:
    means2d: np.ndarray  # (G, 2)
    conics: np.ndarray  # (G, 3): inverse 2D covariance entries a, b, c
    depths: np.ndarray  # (G,) camera-space z
    bbox: np.ndarray  # (G, 4) int64: x0, x1, y0, y1 inclusive pixel range
    visible: np.ndarray  # (G,) bool
    order: np.ndarray  # visible indices sorted front to back, ties by index
    # cached intermediates for the VJP
    cam_points: np.ndarray
    jacobians: np.ndarray
    cov_cam: np.ndarray
    cov2d: np.ndarray
    rot_local: np.ndarray
    unit_q: np.ndarray
    scales: np.ndarray


def project_gaussians(positions, scales, rotations, cam: Camera):
    tc = cam.to_camera(positions)
    tx, ty, tz = tc[:, 0], tc[:, 1], tc[:, 2]
    G = len(positions)
    in_front = tz > NEAR_PLANE
    safe_z = np.where(in_front, tz, 1.0)

    qn = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
    Rq = quat.to_rotation_matrix(qn)
    M = Rq * scales[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)
    W = cam.rotation
    cov_cam = W @ cov3 @ W.T

    J = np.zeros((G, 2, 3))
    J[:, 0, 0] = cam.fx / safe_z
    J[:, 0, 2] = -cam.fx * tx / safe_z**2
    J[:, 1, 1] = cam.fy / safe_z
    J[:, 1, 2] = -cam.fy * ty / safe_z**2
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = in_front & (det > MIN_DET) & np.isfinite(det)
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    conics = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)

    means2d = np.stack([cam.fx * tx / safe_z + cam.cx, cam.fy * ty / safe_z + cam.cy], axis=1)
    half_tr = 0.5 * (a + c)
    lam_max = half_tr + np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    radius = np.sqrt(MAX_MAHALANOBIS_SQ * np.maximum(lam_max, 0.0)) * (1.0 + 1e-9)

    with np.errstate(invalid="ignore"):
        x0 = np.ceil(means2d[:, 0] - radius)
        x1 = np.floor(means2d[:, 0] + radius)
        y0 = np.ceil(means2d[:, 1] - radius)
        y1 = np.floor(means2d[:, 1] + radius)
    ok &= np.isfinite(x0) & np.isfinite(x1) & np.isfinite(y0) & np.isfinite(y1)
    big = float(max(cam.width, cam.height) + 1)
    x0 = np.clip(np.nan_to_num(x0), 0, big)
    y0 = np.clip(np.nan_to_num(y0), 0, big)
    x1 = np.clip(np.nan_to_num(x1), -1, cam.width - 1)
    y1 = np.clip(np.nan_to_num(y1), -1, cam.height - 1)
    bbox = np.stack([x0, x1, y0, y1], axis=1).astype(np.int64)
    ok &= (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])

    idx = np.flatnonzero(ok)
    order = idx[np.argsort(tz[idx], kind="stable")]
    return Projected(
        means2d=np.ascontiguousarray(means2d),
        conics=np.ascontiguousarray(conics),
        depths=tz.copy(),
        bbox=np.ascontiguousarray(bbox),
        visible=ok,
        order=order.astype(np.int64),
        cam_points=tc,
        jacobians=J,
        cov_cam=cov_cam,
        cov2d=cov2d,
        rot_local=Rq,
        unit_q=qn,
        scales=np.asarray(scales, dtype=float),
    )


def project_gaussians_vjp(proj: Projected, rotations, cam: Camera, g_means2d, g_conics, g_depths):
    """Chain screen-space gradients back to positions, scales and rotations."""
    vis = proj.visible[:, None]
    g_means2d = np.where(vis, g_means2d, 0.0)
    g_conics = np.where(vis, g_conics, 0.0)
    g_depths = np.where(proj.visible, g_depths, 0.0)

    tc = proj.cam_points
    tx, ty = tc[:, 0], tc[:, 1]
    tz = np.where(proj.visible, tc[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy

    # conic = inverse(cov2d); the off-diagonal entry appears twice in the quadratic form
    A = np.zeros((len(tc), 2, 2))
    A[:, 0, 0] = proj.conics[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = proj.conics[:, 1]
    A[:, 1, 1] = proj.conics[:, 2]
    gA = np.zeros_like(A)
    gA[:, 0, 0] = g_conics[:, 0]
    gA[:, 0, 1] = gA[:, 1, 0] = 0.5 * g_conics[:, 1]
    gA[:, 1, 1] = g_conics[:, 2]
    g_cov2d = -A @ gA @ A

    J = proj.jacobians
    g_cov_cam = np.swapaxes(J, 1, 2) @ g_cov2d @ J
    g_J = 2.0 * g_cov2d @ J @ proj.cov_cam

    g_t = np.zeros_like(tc)
    g_t[:, 0] = g_means2d[:, 0] * fx / tz + g_J[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] = g_means2d[:, 1] * fy / tz + g_J[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] = (
        g_depths
        - g_means2d[:, 0] * fx * tx / tz**2
        - g_means2d[:, 1] * fy * ty / tz**2
        + g_J[:, 0, 0] * (-fx / tz**2)
        + g_J[:, 0, 2] * (2 * fx * tx / tz**3)
        + g_J[:, 1, 1] * (-fy / tz**2)
        + g_J[:, 1, 2] * (2 * fy * ty / tz**3)
    )
    g_t = np.where(vis, g_t, 0.0)
    W = cam.rotation
    g_positions = g_t @ W

    g_cov3 = W.T @ g_cov_cam @ W
    Rq = proj.rot_local
    s = proj.scales
    M = Rq * s[:, None, :]
    g_M = 2.0 * g_cov3 @ M
    g_scales = np.sum(g_M * Rq, axis=1)
    g_Rq = g_M * s[:, None, :]
    g_unit = quat.rotation_matrix_vjp(proj.unit_q, g_Rq)
    g_rotations = quat.normalize_vjp(rotations, g_unit)
    g_scales = np.where(vis, g_scales, 0.0)
    g_rotations = np.where(vis, g_rotations, 0.0)
    return g_positions, g_scales, g_rotations
