"""Canonical scene containers, camera geometry and frames.

Conventions used throughout the package:

* quaternions are (w, x, y, z);
* camera poses map world to camera coordinates, ``x_cam = R @ x_world + t``;
* images are stored row-major as (H, W, ...) arrays and pixel ``(row, col)``
  has its center at screen coordinate ``u = (col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import quaternion as quat
from .errors import ContractViolation, InvalidDepthError

NEAR_PLANE = 1e-3
DEFAULT_OPACITY = 0.9
NO_LABEL = -1


@dataclass
class Gaussian:
    """A single colored Gaussian; mostly useful for building small scenes by hand."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray = field(default_factory=quat.identity)
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    opacity: float = DEFAULT_OPACITY
    update_count: int = 0
    label: int = NO_LABEL


@dataclass
class GaussianSet:
    """Structure-of-arrays storage for ``G`` Gaussians."""

    positions: np.ndarray  # (G, 3)
    scales: np.ndarray  # (G, 3), strictly positive
    rotations: np.ndarray  # (G, 4), unit quaternions
    colors: np.ndarray  # (G, 3)
    opacities: np.ndarray  # (G,)
    update_counts: np.ndarray = None  # (G,) int
    labels: np.ndarray = None  # (G,) int, NO_LABEL when unset

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(n)
        if self.update_counts is None:
            self.update_counts = np.zeros(n, dtype=np.int64)
        self.update_counts = np.asarray(self.update_counts, dtype=np.int64).reshape(n)
        if self.labels is None:
            self.labels = np.full(n, NO_LABEL, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_gaussians(cls, gaussians):
        gaussians = list(gaussians)
        return cls(
            positions=[g.position for g in gaussians],
            scales=[g.scale for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            colors=[g.color for g in gaussians],
            opacities=[g.opacity for g in gaussians],
            update_counts=[g.update_count for g in gaussians],
            labels=[g.label for g in gaussians],
        )

    def __getitem__(self, i):
        return Gaussian(
            self.positions[i].copy(),
            self.scales[i].copy(),
            self.rotations[i].copy(),
            self.colors[i].copy(),
            float(self.opacities[i]),
            int(self.update_counts[i]),
            int(self.labels[i]),
        )

    def copy(self):
        return GaussianSet(
            self.positions.copy(),
            self.scales.copy(),
            self.rotations.copy(),
            self.colors.copy(),
            self.opacities.copy(),
            self.update_counts.copy(),
            self.labels.copy(),
        )

    def subset(self, index):
        return GaussianSet(
            self.positions[index],
            self.scales[index],
            self.rotations[index],
            self.colors[index],
            self.opacities[index],
            self.update_counts[index],
            self.labels[index],
        )

    def concatenate(self, other):
        return GaussianSet(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.scales, other.scales]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.opacities, other.opacities]),
            np.concatenate([self.update_counts, other.update_counts]),
            np.concatenate([self.labels, other.labels]),
        )

    def check(self, atol=1e-6):
        """Raise ContractViolation if a stored invariant is broken."""
        if np.any(self.scales <= 0):
            raise ContractViolation("Gaussian scales must be strictly positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > atol):
            raise ContractViolation("Gaussian orientations must be unit quaternions")
        if np.any(self.update_counts < 0):
            raise ContractViolation("update counts must be non-negative")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ContractViolation("image size must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(self.rotation) < 0:
            raise ContractViolation(f"pose rotation is not orthonormal (error {err:.2e})")

    @classmethod
    def from_pose(cls, intrinsics, width, height, pose):
        fx, fy, cx, cy = intrinsics
        pose = np.asarray(pose, dtype=float)
        return cls(fx, fy, cx, cy, int(width), int(height), pose[:3, :3], pose[:3, 3])

    @property
    def intrinsics(self):
        return (self.fx, self.fy, self.cx, self.cy)

    @property
    def pose(self):
        P = np.eye(4)
        P[:3, :3] = self.rotation
        P[:3, 3] = self.translation
        return P

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def with_pose(self, pose):
        return Camera.from_pose(self.intrinsics, self.width, self.height, pose)

    def to_camera(self, x):
        return np.asarray(x, dtype=float) @ self.rotation.T + self.translation

    def to_world(self, xc):
        return (np.asarray(xc, dtype=float) - self.translation) @ self.rotation

    def in_image(self, u):
        """True where screen point ``u`` lands on a pixel of the image."""
        u = np.asarray(u, dtype=float)
        return (
            (u[..., 0] >= -0.5)
            & (u[..., 0] < self.width - 0.5)
            & (u[..., 1] >= -0.5)
            & (u[..., 1] < self.height - 0.5)
        )


@dataclass
class Frame:
    """One timestep of observations; rasters are (H, W[, C])."""

    rgb: np.ndarray
    depth: np.ndarray
    camera: Camera
    mask: Optional[np.ndarray] = None  # True on instrument pixels
    flow: Optional[np.ndarray] = None  # (H, W, 2) pixel offsets to this frame
    index: int = 0
    labels: Optional[np.ndarray] = None  # (H, W) semantic class per pixel, copied to new Gaussians

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        shape = (self.camera.height, self.camera.width)
        if self.rgb.shape != shape + (3,):
            raise ContractViolation(f"rgb shape {self.rgb.shape} does not match camera {shape}")
        if self.depth.shape != shape:
            raise ContractViolation(f"depth shape {self.depth.shape} does not match camera {shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != shape:
                raise ContractViolation("mask shape does not match camera")
        if self.flow is not None:
            self.flow = np.asarray(self.flow, dtype=float)
            if self.flow.shape != shape + (2,):
                raise ContractViolation("flow shape does not match camera")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != shape:
                raise ContractViolation("label shape does not match camera")

    @property
    def valid_depth(self):
        d = self.depth
        return np.isfinite(d) & (d > 0)

    @property
    def unmasked(self):
        if self.mask is None:
            return np.ones(self.depth.shape, dtype=bool)
        return ~self.mask


def covariance_from(q, s, atol=1e-6):
    """Covariance ``R(q) diag(s)^2 R(q)^T`` of a Gaussian."""
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > atol):
        raise ContractViolation("covariance_from needs a unit quaternion")
    if np.any(s <= 0):
        raise ContractViolation("covariance_from needs strictly positive scales")
    M = quat.to_rotation_matrix(q) * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def project_point(x, cam: Camera, near=NEAR_PLANE):
    """Project world points to the screen.

    Returns ``(u, z, valid)`` where ``u`` holds pixel coordinates, ``z`` the
    camera-space depth and ``valid`` is False for points at or behind the near
    plane (their ``u`` is NaN).
    """
    xc = cam.to_camera(x)
    z = xc[..., 2]
    valid = z > near
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.stack([cam.fx * xc[..., 0] / z + cam.cx, cam.fy * xc[..., 1] / z + cam.cy], axis=-1)
    u = np.where(valid[..., None], u, np.nan)
    return u, z, valid


def unproject(u, z, cam: Camera):
    """Lift screen points with known camera depth ``z`` to world space."""
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    xc = np.stack([(u[..., 0] - cam.cx) / cam.fx * z, (u[..., 1] - cam.cy) / cam.fy * z, z], axis=-1)
    return cam.to_world(xc)


def sample_depth(depth, u):
    """Depth at screen points ``u``; bilinear between pixel centers.

    Returns NaN wherever any contributing tap is invalid (NaN or <= 0) or the
    point falls outside the grid.
    """
    depth = np.asarray(depth, dtype=float)
    u = np.atleast_2d(np.asarray(u, dtype=float))
    H, W = depth.shape
    x, y = u[:, 0], u[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.zeros(len(u))
    ok = np.isfinite(x) & np.isfinite(y)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            w = wx * wy
            xi, yi = x0 + dx, y0 + dy
            used = w > 0
            inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            ok &= inside | ~used
            d = np.where(inside, depth[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)], np.nan)
            good = np.isfinite(d) & (d > 0)
            ok &= good | ~used
            out += np.where(used & good, w * np.nan_to_num(d), 0.0)
    return np.where(ok, out, np.nan)


def backproject(u, depth, cam: Camera):
    """World point seen at screen point ``u`` given a depth map (meters)."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    z = sample_depth(depth, u.reshape(-1, 2))
    if np.any(~np.isfinite(z)):
        raise InvalidDepthError("no valid depth at requested pixel(s)")
    x = unproject(u.reshape(-1, 2), z, cam)
    return x[0] if single else x


def pixel_grid(height, width):
    """Screen coordinates of all pixel centers, shape (H, W, 2)."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(float)
