"""Differentiable Gaussian rasterization of color, depth and opacity images.

The per-pixel kernels come from the compiled ``_raster`` extension when it is
importable and from the numpy implementation in ``_raster_py`` otherwise.
Set ``ENDOSPLAT_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation, EmptySceneError
from ..scene import Camera, GaussianSet
from . import _raster_py
from .geometry import MAX_MAHALANOBIS_SQ, Projected, project_gaussians, project_gaussians_vjp

logger = logging.getLogger(__name__)

TILE_SIZE = 16
MIN_TRANSMITTANCE = 1e-4


def _load_backends():
    backends = {"python": _raster_py}
    try:
        from . import _raster
    except ImportError:  # extension not built
        logger.debug("compiled rasterizer unavailable, using numpy fallback")
    else:
        backends["compiled"] = _raster
    return backends


BACKENDS = _load_backends()
BACKEND = "python" if os.environ.get("ENDOSPLAT_PURE_PYTHON") or "compiled" not in BACKENDS else "compiled"


def get_backend(name=None):
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"rasterizer backend '{name}' is not available (have {sorted(BACKENDS)})") from None


@dataclass
class RenderOutput:
    """Rendered images plus the per-pixel compositing records.

    Records of pixel ``p`` (row-major id ``row * W + col``) live at
    ``rec_start[p] : rec_start[p] + rec_count[p]`` in front-to-back order;
    each holds the Gaussian index, its alpha at the pixel and the
    transmittance in front of it.
    """

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    opacity: np.ndarray  # (H, W)
    transmittance: np.ndarray  # (H, W)
    rec_start: np.ndarray
    rec_count: np.ndarray
    rec_index: np.ndarray
    rec_alpha: np.ndarray
    rec_trans: np.ndarray
    projected: Projected
    features: np.ndarray
    camera: Camera
    backend: str

    def pixel_records(self, row, col):
        p = row * self.camera.width + col
        sl = slice(self.rec_start[p], self.rec_start[p] + self.rec_count[p])
        return self.rec_index[sl], self.rec_alpha[sl], self.rec_trans[sl]

    def signature(self):
        """Hashable summary of which Gaussians were composited where, in which order."""
        return (self.rec_count.tobytes(), self.rec_index.tobytes())


@dataclass
class ParamGradients:
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n))

    def as_dict(self):
        return {
            "positions": self.positions,
            "scales": self.scales,
            "rotations": self.rotations,
            "colors": self.colors,
            "opacities": self.opacities,
        }

    def __add__(self, other):
        return ParamGradients(**{k: v + other.as_dict()[k] for k, v in self.as_dict().items()})


def render(scene: GaussianSet, cam: Camera, backend=None):
    if len(scene) == 0:
        raise EmptySceneError("cannot render an empty scene")
    name = backend or BACKEND
    raster = get_backend(name)
    proj = project_gaussians(scene.positions, scene.scales, scene.rotations, cam)
    features = np.ascontiguousarray(np.concatenate([np.clip(scene.colors, 0.0, 1.0), proj.depths[:, None]], axis=1))
    opac = np.ascontiguousarray(scene.opacities, dtype=float)
    image, opacity, trans, start, count, idx, alpha, T = raster.rasterize_forward(
        proj.order,
        proj.bbox,
        proj.means2d,
        proj.conics,
        opac,
        features,
        cam.width,
        cam.height,
        TILE_SIZE,
        MIN_TRANSMITTANCE,
        MAX_MAHALANOBIS_SQ,
    )
    return RenderOutput(
        color=image[..., :3],
        depth=image[..., 3].copy(),
        opacity=opacity,
        transmittance=trans,
        rec_start=start,
        rec_count=count,
        rec_index=idx,
        rec_alpha=alpha,
        rec_trans=T,
        projected=proj,
        features=features,
        camera=cam,
        backend=name,
    )


def render_adjoint(scene: GaussianSet, cam: Camera, grad_color, grad_depth, grad_opacity=None, output=None):
    """Gradients of ``sum(grad_color * color) + sum(grad_depth * depth) + ...``.

    ``output`` is the forward result to differentiate; it is recomputed when
    omitted. The derivative is exact for the truncated compositing that the
    forward pass actually executed.
    """
    if output is None:
        output = render(scene, cam)
    H, W = cam.height, cam.width
    grad_color = np.asarray(grad_color, dtype=float)
    grad_depth = np.asarray(grad_depth, dtype=float)
    if grad_color.shape != (H, W, 3) or grad_depth.shape != (H, W):
        raise ContractViolation(
            f"gradient shapes {grad_color.shape}, {grad_depth.shape} do not match image {(H, W)}"
        )
    if grad_opacity is None:
        grad_opacity = np.zeros((H, W))
    grad_opacity = np.ascontiguousarray(grad_opacity, dtype=float)
    if grad_opacity.shape != (H, W):
        raise ContractViolation("opacity gradient shape does not match image")
    grad_image = np.ascontiguousarray(np.concatenate([grad_color, grad_depth[..., None]], axis=2))

    raster = get_backend(output.backend)
    proj = output.projected
    g_means, g_conics, g_opac, g_feat = raster.rasterize_backward(
        output.rec_start,
        output.rec_count,
        output.rec_index,
        output.rec_alpha,
        output.rec_trans,
        proj.means2d,
        proj.conics,
        np.ascontiguousarray(scene.opacities, dtype=float),
        output.features,
        grad_image,
        grad_opacity,
        W,
        H,
        TILE_SIZE,
    )
    g_pos, g_scale, g_rot = project_gaussians_vjp(proj, scene.rotations, cam, g_means, g_conics, g_feat[:, 3])
    inside = (scene.colors >= 0.0) & (scene.colors <= 1.0)
    return ParamGradients(
        positions=g_pos,
        scales=g_scale,
        rotations=g_rot,
        colors=np.where(inside, g_feat[:, :3], 0.0),
        opacities=g_opac,
    )


__all__ = [
    "BACKEND",
    "BACKENDS",
    "ParamGradients",
    "RenderOutput",
    "get_backend",
    "render",
    "render_adjoint",
]
