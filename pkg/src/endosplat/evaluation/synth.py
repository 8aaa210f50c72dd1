"""Synthetic RGB-D sequences with exact ground truth.

The scene is a textured sheet ``X(a, b, t) = (a, b, h0) + disp(a, b, t)``
seen by a pinhole camera. Texture is attached to the material coordinates
``(a, b)`` so every pixel has a known material point, which gives exact depth,
flow and point trajectories. Stored values are quantized the way the on-disk
format stores them (8-bit color, float32 depth and flow), so a write/read round
trip reproduces the frames bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..errors import ContractViolation
from ..scene import Camera, Frame, pixel_grid, project_point

WIDTH = HEIGHT = 64
FOCAL = 64.0
SHEET_DEPTH = 1.0

OCCLUDER_GRAY = 0.5
OCCLUDER_DEPTH = 0.5


@dataclass
class Occluder:
    """Vertical bar in image space, present on frames ``[first, last)``."""

    col0: int
    col1: int
    first: int
    last: int


@dataclass
class SynthScript:
    name: str
    frames: int = 20
    half_size: float = 1.0  # sheet spans [-half_size, half_size]^2 in material coordinates
    amplitude_frac: float = 0.0  # bump amplitude as a fraction of the scene extent
    bump_radius: float = 0.25
    bump_center: tuple = (0.0, 0.0)
    bump_direction: tuple = (2.0, 1.0, 2.0)
    period: float = 20.0  # frames per oscillation
    pan_px: float = 0.0  # camera x-translation per frame, in pixels at the sheet depth
    occluder: Optional[Occluder] = None
    query_cols: tuple = (16, 27, 37, 48)
    query_rows: tuple = (16, 27, 37, 48)

    @property
    def extent(self):
        """Diagonal of the sheet's bounding square."""
        return 2.0 * np.sqrt(2.0) * self.half_size

    @property
    def amplitude(self):
        return self.amplitude_frac * self.extent

    def validate(self):
        if not self.half_size > 0:
            raise ContractViolation(f"script '{self.name}': sheet has zero area")
        if self.frames < 1:
            raise ContractViolation(f"script '{self.name}': needs at least one frame")
        if self.amplitude_frac and not self.bump_radius > 0:
            raise ContractViolation(f"script '{self.name}': bump radius must be positive")
        if not self.period > 0:
            raise ContractViolation(f"script '{self.name}': period must be positive")


SCRIPTS = {
    "static": SynthScript("static", frames=20),
    "sinusoidal": SynthScript("sinusoidal", frames=50, amplitude_frac=0.02),
    "pan": SynthScript("pan", frames=20, pan_px=0.5),
    "occluder": SynthScript(
        "occluder",
        frames=50,
        amplitude_frac=0.02,
        occluder=Occluder(col0=22, col1=42, first=15, last=35),
        query_cols=(26, 30, 34, 38),
    ),
}


def get_script(script) -> SynthScript:
    if isinstance(script, SynthScript):
        return script
    try:
        return SCRIPTS[script]
    except KeyError:
        raise ContractViolation(f"unknown synthetic script '{script}' (known: {', '.join(SCRIPTS)})") from None


@dataclass
class SyntheticSequence:
    script: SynthScript
    frames: list
    queries: np.ndarray  # (N, 2) screen points at their birth frame
    births: np.ndarray  # (N,)
    gt_tracks_2d: np.ndarray  # (N, T, 2)
    gt_tracks_3d: np.ndarray  # (N, T, 3)
    gt_visible: np.ndarray  # (N, T) bool
    material: np.ndarray = field(repr=False, default=None)  # (N, 2) material coordinates of the queries

    def __len__(self):
        return len(self.frames)


class Sheet:
    """Analytic deforming textured sheet."""

    def __init__(self, script: SynthScript, seed=0):
        self.script = script
        rng = np.random.default_rng(seed)
        # three sinusoids per channel, wavelengths of 8-16 px at the sheet depth
        n = 3
        wavelength = rng.uniform(8.0, 16.0, size=(3, n)) / FOCAL * SHEET_DEPTH
        angle = rng.uniform(0.0, np.pi, size=(3, n))
        self._k = 2.0 * np.pi / wavelength[..., None] * np.stack([np.cos(angle), np.sin(angle)], axis=-1)
        self._phase = rng.uniform(0.0, 2.0 * np.pi, size=(3, n))
        self._base = rng.uniform(0.35, 0.65, size=3)
        d = np.asarray(script.bump_direction, dtype=float)
        self._dir = d / np.linalg.norm(d)

    def color(self, ab):
        ab = np.asarray(ab, dtype=float)
        arg = np.einsum("...d,cnd->...cn", ab, self._k) + self._phase
        return np.clip(self._base + 0.1 * np.sin(arg).sum(axis=-1), 0.0, 1.0)

    def _profile(self, ab):
        s = self.script
        r2 = np.sum((ab - np.asarray(s.bump_center)) ** 2, axis=-1)
        return np.exp(-r2 / (2.0 * s.bump_radius**2))

    def oscillation(self, t):
        s = self.script
        return s.amplitude * np.sin(2.0 * np.pi * t / s.period)

    def displacement(self, ab, t):
        ab = np.asarray(ab, dtype=float)
        if not self.script.amplitude_frac:
            return np.zeros(ab.shape[:-1] + (3,))
        return (self.oscillation(t) * self._profile(ab))[..., None] * self._dir

    def position(self, ab, t):
        ab = np.asarray(ab, dtype=float)
        base = np.concatenate([ab, np.full(ab.shape[:-1] + (1,), SHEET_DEPTH)], axis=-1)
        return base + self.displacement(ab, t)

    def camera(self, t):
        shift = self.script.pan_px * t * SHEET_DEPTH / FOCAL
        return Camera(
            FOCAL, FOCAL, (WIDTH - 1) / 2.0, (HEIGHT - 1) / 2.0, WIDTH, HEIGHT, np.eye(3), np.array([-shift, 0.0, 0.0])
        )

    def material_at(self, u, t, iterations=50, tol=1e-13):
        """Material coordinates seen at screen points ``u`` on frame ``t`` (Newton)."""
        cam = self.camera(t)
        u = np.asarray(u, dtype=float)
        flat = u.reshape(-1, 2)
        # start from the undeformed sheet
        xc = np.stack([(flat[:, 0] - cam.cx) / cam.fx, (flat[:, 1] - cam.cy) / cam.fy, np.ones(len(flat))], axis=1)
        ab = cam.to_world(xc * SHEET_DEPTH)[:, :2]
        h = 1e-7
        for _ in range(iterations):
            f = project_point(self.position(ab, t), cam)[0] - flat
            if np.max(np.abs(f)) < tol:
                break
            ja = (project_point(self.position(ab + [h, 0.0], t), cam)[0] - f - flat) / h
            jb = (project_point(self.position(ab + [0.0, h], t), cam)[0] - f - flat) / h
            J = np.stack([ja, jb], axis=2)
            ab = ab - np.linalg.solve(J, f[..., None])[..., 0]
        return ab.reshape(u.shape)

    def inside(self, ab):
        return np.all(np.abs(ab) <= self.script.half_size, axis=-1)


def generate(script="static", seed=0, frames=None) -> SyntheticSequence:
    """Render a synthetic sequence for a named script (or a SynthScript)."""
    script = get_script(script)
    if frames is not None:
        script = replace(script, frames=int(frames))
    script.validate()
    sheet = Sheet(script, seed)
    grid = pixel_grid(HEIGHT, WIDTH)
    T = script.frames

    qr, qc = np.meshgrid(script.query_rows, script.query_cols, indexing="ij")
    queries = np.stack([qc.ravel(), qr.ravel()], axis=1).astype(float)
    births = np.zeros(len(queries), dtype=np.int64)
    q_ab = sheet.material_at(queries, 0)

    frames_out = []
    tracks_2d = np.zeros((len(queries), T, 2))
    tracks_3d = np.zeros((len(queries), T, 3))
    visible = np.zeros((len(queries), T), dtype=bool)
    prev_ab = None
    for t in range(T):
        cam = sheet.camera(t)
        ab = sheet.material_at(grid, t)
        if not np.all(sheet.inside(ab)):
            raise ContractViolation(f"script '{script.name}': view leaves the sheet at frame {t}")
        X = sheet.position(ab, t)
        depth = cam.to_camera(X)[..., 2]
        rgb = sheet.color(ab)
        mask = np.zeros((HEIGHT, WIDTH), dtype=bool)
        occ = script.occluder
        occluded_now = occ is not None and occ.first <= t < occ.last
        if occluded_now:
            mask[:, occ.col0 : occ.col1] = True
            rgb[mask] = OCCLUDER_GRAY
            depth[mask] = OCCLUDER_DEPTH
        flow = None
        if prev_ab is not None:
            flow = project_point(sheet.position(prev_ab, t), cam)[0] - grid
            flow = flow.astype(np.float32).astype(float)
        frames_out.append(
            Frame(
                rgb=np.round(rgb * 255.0) / 255.0,
                depth=depth.astype(np.float32).astype(float),
                camera=cam,
                mask=mask if occ is not None else None,
                flow=flow,
                index=t,
            )
        )
        prev_ab = ab

        Xq = sheet.position(q_ab, t)
        uq, _, ok = project_point(Xq, cam)
        vis = ok & cam.in_image(np.nan_to_num(uq, nan=-1e9))
        if occluded_now:
            col = np.floor(uq[:, 0] + 0.5)
            vis &= ~((col >= occ.col0) & (col < occ.col1))
        tracks_2d[:, t] = uq
        tracks_3d[:, t] = Xq
        visible[:, t] = vis

    return SyntheticSequence(script, frames_out, queries, births, tracks_2d, tracks_3d, visible, q_ab)


__all__ = ["Occluder", "SCRIPTS", "Sheet", "SynthScript", "SyntheticSequence", "generate", "get_script"]
