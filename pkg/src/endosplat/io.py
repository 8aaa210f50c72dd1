"""On-disk sequence layout, file formats and result export.

A sequence directory holds, per frame index ``NNNNNN``:

    NNNNNN.png        8-bit RGB color
    NNNNNN.pfm        float depth in meters (or NNNNNN.depth.png, 16-bit, times depth_scale)
    NNNNNN.txt        4x4 row-major world-to-camera pose
    NNNNNN.mask.png   optional, nonzero on instrument pixels
    NNNNNN.flo        optional, flow from the previous frame's pixels into this frame

plus ``meta.json`` with ``fx, fy, cx, cy, W, H, depth_scale, fps``.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IntrinsicsMismatchError, MalformedPoseError, MissingFileError, SequenceFormatError
from .scene import Camera, Frame, GaussianSet

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
POSE_ATOL = 1e-4
META_KEYS = ("fx", "fy", "cx", "cy", "W", "H")
TRACK_COLUMNS = ("point_id", "frame", "u", "v", "x", "y", "z", "visible")


def frame_name(index):
    return f"{index:06d}"


# ---------------------------------------------------------------- raw formats


def read_pfm(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header = fh.readline().strip()
            if header not in (b"Pf", b"PF"):
                raise SequenceFormatError(path, "not a PFM file")
            channels = 1 if header == b"Pf" else 3
            dims = fh.readline().split()
            width, height = int(dims[0]), int(dims[1])
            scale = float(fh.readline().strip())
            dtype = "<f4" if scale < 0 else ">f4"
            data = np.frombuffer(fh.read(), dtype=dtype)
    except (OSError, ValueError, IndexError) as exc:
        if isinstance(exc, SequenceFormatError):
            raise
        raise SequenceFormatError(path, f"unreadable PFM ({exc})") from None
    expected = width * height * channels
    if data.size != expected:
        raise SequenceFormatError(path, f"PFM holds {data.size} values, expected {expected}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    # rows are stored bottom to top
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pfm(path, image):
    image = np.asarray(image, dtype=np.float32)
    header = b"Pf" if image.ndim == 2 else b"PF"
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{width} {height}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(image).astype("<f4").tobytes())


def read_flo(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = struct.unpack("<f", fh.read(4))[0]
            if magic != FLO_MAGIC:
                raise SequenceFormatError(path, "bad flow file magic number")
            width, height = struct.unpack("<ii", fh.read(8))
            data = np.frombuffer(fh.read(), dtype="<f4")
    except (OSError, struct.error) as exc:
        raise SequenceFormatError(path, f"unreadable flow file ({exc})") from None
    if data.size != width * height * 2:
        raise SequenceFormatError(path, f"flow file holds {data.size} values, expected {width * height * 2}")
    return data.reshape(height, width, 2).astype(np.float32)


def write_flo(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    height, width = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", width, height))
        fh.write(flow.tobytes())


def read_pose(path):
    """4x4 world-to-camera matrix; near-orthonormal rotations are snapped."""
    path = Path(path)
    try:
        values = np.array(path.read_text().split(), dtype=float)
    except OSError as exc:
        raise MissingFileError(path, str(exc)) from None
    except ValueError:
        raise MalformedPoseError(path, "pose contains non-numeric entries") from None
    if values.size != 16:
        raise MalformedPoseError(path, f"pose has {values.size} numbers, expected 16")
    pose = values.reshape(4, 4)
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0]):
        raise MalformedPoseError(path, "last pose row must be 0 0 0 1")
    R = pose[:3, :3]
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > POSE_ATOL or np.linalg.det(R) <= 0:
        raise MalformedPoseError(path, f"rotation is not orthonormal (error {err:.2e})")
    if err > 1e-9:
        U, _, Vt = np.linalg.svd(R)
        pose[:3, :3] = U @ Vt
    return pose


def write_pose(path, pose):
    pose = np.asarray(pose, dtype=float).reshape(4, 4)
    Path(path).write_text("\n".join(" ".join(f"{v:.17g}" for v in row) for row in pose) + "\n")


def read_rgb(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise SequenceFormatError(path, f"unreadable image ({exc})") from None


def write_rgb(path, rgb):
    data = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_mask(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im) != 0 if im.mode != "RGB" else np.any(np.asarray(im) != 0, axis=2)
    except (OSError, ValueError) as exc:
        raise SequenceFormatError(path, f"unreadable mask ({exc})") from None


def write_mask(path, mask):
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, mode="L").save(path)


def read_depth_png(path, depth_scale):
    try:
        with Image.open(path) as im:
            raw = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise SequenceFormatError(path, f"unreadable depth image ({exc})") from None
    depth = raw * depth_scale
    depth[raw == 0] = np.nan
    return depth


def write_depth_png(path, depth, depth_scale):
    raw = np.nan_to_num(np.asarray(depth, dtype=float) / depth_scale, nan=0.0)
    Image.fromarray(np.clip(np.rint(raw), 0, 65535).astype(np.uint16)).save(path)


# ---------------------------------------------------------------- sequences


def read_meta(root):
    path = Path(root) / "meta.json"
    if not path.exists():
        raise MissingFileError(path, "missing meta.json")
    try:
        meta = json.loads(path.read_text())
    except ValueError as exc:
        raise SequenceFormatError(path, f"invalid JSON ({exc})") from None
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise SequenceFormatError(path, f"missing keys: {', '.join(missing)}")
    meta.setdefault("depth_scale", 1.0)
    meta.setdefault("fps", 0.0)
    return meta


def _frame_indices(root):
    indices = sorted(int(p.stem) for p in Path(root).glob("[0-9]" * 6 + ".txt"))
    if not indices:
        raise MissingFileError(Path(root), "no pose files found")
    for expect, got in enumerate(indices):
        if expect != got:
            raise MissingFileError(Path(root) / f"{frame_name(expect)}.txt", "frame indices are not contiguous")
    return indices


def _check_shape(path, array, W, H):
    if array.shape[:2] != (H, W):
        raise IntrinsicsMismatchError(path, f"size {array.shape[1]}x{array.shape[0]} does not match meta {W}x{H}")


def read_frame(root, index, meta=None):
    root = Path(root)
    meta = meta or read_meta(root)
    W, H = int(meta["W"]), int(meta["H"])
    stem = frame_name(index)

    def need(name):
        p = root / name
        if not p.exists():
            raise MissingFileError(p, "missing file")
        return p

    pose = read_pose(need(f"{stem}.txt"))
    color_path = need(f"{stem}.png")
    rgb = read_rgb(color_path)
    _check_shape(color_path, rgb, W, H)
    if (root / f"{stem}.pfm").exists():
        depth_path = root / f"{stem}.pfm"
        depth = read_pfm(depth_path).astype(np.float64)
    else:
        depth_path = need(f"{stem}.depth.png")
        depth = read_depth_png(depth_path, float(meta["depth_scale"]))
    _check_shape(depth_path, depth, W, H)
    mask = flow = None
    if (root / f"{stem}.mask.png").exists():
        mask = read_mask(root / f"{stem}.mask.png")
        _check_shape(root / f"{stem}.mask.png", mask, W, H)
    if (root / f"{stem}.flo").exists():
        flow = read_flo(root / f"{stem}.flo").astype(np.float64)
        _check_shape(root / f"{stem}.flo", flow, W, H)
    cam = Camera.from_pose((meta["fx"], meta["fy"], meta["cx"], meta["cy"]), W, H, pose)
    return Frame(rgb=rgb, depth=depth, camera=cam, mask=mask, flow=flow, index=index)


class Sequence:
    """Lazily loaded frame sequence; iterating yields Frames in index order."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise MissingFileError(self.root, "sequence directory does not exist")
        self.meta = read_meta(self.root)
        self.indices = _frame_indices(self.root)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return read_frame(self.root, self.indices[i], self.meta)

    def __iter__(self):
        for i in self.indices:
            yield read_frame(self.root, i, self.meta)


def load_sequence(path):
    return Sequence(path)


def write_sequence(root, frames, fps=30.0, depth_format="pfm", depth_scale=1.0):
    """Materialize frames in the sequence layout (all frames share intrinsics)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = list(frames)
    cam = frames[0].camera
    meta = {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "W": cam.width,
        "H": cam.height,
        "depth_scale": depth_scale,
        "fps": fps,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for i, f in enumerate(frames):
        stem = frame_name(i)
        write_rgb(root / f"{stem}.png", f.rgb)
        if depth_format == "pfm":
            write_pfm(root / f"{stem}.pfm", f.depth)
        else:
            write_depth_png(root / f"{stem}.depth.png", np.where(f.valid_depth, f.depth, np.nan), depth_scale)
        write_pose(root / f"{stem}.txt", f.camera.pose)
        if f.mask is not None:
            write_mask(root / f"{stem}.mask.png", f.mask)
        if f.flow is not None:
            write_flo(root / f"{stem}.flo", f.flow)
    return root


# ---------------------------------------------------------------- queries and results


def read_queries(path):
    """Rows of ``frame, u, v`` or ``frame, x, y, z`` (header optional).

    Returns ``(births, points)`` with points as a list of 2- or 3-vectors.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path, "queries file does not exist")
    births, points = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row if c.strip()]
            if not row or row[0].startswith("#"):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise SequenceFormatError(path, f"line {lineno}: non-numeric query") from None
            if len(values) not in (3, 4) or values[0] != int(values[0]) or values[0] < 0:
                raise SequenceFormatError(path, f"line {lineno}: expected frame,u,v or frame,x,y,z")
            births.append(int(values[0]))
            points.append(np.array(values[1:]))
    if not points:
        raise SequenceFormatError(path, "no queries")
    return np.array(births, dtype=np.int64), points


def write_queries(path, births, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = len(points[0])
        w.writerow(["frame", "u", "v"] if dim == 2 else ["frame", "x", "y", "z"])
        for b, p in zip(births, points):
            w.writerow([int(b)] + [repr(float(c)) for c in p])


def _fmt(v):
    return "nan" if not np.isfinite(v) else repr(float(v))


def write_tracks(path, tracks):
    """Trajectory CSV: one row per (point, frame) since the point's birth."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for pid, rows in enumerate(tracks.rows):
            for frame, u, v, x, y, z, visible in rows:
                w.writerow([pid, frame, _fmt(u), _fmt(v), _fmt(x), _fmt(y), _fmt(z), int(visible)])


def read_tracks(path):
    """Inverse of :func:`write_tracks`; returns a dict of column arrays."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    out = {}
    for col in TRACK_COLUMNS:
        kind = int if col in ("point_id", "frame", "visible") else float
        out[col] = np.array([kind(r[col]) for r in rows])
    return out


def write_gt_tracks(path, tracks_2d, tracks_3d, visible):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        N, T = visible.shape
        for pid in range(N):
            for t in range(T):
                u, v = tracks_2d[pid, t]
                x, y, z = tracks_3d[pid, t]
                w.writerow([pid, t, _fmt(u), _fmt(v), _fmt(x), _fmt(y), _fmt(z), int(visible[pid, t])])


def tracks_to_arrays(columns, n_frames=None):
    """Dense (N, T, 2) screen tracks and (N, T) visibility from CSV columns."""
    N = int(columns["point_id"].max()) + 1 if len(columns["point_id"]) else 0
    T = n_frames if n_frames is not None else int(columns["frame"].max()) + 1
    uv = np.full((N, T, 2), np.nan)
    vis = np.zeros((N, T), dtype=bool)
    uv[columns["point_id"], columns["frame"]] = np.stack([columns["u"], columns["v"]], axis=1)
    vis[columns["point_id"], columns["frame"]] = columns["visible"].astype(bool)
    return uv, vis


def write_ply(path, scene: GaussianSet):
    """ASCII PLY with positions, colors (0-255), per-axis scales and labels."""
    n = len(scene)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property double scale_0",
        "property double scale_1",
        "property double scale_2",
        "property int label",
        "end_header",
    ]
    rgb = np.clip(np.rint(scene.colors * 255.0), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(n):
            p = [repr(float(v)) for v in scene.positions[i]]
            s = [repr(float(v)) for v in scene.scales[i]]
            c = [str(v) for v in rgb[i]]
            fh.write(" ".join(p + c + s + [str(int(scene.labels[i]))]) + "\n")


def read_ply(path):
    """Minimal reader for files written by :func:`write_ply`."""
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    n = int(next(line.split()[-1] for line in lines if line.startswith("element vertex")))
    data = np.array([line.split() for line in lines[end + 1 : end + 1 + n]], dtype=float).reshape(n, 10)
    return {
        "positions": data[:, 0:3],
        "colors": data[:, 3:6] / 255.0,
        "scales": data[:, 6:9],
        "labels": data[:, 9].astype(np.int64),
    }


# ---------------------------------------------------------------- metrics


def metrics_schema():
    return json.loads(resources.files("endosplat").joinpath("metrics.schema.json").read_text())


def write_metrics(out_dir, report, extra=None):
    """Write ``metrics.json``, ``metrics.csv`` and ``point_errors.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    if extra:
        summary.update(extra)
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mte", "delta_avg", "survival", "n_points", "n_frames"])
        w.writerow([repr(report.mte), repr(report.delta_avg), repr(report.survival), report.n_points, report.n_frames])
    with open(out_dir / "point_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_id", "frame", "error"])
        for pid, curve in enumerate(report.point_errors):
            for t, e in enumerate(curve):
                w.writerow([pid, t, _fmt(e)])
    return summary
