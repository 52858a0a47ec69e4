"""
COLMAP text-model ingestion and export.

Poses in ``images.txt`` are already world-to-camera with the OpenCV axis
convention, so they are used as stored.  COLMAP puts pixel centres at
half-integers while this package puts them at integers; the principal point
is shifted by half a pixel on the way in and out.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, UnsupportedCameraModel
from .fileio import fmt
from .geom import CameraView, Intrinsics, Pose, quat_to_rotmat

_PARAM_COUNT = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}


@dataclass
class ColmapModel:
    views: list  # CameraView, sorted by image id
    names: dict  # image id -> file name
    points: np.ndarray
    point_colors: np.ndarray


def _records(path: Path):
    """Yield ``(line number, text)`` for non-comment lines, keeping blank ones."""
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            text = line.rstrip("\n").rstrip("\r")
            if text.lstrip().startswith("#"):
                continue
            yield n, text


def _floats(path, n, parts, what):
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ParseError(path, n, f"non-numeric {what}") from None
    if not np.all(np.isfinite(vals)):
        raise ParseError(path, n, f"non-finite {what}")
    return vals


def _int(path, n, token, what):
    try:
        return int(token)
    except ValueError:
        raise ParseError(path, n, f"non-integer {what}") from None


def read_cameras(path) -> dict:
    path = Path(path)
    cams = {}
    for n, text in _records(path):
        parts = text.split()
        if not parts:
            continue
        if len(parts) < 4:
            raise ParseError(path, n, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS")
        cid = _int(path, n, parts[0], "camera id")
        model = parts[1]
        if model not in _PARAM_COUNT:
            raise UnsupportedCameraModel(f"{path}:{n}: camera model {model}")
        w, h = _int(path, n, parts[2], "width"), _int(path, n, parts[3], "height")
        params = _floats(path, n, parts[4:], "camera parameter")
        if len(params) != _PARAM_COUNT[model]:
            raise ParseError(path, n, f"{model} takes {_PARAM_COUNT[model]} parameters, got {len(params)}")
        if model == "SIMPLE_PINHOLE":
            f, cx, cy = params
            fx = fy = f
        else:
            fx, fy, cx, cy = params
        try:
            cams[cid] = Intrinsics(fx, fy, cx - 0.5, cy - 0.5, w, h)
        except ValueError as exc:
            raise ParseError(path, n, str(exc)) from None
    return cams


def read_images(path, cameras: dict) -> tuple[list, dict]:
    path = Path(path)
    views, names = [], {}
    expect_header = True
    for n, text in _records(path):
        if not expect_header:
            expect_header = True  # the 2D-point line of the previous image; unused
            continue
        parts = text.split()
        if not parts:
            continue
        if len(parts) < 10:
            raise ParseError(path, n, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        iid = _int(path, n, parts[0], "image id")
        q = np.array(_floats(path, n, parts[1:5], "quaternion"))
        t = np.array(_floats(path, n, parts[5:8], "translation"))
        cid = _int(path, n, parts[8], "camera id")
        if cid not in cameras:
            raise ParseError(path, n, f"unknown camera id {cid}")
        norm = np.linalg.norm(q)
        if norm == 0:
            raise ParseError(path, n, "zero quaternion")
        views.append(CameraView(iid, cameras[cid], Pose(quat_to_rotmat(q / norm), t)))
        names[iid] = " ".join(parts[9:])
        expect_header = False
    views.sort(key=lambda v: v.id)
    return views, names


_COUNT_RE = re.compile(r"#\s*Number of points:\s*(\d+)")


def read_points3d(path) -> tuple[np.ndarray, np.ndarray]:
    """Point positions and colours; a ``# Number of points`` header is checked against the rows."""
    path = Path(path)
    declared = None
    rows, cols = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            text = line.strip()
            if text.startswith("#"):
                m = _COUNT_RE.match(text)
                if m:
                    declared = (int(m.group(1)), n)
                continue
            if not text:
                continue
            parts = text.split()
            if len(parts) < 8:
                raise ParseError(path, n, "expected POINT3D_ID X Y Z R G B ERROR [TRACK]")
            _int(path, n, parts[0], "point id")
            rows.append(_floats(path, n, parts[1:4], "coordinate"))
            cols.append(_floats(path, n, parts[4:7], "colour"))
    if declared is not None and declared[0] != len(rows):
        raise ParseError(path, declared[1], f"header declares {declared[0]} points, found {len(rows)}")
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return pts, np.array(cols, dtype=np.float64).reshape(-1, 3) / 255.0


def load_colmap(directory) -> ColmapModel:
    """Parse ``cameras.txt``, ``images.txt`` and ``points3D.txt`` from ``directory``.

    Raises
    ------
    ParseError
    UnsupportedCameraModel
    """
    d = Path(directory)
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (d / name).is_file():
            raise ParseError(d / name, 0, "file not found")
    cams = read_cameras(d / "cameras.txt")
    views, names = read_images(d / "images.txt", cams)
    pts, cols = read_points3d(d / "points3D.txt")
    return ColmapModel(views, names, pts, cols)


def write_colmap(directory, views, names: dict, points, colors=None):
    """Write a text model with one PINHOLE camera per distinct intrinsics."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cam_ids: dict = {}
    for v in views:
        cam_ids.setdefault(v.intrinsics, len(cam_ids) + 1)
    with open(d / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        fh.write(f"# Number of cameras: {len(cam_ids)}\n")
        for intr, cid in cam_ids.items():
            fh.write(f"{cid} PINHOLE {intr.width} {intr.height} {fmt(intr.fx)} {fmt(intr.fy)} "
                     f"{fmt(intr.cx + 0.5)} {fmt(intr.cy + 0.5)}\n")
    with open(d / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        fh.write(f"# Number of images: {len(views)}\n")
        for v in views:
            q = rotmat_to_quat(v.pose.rotation)
            t = v.pose.translation
            fh.write(f"{v.id} {' '.join(map(fmt, q))} {' '.join(map(fmt, t))} "
                     f"{cam_ids[v.intrinsics]} {names[v.id]}\n\n")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.full((len(pts), 3), 128) if colors is None else np.round(np.clip(colors, 0, 1) * 255).astype(int)
    with open(d / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        fh.write(f"# Number of points: {len(pts)}\n")
        for i, (p, c) in enumerate(zip(pts, rgb), 1):
            fh.write(f"{i} {' '.join(map(fmt, p))} {c[0]} {c[1]} {c[2]} 0.0\n")


def rotmat_to_quat(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


# -- a COLMAP capture as a loop-ready scene --------------------------------------------


@dataclass
class CapturedScene:
    """Real (or exported) capture: posed images, SfM points, optional correspondence files.

    Images whose name starts with ``test`` are held out; when none do, every
    eighth image (by id) is.
    """

    name: str
    candidates: list
    test_views: list
    images: dict = field(repr=False)
    sfm_points: np.ndarray = field(repr=False)
    correspondence_dir: Optional[Path] = None
    geometry: None = None

    @property
    def views(self) -> dict:
        return {v.id: v for v in self.candidates + self.test_views}

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.sfm_points.min(axis=0), self.sfm_points.max(axis=0)
        return (lo + hi) / 2

    @property
    def extent(self) -> float:
        lo, hi = self.sfm_points.min(axis=0), self.sfm_points.max(axis=0)
        return float(np.linalg.norm(hi - lo) / 2)

    depth = None  # no ground-truth depth

    def initial_views(self, count: int) -> list:
        from .scenes import azimuth_spread

        return azimuth_spread(self.candidates, self.center, count)


def load_captured_scene(directory) -> CapturedScene:
    """COLMAP model plus ``images/<NAME>`` PPM files and optional ``correspondences/<id>.txt``."""
    from .fileio import read_ppm

    d = Path(directory)
    model = load_colmap(d)
    images = {}
    for v in model.views:
        p = d / "images" / model.names[v.id]
        if not p.is_file():
            raise ParseError(p, 0, "image file not found")
        img = read_ppm(p)
        if img.shape[:2] != (v.intrinsics.height, v.intrinsics.width):
            raise ParseError(p, 0, f"image is {img.shape[1]}x{img.shape[0]}, camera expects "
                                   f"{v.intrinsics.width}x{v.intrinsics.height}")
        images[v.id] = img
    held = [v for v in model.views if model.names[v.id].startswith("test")]
    if not held:
        held = model.views[::8]
    held_ids = {v.id for v in held}
    corr = d / "correspondences"
    return CapturedScene(
        name=d.name, candidates=[v for v in model.views if v.id not in held_ids], test_views=held,
        images=images, sfm_points=model.points, correspondence_dir=corr if corr.is_dir() else None,
    )
