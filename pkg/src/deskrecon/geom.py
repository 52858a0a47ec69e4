"""
Pinhole cameras, rigid poses and two-view triangulation
=======================================================

Conventions used throughout the package:

* Poses are world-to-camera: ``X_cam = R @ X_world + t``.
* Camera frame is x right, y down, z forward (OpenCV / COLMAP).
* Pixel coordinates place pixel ``(row, col)`` at ``(u, v) = (col, row)``;
  a pixel is in bounds when ``0 <= u < width`` and ``0 <= v < height``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Optional, Sequence

import numpy as np

from .errors import BehindCamera, DegenerateGeometry

ORTHO_TOL = 1e-9
PARALLEL_TOL = 1e-6  # radians


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image size must be integral")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "Intrinsics":
        """Square-pixel intrinsics with the principal point at the image centre."""
        f = float(0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2.0))
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not proper (det != +1)")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking towards ``target``; ``up`` maps to -y."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, points) -> np.ndarray:
        """World points ``(..., 3)`` to camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True)
class CameraView:
    id: Hashable
    intrinsics: Intrinsics
    pose: Pose

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix ``K [R | t]``."""
        return self.intrinsics.K @ self.pose.matrix

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    def with_pose(self, pose: Pose, id=None) -> "CameraView":
        return CameraView(self.id if id is None else id, self.intrinsics, pose)


@dataclass(frozen=True)
class Correspondence:
    p_r: np.ndarray
    p_e: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_r", np.asarray(self.p_r, dtype=np.float64).reshape(2))
        object.__setattr__(self, "p_e", np.asarray(self.p_e, dtype=np.float64).reshape(2))

    def swapped(self) -> "Correspondence":
        return Correspondence(self.p_e, self.p_r)


@dataclass(frozen=True)
class SAPoint:
    position: np.ndarray
    reproj_error: float
    source_view: Hashable = None

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("SA-Point position must be finite")
        if not self.reproj_error >= 0:
            raise ValueError("reprojection error must be non-negative")
        object.__setattr__(self, "position", pos)


def in_bounds(intr: Intrinsics, uv) -> np.ndarray:
    """``0 <= u < width`` and ``0 <= v < height``."""
    uv = np.asarray(uv)
    return (uv[..., 0] >= 0) & (uv[..., 0] < intr.width) & (uv[..., 1] >= 0) & (uv[..., 1] < intr.height)


def project_many(view: CameraView, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection.

    Returns
    -------
    uv : ndarray, shape (N, 2)
        Pixel coordinates (garbage where ``valid`` is False).
    depth : ndarray, shape (N,)
        Camera-frame z.
    valid : ndarray of bool, shape (N,)
        In front of the camera and inside the image.
    """
    pc = view.pose.transform(np.atleast_2d(points))
    z = pc[:, 2]
    intr = view.intrinsics
    safe = np.where(z > 0, z, 1.0)
    uv = np.stack([intr.fx * pc[:, 0] / safe + intr.cx, intr.fy * pc[:, 1] / safe + intr.cy], axis=1)
    valid = (z > 0) & in_bounds(intr, uv)
    return uv, z, valid


def project(view: CameraView, point) -> Optional[np.ndarray]:
    """Pixel of a world point, or ``None`` behind the camera / out of frame."""
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    uv, _, valid = project_many(view, point[None])
    return uv[0] if valid[0] else None


def _ray_directions(view: CameraView, uv: np.ndarray) -> np.ndarray:
    intr = view.intrinsics
    d_cam = np.stack(
        [(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy, np.ones(len(uv))], axis=1
    )
    d = d_cam @ view.pose.rotation  # R^T applied row-wise
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def pixel_rays(view: CameraView, uv) -> tuple[np.ndarray, np.ndarray]:
    """World-space unit ray directions through pixels; returns ``(origin, dirs)``."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    return view.center, _ray_directions(view, uv)


def triangulate_many(view_a: CameraView, view_b: CameraView, uv_a, uv_b, check=True) -> tuple[np.ndarray, np.ndarray]:
    """Linear two-view DLT for N correspondences.

    Returns
    -------
    points : ndarray, shape (N, 3)
    ok : ndarray of bool, shape (N,)
        False for rows whose rays are parallel within ``PARALLEL_TOL`` or whose
        solution lies at infinity.

    Raises
    ------
    DegenerateGeometry
        If the camera centres coincide.
    """
    uv_a = np.atleast_2d(np.asarray(uv_a, dtype=np.float64))
    uv_b = np.atleast_2d(np.asarray(uv_b, dtype=np.float64))
    baseline = np.linalg.norm(view_a.center - view_b.center)
    if baseline < 1e-12:
        raise DegenerateGeometry("zero baseline between views")
    Pa, Pb = view_a.P, view_b.P
    A = np.stack(
        [
            uv_a[:, 0:1] * Pa[2] - Pa[0],
            uv_a[:, 1:2] * Pa[2] - Pa[1],
            uv_b[:, 0:1] * Pb[2] - Pb[0],
            uv_b[:, 1:2] * Pb[2] - Pb[1],
        ],
        axis=1,
    )
    # row scaling does not change the solution but improves conditioning
    A = A / np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    w = Xh[:, 3]
    ok = np.abs(w) > 1e-12 * np.linalg.norm(Xh[:, :3], axis=1)
    pts = Xh[:, :3] / np.where(ok, w, 1.0)[:, None]
    if check:
        da = _ray_directions(view_a, uv_a)
        db = _ray_directions(view_b, uv_b)
        sin_angle = np.linalg.norm(np.cross(da, db), axis=1)
        ok &= np.arcsin(np.clip(sin_angle, 0.0, 1.0)) >= PARALLEL_TOL
    return pts, ok


def triangulate(view_a: CameraView, view_b: CameraView, corr: Correspondence) -> np.ndarray:
    """Triangulate one correspondence (``p_r`` in ``view_a``, ``p_e`` in ``view_b``).

    Raises
    ------
    DegenerateGeometry
        Zero baseline, parallel rays, or a solution at infinity.
    """
    pts, ok = triangulate_many(view_a, view_b, corr.p_r[None], corr.p_e[None])
    if not ok[0]:
        raise DegenerateGeometry("correspondence rays are parallel")
    return pts[0]


def reprojection_errors(view_a, view_b, uv_a, uv_b, points) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric mean pixel residual per point.

    The second output marks points in front of both cameras; unlike
    :func:`project`, a reprojection that lands a hair outside the image does
    not invalidate the row.
    """
    ua, za, _ = project_many(view_a, points)
    ub, zb, _ = project_many(view_b, points)
    err = 0.5 * (np.linalg.norm(np.asarray(uv_a) - ua, axis=1) + np.linalg.norm(np.asarray(uv_b) - ub, axis=1))
    return err, (za > 0) & (zb > 0)


def reprojection_error(view_a: CameraView, view_b: CameraView, corr: Correspondence, point) -> float:
    """``0.5 * (|p_r - π(P_a X)| + |p_e - π(P_b X)|)`` in pixels.

    Raises
    ------
    BehindCamera
        When the point does not project into either image.
    """
    xa = project(view_a, point)
    xb = project(view_b, point)
    if xa is None or xb is None:
        raise BehindCamera("point does not project into both views")
    return 0.5 * (float(np.linalg.norm(corr.p_r - xa)) + float(np.linalg.norm(corr.p_e - xb)))


def filter_sa_points(points: Sequence[SAPoint], tau: float) -> list[SAPoint]:
    """Keep points with ``reproj_error < tau`` (strict), preserving order."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return [p for p in points if p.reproj_error < tau]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_rotmat(q / np.linalg.norm(q))


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
