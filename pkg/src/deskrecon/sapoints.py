"""
Self-augmented points for one training view.

The camera is pushed back and sideways, correspondences between the real
and the extrapolated view are obtained (from a ground-truth oracle with
pixel noise, or from a file written by an external matcher), then
triangulated and filtered by symmetric reprojection error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterator, Optional, Union

import numpy as np

from .errors import DegenerateGeometry, NoVisibleOverlap, ParseError
from .geom import (
    CameraView,
    Correspondence,
    Pose,
    SAPoint,
    in_bounds,
    pixel_rays,
    project_many,
    reprojection_errors,
    triangulate_many,
)


@dataclass(frozen=True)
class PerturbationSpec:
    dx: float = 0.25
    dy: float = 0.25
    dz: float = -0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.dz > 0:
            raise ValueError("dz must be <= 0 (backward-only perturbation)")


@dataclass(frozen=True)
class OracleSource:
    """Exact correspondences from scene geometry plus isotropic pixel noise."""

    geometry: object  # anything with raycast(origins, dirs) -> distances
    noise_sigma: float = 0.0
    stride: int = 5
    rng_seed: int = 0
    visibility_tol: float = 1e-6

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True)
class FileSource:
    """Correspondences read from ``x_r y_r x_e y_e`` lines."""

    path: Union[str, Path]


@dataclass
class CorrespondenceSet:
    uv_r: np.ndarray
    uv_e: np.ndarray

    def __len__(self):
        return len(self.uv_r)

    def __iter__(self) -> Iterator[Correspondence]:
        for a, b in zip(self.uv_r, self.uv_e):
            yield Correspondence(a, b)

    def __getitem__(self, i) -> Correspondence:
        return Correspondence(self.uv_r[i], self.uv_e[i])


@dataclass
class SAPointSet:
    positions: np.ndarray
    errors: np.ndarray
    source_view: Hashable
    extrapolated_pose: Pose
    generated: int
    retained: int
    unfiltered_positions: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def stats(self) -> dict:
        return {"generated": self.generated, "retained": self.retained}

    @property
    def points(self) -> list:
        return [SAPoint(p, float(e), self.source_view) for p, e in zip(self.positions, self.errors)]

    def __len__(self):
        return len(self.positions)


def extrapolate_pose(view: CameraView, spec: PerturbationSpec) -> Pose:
    """Same rotation, centre moved by ``(±dx, ±dy, dz)`` in the camera frame."""
    signs = np.random.default_rng(spec.rng_seed).choice([-1.0, 1.0], size=2)
    offset = np.array([signs[0] * spec.dx, signs[1] * spec.dy, spec.dz])
    pose = view.pose
    # centre' = centre + R^T offset  =>  t' = t - offset
    return Pose(pose.rotation, pose.translation - offset)


def read_correspondences(path) -> CorrespondenceSet:
    """Parse ``x_r y_r x_e y_e`` records; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 4:
                raise ParseError(path, n, f"expected 4 values, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError:
                raise ParseError(path, n, "non-numeric value") from None
            if not np.all(np.isfinite(vals)):
                raise ParseError(path, n, "non-finite value")
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return CorrespondenceSet(arr[:, :2], arr[:, 2:])


def write_correspondences(path, corr: CorrespondenceSet, header: str = ""):
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for a, b in zip(corr.uv_r, corr.uv_e):
            fh.write(" ".join(repr(float(x)) for x in (*a, *b)) + "\n")


def _oracle(source: OracleSource, ref_view: CameraView, ext_view: CameraView) -> CorrespondenceSet:
    intr = ref_view.intrinsics
    vs, us = np.meshgrid(
        np.arange(0, intr.height, source.stride, dtype=np.float64),
        np.arange(0, intr.width, source.stride, dtype=np.float64),
        indexing="ij",
    )
    uv_r = np.column_stack([us.ravel(), vs.ravel()])
    origin, dirs = pixel_rays(ref_view, uv_r)
    t = source.geometry.raycast(origin, dirs)
    hit = np.isfinite(t)
    X = origin + np.where(hit, t, 0.0)[:, None] * dirs
    uv_e, _, valid = project_many(ext_view, X)
    # visible in the extrapolated view: the first hit along its ray is X itself
    to_x = X - ext_view.center
    dist = np.linalg.norm(to_x, axis=1)
    t_e = source.geometry.raycast(ext_view.center, to_x / np.where(dist > 0, dist, 1.0)[:, None])
    visible = hit & valid & (t_e >= dist * (1 - source.visibility_tol) - source.visibility_tol)

    rng = np.random.default_rng(source.rng_seed)
    noise = rng.normal(scale=1.0, size=(len(uv_r), 4)) * source.noise_sigma
    uv_r = uv_r + noise[:, :2]
    uv_e = uv_e + noise[:, 2:]
    keep = visible & in_bounds(intr, uv_r) & in_bounds(ext_view.intrinsics, uv_e)
    return CorrespondenceSet(uv_r[keep], uv_e[keep])


def generate_correspondences(source, ref_view: CameraView, ext_pose: Pose) -> CorrespondenceSet:
    """Pixel pairs between ``ref_view`` and the same camera at ``ext_pose``.

    Raises
    ------
    NoVisibleOverlap
        When no pair is produced.
    """
    ext_view = ref_view.with_pose(ext_pose)
    if isinstance(source, OracleSource):
        corr = _oracle(source, ref_view, ext_view)
    elif isinstance(source, FileSource):
        corr = read_correspondences(source.path)
    else:
        raise TypeError(f"unknown correspondence source {type(source).__name__}")
    if len(corr) == 0:
        raise NoVisibleOverlap(f"no correspondences for view {ref_view.id!r}")
    return corr


def build_sa_points(view: CameraView, spec: PerturbationSpec, source, tau: float) -> SAPointSet:
    """Extrapolate, match, triangulate and filter.

    Degenerate pairs and points that fail to project into both views are
    dropped and show up as ``generated - retained``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    ext_pose = extrapolate_pose(view, spec)
    corr = generate_correspondences(source, view, ext_pose)
    ext_view = view.with_pose(ext_pose)
    try:
        pts, ok = triangulate_many(view, ext_view, corr.uv_r, corr.uv_e)
    except DegenerateGeometry:
        pts, ok = np.zeros((len(corr), 3)), np.zeros(len(corr), dtype=bool)
    err, projects = reprojection_errors(view, ext_view, corr.uv_r, corr.uv_e, pts)
    ok &= projects & np.all(np.isfinite(pts), axis=1)
    keep = ok & (err < tau)
    return SAPointSet(
        positions=pts[keep], errors=err[keep], source_view=view.id, extrapolated_pose=ext_pose,
        generated=len(corr), retained=int(keep.sum()), unfiltered_positions=pts[ok],
    )
