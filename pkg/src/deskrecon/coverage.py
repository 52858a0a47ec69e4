"""
Voxel coverage field and the coverage-based candidate prefilter.

Bit-sets are boolean arrays shaped like the grid (C order); the linear voxel
index is ``(i * ry + j) * rz + k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyScene, SizeMismatch
from .geom import CameraView, project_many

# Instant-NGP spatial hash primes
HASH_PRIMES = (1, 2654435761, 805459861)
_U32 = np.uint64(0xFFFFFFFF)


@dataclass(frozen=True)
class VoxelGrid:
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    resolution: tuple

    def __post_init__(self):
        lo = np.asarray(self.aabb_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.aabb_max, dtype=np.float64).reshape(3)
        res = tuple(int(r) for r in np.broadcast_to(np.asarray(self.resolution), (3,)))
        if not np.all(lo < hi):
            raise ValueError("aabb_min must be below aabb_max on every axis")
        if min(res) < 1:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "aabb_min", lo)
        object.__setattr__(self, "aabb_max", hi)
        object.__setattr__(self, "resolution", res)

    @property
    def K(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def shape(self) -> tuple:
        return self.resolution

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.aabb_max - self.aabb_min) / np.array(self.resolution)

    def voxel_coords(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Integer voxel coordinates (floor convention) and an inside-AABB mask.

        Points on the upper AABB face belong to the last voxel.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = np.all((pts >= self.aabb_min) & (pts <= self.aabb_max), axis=1)
        ijk = np.floor((pts - self.aabb_min) / self.voxel_size).astype(np.int64)
        ijk = np.minimum(np.maximum(ijk, 0), np.array(self.resolution) - 1)
        return ijk, inside

    def centers(self) -> np.ndarray:
        """All voxel centres, shape ``(K, 3)`` in linear-index order."""
        axes = [self.aabb_min[d] + (np.arange(self.resolution[d]) + 0.5) * self.voxel_size[d] for d in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel() for a in g], axis=1)

    def scaled(self, factor: float) -> "VoxelGrid":
        return VoxelGrid(self.aabb_min * factor, self.aabb_max * factor, self.resolution)


@dataclass(frozen=True)
class CoverageField:
    grid: VoxelGrid
    raw_occupied: np.ndarray
    dilated_occupied: np.ndarray
    dilation_radius: int = 0
    outside_count: int = 0
    sfm_points: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.dilation_radius < 0:
            raise ValueError("dilation radius must be non-negative")
        for name in ("raw_occupied", "dilated_occupied"):
            arr = np.asarray(getattr(self, name), dtype=bool)
            if arr.shape != self.grid.shape:
                raise ValueError(f"{name} does not match grid shape")
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, grid: VoxelGrid, dilation_radius: int = 0, sfm_points=None) -> "CoverageField":
        z = np.zeros(grid.shape, dtype=bool)
        return cls(grid, z, z.copy(), dilation_radius, 0, sfm_points)

    def cleared(self) -> "CoverageField":
        """Same grid (and SfM points) with no occupancy."""
        return CoverageField.empty(self.grid, self.dilation_radius, self.sfm_points)

    def n_raw(self) -> int:
        return int(self.raw_occupied.sum())

    def n_dilated(self) -> int:
        return int(self.dilated_occupied.sum())


def _dilate_mask(mask: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return mask.copy()
    return ndimage.maximum_filter(mask.astype(np.uint8), size=2 * r + 1, mode="constant", cval=0).astype(bool)


def build_grid(sfm_points, resolution=64, min_points: int = 1) -> CoverageField:
    """Voxel grid over the AABB of ``sfm_points``; raw occupancy = voxels with >= ``min_points`` points.

    Axes along which all points coincide are padded by 0.5 units each way.

    Raises
    ------
    EmptyScene
        If no points are given.
    """
    pts = np.asarray(sfm_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyScene("no SfM points")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    flat = hi - lo <= 0
    lo = np.where(flat, lo - 0.5, lo)
    hi = np.where(flat, hi + 0.5, hi)
    grid = VoxelGrid(lo, hi, resolution)
    ijk, _ = grid.voxel_coords(pts)
    lin = np.ravel_multi_index(ijk.T, grid.shape)
    counts = np.bincount(lin, minlength=grid.K).reshape(grid.shape)
    occ = counts >= min_points
    return CoverageField(grid, occ, occ.copy(), 0, 0, pts)


def mark_observed(fld: CoverageField, sa) -> CoverageField:
    """Add the voxel of every SA-Point inside the AABB; re-dilates with the field's radius.

    ``sa`` may be an ``SAPointSet`` or an ``(N, 3)`` array of positions.
    """
    pos = getattr(sa, "positions", sa)
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    if len(pos) == 0:
        return fld
    ijk, inside = fld.grid.voxel_coords(pos)
    raw = fld.raw_occupied.copy()
    raw[tuple(ijk[inside].T)] = True
    return replace(
        fld,
        raw_occupied=raw,
        dilated_occupied=_dilate_mask(raw, fld.dilation_radius),
        outside_count=fld.outside_count + int((~inside).sum()),
    )


def dilate(fld: CoverageField, r: int) -> CoverageField:
    """Union of cubic ``(2r+1)^3`` neighbourhoods of raw-occupied voxels, clipped to the grid."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    return replace(fld, dilated_occupied=_dilate_mask(fld.raw_occupied, int(r)), dilation_radius=int(r))


def depth_range(view: CameraView, points, lo_pct=1.0, hi_pct=99.0) -> tuple[float, float]:
    """Near/far planes from percentiles of point depths along the view axis."""
    z = view.pose.transform(np.asarray(points).reshape(-1, 3))[:, 2]
    z = z[z > 0]
    if len(z) == 0:
        return 1e-3, 1e-3 * 2
    near, far = np.percentile(z, [lo_pct, hi_pct])
    near = max(float(near), 1e-3)
    return near, max(float(far), near * (1 + 1e-9))


def frustum_voxels(fld: CoverageField, view: CameraView, near: float, far: float) -> np.ndarray:
    """Voxels whose centre projects into the image with depth in ``[near, far]``; no occlusion test."""
    if not 0 < near < far:
        raise ValueError("require 0 < near < far")
    _, z, valid = project_many(view, fld.grid.centers())
    inside = valid & (z >= near) & (z <= far)
    return inside.reshape(fld.grid.shape)


@dataclass(frozen=True)
class HashFeature:
    bits: np.ndarray
    table_size: int
    hash_seed: int = 0
    no_collision: bool = False

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))


def _hash_offsets(seed: int) -> np.ndarray:
    if seed == 0:
        return np.zeros(3, dtype=np.uint64)
    return np.random.default_rng(seed).integers(0, 2**31, size=3).astype(np.uint64)


def spatial_hash(ijk: np.ndarray, table_size: int, seed: int = 0) -> np.ndarray:
    """Instant-NGP style hash of integer voxel coordinates into ``[0, table_size)``."""
    c = np.asarray(ijk, dtype=np.int64).astype(np.uint64) + _hash_offsets(seed)
    h = np.zeros(len(c), dtype=np.uint64)
    for d in range(3):
        h ^= (c[:, d] * np.uint64(HASH_PRIMES[d])) & _U32
    return (h % np.uint64(table_size)).astype(np.int64)


def hash_encode(voxels: np.ndarray, grid: VoxelGrid, table_size: Optional[int] = None, seed: int = 0) -> HashFeature:
    """Binary feature with bit ``h(v)`` set for every member voxel.

    ``table_size=None`` selects no-collision mode: ``h`` is the linear voxel
    index and the table has ``grid.K`` entries.
    """
    voxels = np.asarray(voxels, dtype=bool).reshape(grid.shape)
    if table_size is None:
        return HashFeature(voxels.ravel().copy(), grid.K, seed, True)
    if table_size < 1:
        raise ValueError("table size must be >= 1")
    bits = np.zeros(int(table_size), dtype=bool)
    ijk = np.argwhere(voxels)
    if len(ijk):
        bits[spatial_hash(ijk, table_size, seed)] = True
    return HashFeature(bits, int(table_size), seed, False)


def hamming_distance(a: HashFeature, b: HashFeature) -> float:
    """Fraction of differing bits, ``|a xor b|_1 / H``."""
    if a.table_size != b.table_size:
        raise SizeMismatch(f"table sizes differ: {a.table_size} vs {b.table_size}")
    return np.count_nonzero(a.bits ^ b.bits) / a.table_size


@dataclass
class CandidateRanking:
    entries: list  # [(view id, distance)], descending distance, ties ascending id
    retained: list  # view ids of the top-N% subset

    @property
    def distances(self) -> dict:
        return dict(self.entries)


def retained_count(n: int, percent: float) -> int:
    return max(1, math.ceil(round(percent * n / 100.0, 9)))


class FrustumCache:
    """Memoises candidate frustum bit-sets; they depend only on the view and the grid."""

    def __init__(self):
        self._store = {}

    def get(self, fld: CoverageField, view: CameraView, near_far=None) -> np.ndarray:
        key = (view.id, id(fld.grid))
        if key not in self._store:
            if near_far is None:
                if fld.sfm_points is None:
                    raise ValueError("near/far planes need SfM points or explicit values")
                near_far = depth_range(view, fld.sfm_points)
            self._store[key] = (fld.grid, frustum_voxels(fld, view, *near_far))
        return self._store[key][1]


def rank_candidates(
    fld: CoverageField,
    candidates: Sequence[CameraView],
    N: float = 20,
    table_size: Optional[int] = None,
    seed: int = 0,
    *,
    near_far=None,
    prior: Optional[np.ndarray] = None,
    cache: Optional[FrustumCache] = None,
) -> CandidateRanking:
    """Rank candidates by normalised Hamming distance between observed and frustum features.

    Parameters
    ----------
    near_far : tuple or mapping, optional
        One ``(near, far)`` pair for all candidates or a mapping from view id.
        Defaults to SfM depth percentiles per candidate.
    prior : bool array, optional
        Scene occupancy prior. When given, both the observed set and every
        frustum set are restricted to it before hashing.
    """
    if not candidates:
        raise ValueError("no candidates")
    if not 0 < N <= 100:
        raise ValueError("N must lie in (0, 100]")
    cache = cache or FrustumCache()
    obs = fld.dilated_occupied
    if prior is not None:
        obs = obs & prior
    b_obs = hash_encode(obs, fld.grid, table_size, seed)
    entries = []
    for view in candidates:
        nf = near_far.get(view.id) if isinstance(near_far, Mapping) else near_far
        fr = cache.get(fld, view, nf)
        if prior is not None:
            fr = fr & prior
        entries.append((view.id, hamming_distance(b_obs, hash_encode(fr, fld.grid, table_size, seed))))
    entries.sort(key=lambda e: (-e[1], e[0]))
    keep = retained_count(len(entries), N)
    return CandidateRanking(entries, [e[0] for e in entries[:keep]])


# -- debug dump ---------------------------------------------------------------


def _rle(mask: np.ndarray) -> list:
    flat = mask.ravel()
    cuts = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    runs = np.diff(np.concatenate([[0], cuts, [len(flat)]])).tolist()
    return [0] + runs if flat[0] else runs


def _unrle(runs, shape) -> np.ndarray:
    vals = np.arange(len(runs)) % 2
    flat = np.repeat(vals, runs).astype(bool)
    total = int(np.prod(shape))
    if len(flat) != total:
        raise ValueError("run lengths do not cover the grid")
    return flat.reshape(shape)


def dump_field(fld: CoverageField) -> str:
    """Plain-text dump: header then run-length encoded bit-sets (runs start with zeros)."""
    g = fld.grid
    lines = [
        "# coverage-field v1",
        "aabb_min " + " ".join(repr(float(x)) for x in g.aabb_min),
        "aabb_max " + " ".join(repr(float(x)) for x in g.aabb_max),
        "resolution " + " ".join(str(r) for r in g.resolution),
        f"dilation_radius {fld.dilation_radius}",
        "raw " + " ".join(str(r) for r in _rle(fld.raw_occupied)),
        "dilated " + " ".join(str(r) for r in _rle(fld.dilated_occupied)),
    ]
    return "\n".join(lines) + "\n"


def load_field(text: str) -> CoverageField:
    rec = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        rec[key] = rest.split()
    grid = VoxelGrid(
        [float(x) for x in rec["aabb_min"]], [float(x) for x in rec["aabb_max"]], tuple(int(x) for x in rec["resolution"])
    )
    raw = _unrle([int(x) for x in rec["raw"]], grid.shape)
    dil = _unrle([int(x) for x in rec["dilated"]], grid.shape)
    return CoverageField(grid, raw, dil, int(rec["dilation_radius"][0]))
