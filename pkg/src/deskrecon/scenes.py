"""
Synthetic desk-scale scenes with known geometry.

Each preset is a floor square plus analytic primitives (spheres, boxes).
Ground-truth images come from a dense Gaussian fit of the textured
surfaces, rendered with the package's own rasterizer; ground-truth depth
comes from exact ray casting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import UnknownPreset
from .geom import CameraView, Intrinsics, Pose
from .splat import GaussianCloud, logit, render

PRESETS = ("sphere-room", "box-cluster", "ring-objects")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple

    def area(self):
        return 4 * np.pi * self.radius**2

    def intersect(self, o, d):
        c = np.asarray(self.center)
        oc = o - c
        b = np.sum(oc * d, axis=-1)
        cc = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def sample(self, rng, n):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v, v


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    color: tuple

    def _faces(self):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        ext = hi - lo
        faces = []
        for ax in range(3):
            a, b = [d for d in range(3) if d != ax]
            for sign, val in ((-1, lo[ax]), (1, hi[ax])):
                if ax == 2 and sign < 0:
                    continue  # the bottom face rests on the floor
                faces.append((ax, sign, val, a, b, ext[a] * ext[b]))
        return faces

    def area(self):
        return sum(f[-1] for f in self._faces())

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where(hit, t, np.inf)

    def sample(self, rng, n):
        faces = self._faces()
        w = np.array([f[-1] for f in faces])
        which = rng.choice(len(faces), size=n, p=w / w.sum())
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        pts = rng.uniform(lo, hi, size=(n, 3))
        nrm = np.zeros((n, 3))
        for i, (ax, sign, val, *_rest) in enumerate(faces):
            m = which == i
            pts[m, ax] = val
            nrm[m, ax] = sign
        return pts, nrm


@dataclass(frozen=True)
class Floor:
    half: float
    color: tuple

    def area(self):
        return (2 * self.half) ** 2

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[..., 2] / d[..., 2]
        p = o + t[..., None] * d
        ok = (t > 1e-9) & (np.abs(p[..., 0]) <= self.half) & (np.abs(p[..., 1]) <= self.half)
        return np.where(ok, t, np.inf)

    def sample(self, rng, n):
        pts = np.column_stack([rng.uniform(-self.half, self.half, (n, 2)), np.zeros(n)])
        return pts, np.tile([0.0, 0.0, 1.0], (n, 1))


class SceneGeometry:
    """Union of primitives with vectorised first-hit ray casting."""

    def __init__(self, primitives):
        self.primitives = list(primitives)

    def raycast(self, origins, dirs) -> np.ndarray:
        """Distance along each (unit) ray to the first hit; ``inf`` on a miss."""
        o = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
        d = np.asarray(dirs, dtype=np.float64)
        t = np.full(d.shape[:-1], np.inf)
        for prim in self.primitives:
            t = np.minimum(t, prim.intersect(o, d))
        return t

    def depth_map(self, view: CameraView) -> np.ndarray:
        """Camera-frame z of the first surface hit per pixel (``inf`` where empty)."""
        intr = view.intrinsics
        v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
        d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
        d_world = d_cam @ view.pose.rotation
        norm = np.linalg.norm(d_world, axis=-1)
        t = self.raycast(view.center, d_world / norm[..., None])
        return t / norm  # z = t * (d_cam_z / |d_cam|) with d_cam_z = 1

    def sample_surface(self, rng, n):
        areas = np.array([p.area() for p in self.primitives])
        counts = rng.multinomial(n, areas / areas.sum())
        pts, nrm, prim = [], [], []
        for i, (p, c) in enumerate(zip(self.primitives, counts)):
            if c == 0:
                continue
            x, nv = p.sample(rng, c)
            pts.append(x)
            nrm.append(nv)
            prim.append(np.full(c, i))
        return np.concatenate(pts), np.concatenate(nrm), np.concatenate(prim)

    def albedo(self, pts, prim_ids) -> np.ndarray:
        """Procedural texture: primitive colour modulated by a 3D stripe/checker pattern."""
        base = np.array([self.primitives[i].color for i in prim_ids], dtype=np.float64)
        s = np.sin(7.0 * pts[:, 0]) * np.sin(7.0 * pts[:, 1]) * np.sin(7.0 * pts[:, 2] + 0.5)
        check = (np.floor(pts[:, 0] * 2.5) + np.floor(pts[:, 1] * 2.5)) % 2
        mod = 0.75 + 0.18 * s + 0.12 * (check - 0.5)
        return np.clip(base * mod[:, None], 0.0, 1.0)


def _normal_quats(normals: np.ndarray, rng) -> np.ndarray:
    """Quaternions whose local z axis is the given normal, with random spin."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    x = np.cross(helper, n)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(n, x)
    ang = rng.uniform(0, 2 * np.pi, len(n))
    c, s = np.cos(ang)[:, None], np.sin(ang)[:, None]
    x, y = c * x + s * y, -s * x + c * y
    R = np.stack([x, y, n], axis=2)  # columns
    # rotation matrix -> quaternion (w, x, y, z)
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    q = np.empty((len(n), 4))
    w = np.sqrt(np.maximum(1.0 + tr, 0.0)) / 2.0
    good = w > 1e-3
    q[:, 0] = w
    q[:, 1] = (R[:, 2, 1] - R[:, 1, 2]) / np.where(good, 4 * w, 1.0)
    q[:, 2] = (R[:, 0, 2] - R[:, 2, 0]) / np.where(good, 4 * w, 1.0)
    q[:, 3] = (R[:, 1, 0] - R[:, 0, 1]) / np.where(good, 4 * w, 1.0)
    for i in np.flatnonzero(~good):
        q[i] = _rotmat_to_quat_slow(R[i])
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _rotmat_to_quat_slow(R):
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return np.array([w, x, y, z])


@dataclass
class SyntheticScene:
    name: str
    seed: int
    geometry: SceneGeometry
    gt_cloud: GaussianCloud
    surface_points: np.ndarray
    sfm_points: np.ndarray
    candidates: list  # CameraView
    test_views: list  # CameraView
    images: dict = field(repr=False)  # view id -> (H, W, 3)
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extent: float = 1.0

    @property
    def views(self) -> dict:
        return {v.id: v for v in self.candidates + self.test_views}

    def depth(self, view: CameraView) -> np.ndarray:
        return self.geometry.depth_map(view)

    def initial_views(self, count: int) -> list:
        return azimuth_spread(self.candidates, self.center, count)


def azimuth_spread(views, center, count: int) -> list:
    """Ids of ``count`` views closest to evenly spaced azimuths around ``center``."""
    center = np.asarray(center, dtype=np.float64)
    az = np.array([np.arctan2(*(v.center[:2] - center[:2])[::-1]) for v in views])
    chosen = []
    for target in np.linspace(-np.pi, np.pi, count, endpoint=False):
        diff = np.abs(np.angle(np.exp(1j * (az - target))))
        for j in np.argsort(diff, kind="stable"):
            if views[j].id not in chosen:
                chosen.append(views[j].id)
                break
    return chosen


def _primitives(preset: str, rng):
    palette = [
        (0.85, 0.25, 0.2), (0.2, 0.55, 0.85), (0.95, 0.8, 0.2), (0.3, 0.75, 0.35),
        (0.7, 0.35, 0.8), (0.95, 0.55, 0.2), (0.25, 0.8, 0.8), (0.9, 0.9, 0.9),
    ]
    prims = [Floor(1.6, (0.55, 0.5, 0.45))]
    if preset == "sphere-room":
        spots = [(-0.6, -0.4, 0.35), (0.55, -0.5, 0.3), (0.1, 0.6, 0.45), (-0.7, 0.7, 0.25), (0.8, 0.55, 0.28)]
        for i, (x, y, r) in enumerate(spots):
            r = r * rng.uniform(0.9, 1.1)
            prims.append(Sphere((x + rng.uniform(-0.05, 0.05), y + rng.uniform(-0.05, 0.05), r), r, palette[i]))
    elif preset == "box-cluster":
        specs = [(-0.5, -0.45, 0.5, 0.35, 0.6), (0.45, -0.4, 0.35, 0.5, 0.4), (0.0, 0.5, 0.6, 0.3, 0.8),
                 (-0.75, 0.5, 0.3, 0.3, 0.3), (0.7, 0.55, 0.3, 0.4, 0.55), (0.05, -0.05, 0.25, 0.25, 1.0)]
        for i, (x, y, sx, sy, h) in enumerate(specs):
            x += rng.uniform(-0.05, 0.05)
            y += rng.uniform(-0.05, 0.05)
            prims.append(Box((x - sx / 2, y - sy / 2, 0.0), (x + sx / 2, y + sy / 2, h * rng.uniform(0.9, 1.1)), palette[i]))
    elif preset == "ring-objects":
        for i in range(8):
            a = 2 * np.pi * i / 8 + rng.uniform(-0.1, 0.1)
            x, y = 0.95 * np.cos(a), 0.95 * np.sin(a)
            if i % 2 == 0:
                r = rng.uniform(0.18, 0.26)
                prims.append(Sphere((x, y, r), r, palette[i]))
            else:
                s = rng.uniform(0.25, 0.35)
                prims.append(Box((x - s / 2, y - s / 2, 0.0), (x + s / 2, y + s / 2, rng.uniform(0.3, 0.6)), palette[i]))
        prims.append(Sphere((0.0, 0.0, 0.3), 0.3, palette[7]))
    else:
        raise UnknownPreset(preset)
    return prims


def _orbit(rng, n, radius, heights, target, offset, jitter, start_id, intr):
    views = []
    for i in range(n):
        az = 2 * np.pi * (i + offset) / n + rng.uniform(-jitter, jitter)
        h = rng.uniform(*heights)
        r = radius * rng.uniform(0.9, 1.1)
        eye = np.array([r * np.cos(az), r * np.sin(az), h])
        look = np.asarray(target) + rng.uniform(-0.15, 0.15, 3) * np.array([1, 1, 0.5])
        views.append(CameraView(start_id + i, intr, Pose.look_at(eye, look)))
    return views


def make_scene(
    preset: str,
    seed: int = 0,
    *,
    resolution: int = 64,
    fov_deg: float = 60.0,
    n_candidates: int = 40,
    n_test: int = 8,
    gt_gaussians: int = 6000,
    sfm_count: int = 1500,
    sfm_noise: float = 0.01,
) -> SyntheticScene:
    """Deterministic synthetic scene for ``(preset, seed)``.

    Candidate ids are ``0..n_candidates-1``; held-out ids follow.

    Raises
    ------
    UnknownPreset
    """
    if preset not in PRESETS:
        raise UnknownPreset(preset)
    return _make_scene_cached(preset, int(seed), int(resolution), float(fov_deg), int(n_candidates),
                              int(n_test), int(gt_gaussians), int(sfm_count), float(sfm_noise))


@lru_cache(maxsize=8)
def _make_scene_cached(preset, seed, resolution, fov_deg, n_candidates, n_test, gt_gaussians, sfm_count, sfm_noise):
    ss = np.random.SeedSequence([seed, PRESETS.index(preset)])
    rng_geo, rng_gs, rng_cam, rng_sfm = (np.random.default_rng(s) for s in ss.spawn(4))
    geometry = SceneGeometry(_primitives(preset, rng_geo))

    pts, nrm, prim = geometry.sample_surface(rng_gs, gt_gaussians)
    spacing = np.sqrt(sum(p.area() for p in geometry.primitives) / gt_gaussians)
    scales = np.column_stack([np.full(len(pts), 0.75 * spacing), np.full(len(pts), 0.75 * spacing), np.full(len(pts), 0.1 * spacing)])
    gt = GaussianCloud(
        pts, np.log(scales), _normal_quats(nrm, rng_gs), np.full(len(pts), logit(0.95)), geometry.albedo(pts, prim)
    )

    intr = Intrinsics.from_fov(resolution, resolution, fov_deg)
    target = np.array([0.0, 0.0, 0.25])
    candidates = _orbit(rng_cam, n_candidates, 3.0, (0.9, 2.2), target, 0.0, 0.35 * np.pi / n_candidates * 2, 0, intr)
    test_views = _orbit(rng_cam, n_test, 3.0, (1.0, 2.0), target, 0.5, 0.0, n_candidates, intr)

    sfm_pts, _, _ = geometry.sample_surface(rng_sfm, sfm_count)
    sfm_pts = sfm_pts + rng_sfm.normal(scale=sfm_noise, size=sfm_pts.shape)

    images = {v.id: np.clip(render(gt, v).image, 0.0, 1.0) for v in candidates + test_views}
    for arr in images.values():
        arr.flags.writeable = False
    lo, hi = sfm_pts.min(axis=0), sfm_pts.max(axis=0)
    return SyntheticScene(
        name=preset, seed=seed, geometry=geometry, gt_cloud=gt, surface_points=pts, sfm_points=sfm_pts,
        candidates=candidates, test_views=test_views, images=images,
        center=(lo + hi) / 2, extent=float(np.linalg.norm(hi - lo) / 2),
    )
