"""
Differentiable Gaussian splat rasterizer (CPU, numpy)
=====================================================

Forward pass follows the 3DGS recipe: EWA projection of each 3D covariance
to screen space, depth sort, front-to-back alpha compositing with early
termination.  The backward pass is hand-derived and returns gradients for
all five parameter classes.

Two details differ from a vanilla CUDA rasterizer so that the image is a
C1 function of every parameter (finite-difference checks need this):

* the screen-space kernel is a Gaussian with its first-order Taylor
  expansion at the 3-sigma contour subtracted, so it reaches zero with zero
  slope exactly at the cull boundary;
* there is no ``alpha < 1/255`` skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import StaleOutput
from .geom import CameraView

EXTENT_SIGMAS = 3.0
T_MIN = 1e-4
ALPHA_MAX = 0.99
BLUR = 0.3
NEAR = 0.05

_M_CUT = EXTENT_SIGMAS**2
_E_CUT = np.exp(-0.5 * _M_CUT)
_K_NORM = 1.0 - _E_CUT * (1.0 + 0.5 * _M_CUT)

PARAM_CLASSES = ("means", "log_scales", "quats", "opacity_logits", "colors")


def kernel(m):
    """Tapered Gaussian falloff of squared Mahalanobis distance ``m``; 1 at 0, 0 beyond 3 sigma."""
    m = np.asarray(m, dtype=np.float64)
    val = (np.exp(-0.5 * m) - _E_CUT * (1.0 + 0.5 * (_M_CUT - m))) / _K_NORM
    return np.where(m < _M_CUT, val, 0.0)


def _kernel_dm(m):
    return np.where(m < _M_CUT, 0.5 * (_E_CUT - np.exp(-0.5 * m)) / _K_NORM, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Batched ``(N, 4)`` unit quaternions (w, x, y, z) to ``(N, 3, 3)``."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_grad_to_quat(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=1)


@dataclass
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


class GaussianCloud:
    """Structure-of-arrays Gaussian scene model with parallel gradient buffers.

    Parameter arrays may be updated in place by an optimizer; any change to
    the *number* of Gaussians must go through a method that bumps
    ``generation``.
    """

    def __init__(self, means, log_scales, quats, opacity_logits, colors):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(n, 3)
        q = np.array(quats, dtype=np.float64).reshape(n, 4)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        if n and np.any(norms == 0):
            raise ValueError("zero quaternion")
        self.quats = q / np.where(norms == 0, 1.0, norms)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(colors, dtype=np.float64).reshape(n, 3)
        self.generation = 0
        self.grads = {k: np.zeros_like(getattr(self, k)) for k in PARAM_CLASSES}

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianCloud":
        if not gaussians:
            return cls.empty()
        return cls(
            [g.position for g in gaussians],
            [g.log_scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity_logit for g in gaussians],
            [g.color for g in gaussians],
        )

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(
            self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
            float(self.opacity_logits[i]), self.colors[i].copy(),
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_CLASSES}

    def copy(self) -> "GaussianCloud":
        out = GaussianCloud(self.means, self.log_scales, self.quats, self.opacity_logits, self.colors)
        out.generation = self.generation
        return out

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def normalize_quats(self):
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def keep(self, mask: np.ndarray):
        """Retain Gaussians where ``mask`` is True; bumps ``generation``."""
        mask = np.asarray(mask, dtype=bool)
        for k in PARAM_CLASSES:
            setattr(self, k, getattr(self, k)[mask].copy())
            self.grads[k] = self.grads[k][mask].copy()
        self.generation += 1


@dataclass
class PruneReport:
    removed: np.ndarray
    remaining: int
    generation: int


def prune(cloud: GaussianCloud, opacity_floor: float) -> PruneReport:
    """Drop Gaussians whose opacity is below ``opacity_floor``."""
    if not 0.0 < opacity_floor < 1.0:
        raise ValueError("opacity_floor must lie in (0, 1)")
    drop = cloud.opacities < opacity_floor
    removed = np.flatnonzero(drop)
    cloud.keep(~drop)
    return PruneReport(removed=removed, remaining=len(cloud), generation=cloud.generation)


@dataclass
class _Projection:
    ids: np.ndarray  # cloud indices of visible Gaussians, depth order
    pc: np.ndarray  # camera-frame centres
    rot: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    cov3: np.ndarray
    T: np.ndarray  # J @ W
    J: np.ndarray
    conic: np.ndarray  # inverse 2D covariance, (n, 2, 2)
    mean2d: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    view_id: object = None
    generation: int = 0
    n_gaussians: int = 0
    _proj: Optional[_Projection] = field(default=None, repr=False)
    _pairs: Optional[dict] = field(default=None, repr=False)

    def contribs(self, row: int, col: int) -> list:
        """``(gaussian index, blend weight)`` for one pixel, front to back."""
        if self._pairs is None:
            return []
        p = self._pairs
        pix = row * self.image.shape[1] + col
        s = p["start"][pix]
        out = []
        for k in range(s, s + p["count"][pix]):
            if p["w"][k] > 0:
                out.append((int(self._proj.ids[p["gid"][k]]), float(p["w"][k])))
        return out


def _project(cloud: GaussianCloud, view: CameraView, idx: np.ndarray) -> Optional[_Projection]:
    intr = view.intrinsics
    W = view.pose.rotation
    pc = cloud.means[idx] @ W.T + view.pose.translation
    z = pc[:, 2]
    front = z > NEAR
    idx, pc, z = idx[front], pc[front], z[front]
    if len(idx) == 0:
        return None
    q = cloud.quats[idx]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    rot = quat_to_rotmats(q)
    scale = np.exp(cloud.log_scales[idx])
    M = rot * scale[:, None, :]
    cov3 = M @ M.transpose(0, 2, 1)
    n = len(idx)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * pc[:, 0] / z**2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * pc[:, 1] / z**2
    T = J @ W
    cov2 = T @ cov3 @ T.transpose(0, 2, 1)
    cov2[:, 0, 0] += BLUR
    cov2[:, 1, 1] += BLUR
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 1, 0]
    conic = np.empty_like(cov2)
    conic[:, 0, 0] = cov2[:, 1, 1] / det
    conic[:, 1, 1] = cov2[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2[:, 0, 1] / det
    mean2d = np.stack([intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy], axis=1)

    # exact axis-aligned box of the 3-sigma ellipse
    hx = EXTENT_SIGMAS * np.sqrt(cov2[:, 0, 0])
    hy = EXTENT_SIGMAS * np.sqrt(cov2[:, 1, 1])
    on_screen = (
        (mean2d[:, 0] + hx >= 0)
        & (mean2d[:, 0] - hx <= intr.width - 1)
        & (mean2d[:, 1] + hy >= 0)
        & (mean2d[:, 1] - hy <= intr.height - 1)
    )
    if not on_screen.any():
        return None
    order = np.lexsort((idx[on_screen], z[on_screen]))
    sel = np.flatnonzero(on_screen)[order]
    return _Projection(
        ids=idx[sel], pc=pc[sel], rot=rot[sel], scale=scale[sel], quat=q[sel], cov3=cov3[sel],
        T=T[sel], J=J[sel], conic=conic[sel], mean2d=mean2d[sel],
        opacity=sigmoid(cloud.opacity_logits[idx[sel]]), color=cloud.colors[idx[sel]],
    )


def _enumerate_pairs(proj: _Projection, width: int, height: int):
    cov_xx = proj.conic[:, 1, 1]  # conic is the inverse, so recover extents from it
    det_c = proj.conic[:, 0, 0] * proj.conic[:, 1, 1] - proj.conic[:, 0, 1] ** 2
    hx = EXTENT_SIGMAS * np.sqrt(cov_xx / det_c)
    hy = EXTENT_SIGMAS * np.sqrt(proj.conic[:, 0, 0] / det_c)
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    c0 = np.clip(np.ceil(u - hx), 0, width - 1).astype(np.int64)
    c1 = np.clip(np.floor(u + hx), 0, width - 1).astype(np.int64)
    r0 = np.clip(np.ceil(v - hy), 0, height - 1).astype(np.int64)
    r1 = np.clip(np.floor(v + hy), 0, height - 1).astype(np.int64)
    wc = np.maximum(c1 - c0 + 1, 0)
    hc = np.maximum(r1 - r0 + 1, 0)
    counts = wc * hc
    total = int(counts.sum())
    gid = np.repeat(np.arange(len(counts)), counts)
    offsets = np.cumsum(counts) - counts
    local = np.arange(total) - offsets[gid]
    wg = wc[gid]
    rows = r0[gid] + local // np.maximum(wg, 1)
    cols = c0[gid] + local % np.maximum(wg, 1)
    dx = cols - u[gid]
    dy = rows - v[gid]
    a, b, c = proj.conic[gid, 0, 0], proj.conic[gid, 0, 1], proj.conic[gid, 1, 1]
    m = a * dx * dx + 2 * b * dx * dy + c * dy * dy
    keep = m < _M_CUT
    return gid[keep], rows[keep] * width + cols[keep], dx[keep], dy[keep], m[keep]


def _normalize_subset(n: int, subset) -> np.ndarray:
    if subset is None:
        return np.arange(n)
    idx = np.unique(np.asarray(list(subset) if not isinstance(subset, np.ndarray) else subset, dtype=np.int64))
    if len(idx) and (idx[0] < 0 or idx[-1] >= n):
        raise IndexError("subset index out of range")
    return idx


def render(cloud: GaussianCloud, view: CameraView, subset=None) -> RenderOutput:
    """Rasterize ``cloud`` (or the ``subset`` of indices) into ``view``.

    Background is black.  ``depth`` is the alpha-normalised expected depth
    (0 where nothing was hit).
    """
    intr = view.intrinsics
    H, W = intr.height, intr.width
    P = H * W
    idx = _normalize_subset(len(cloud), subset)
    proj = _project(cloud, view, idx) if len(idx) else None
    blank = RenderOutput(
        image=np.zeros((H, W, 3)), depth=np.zeros((H, W)), alpha=np.zeros((H, W)),
        view_id=view.id, generation=cloud.generation, n_gaussians=len(cloud),
    )
    if proj is None:
        return blank
    gid, pix, dx, dy, m = _enumerate_pairs(proj, W, H)
    if len(gid) == 0:
        return blank

    # pairs were generated in depth order; a stable sort by pixel keeps it per pixel
    order = np.argsort(pix, kind="stable")
    gid, pix, dx, dy, m = gid[order], pix[order], dx[order], dy[order], m[order]
    count = np.bincount(pix, minlength=P)
    start = np.cumsum(count) - count
    first = start[pix]  # index of each pair's segment head

    g = kernel(m)
    raw = proj.opacity[gid] * g
    clamped = raw > ALPHA_MAX
    a = np.minimum(raw, ALPHA_MAX)

    # per-pixel transmittance as a segmented cumulative sum of log(1 - alpha)
    log1m = np.log1p(-a)
    cs = np.cumsum(log1m)
    log_t_incl = cs - (cs[first] - log1m[first])
    t_incl = np.exp(log_t_incl)
    t_excl = np.exp(log_t_incl - log1m)
    alive = t_incl >= T_MIN
    w = a * t_excl * alive

    col = proj.color[gid]
    image = np.stack([np.bincount(pix, weights=w * col[:, c], minlength=P) for c in range(3)], axis=1)
    acc = np.bincount(pix, weights=w, minlength=P)
    dsum = np.bincount(pix, weights=w * proj.pc[gid, 2], minlength=P)
    depth = np.where(acc > 0, dsum / np.where(acc > 0, acc, 1.0), 0.0)

    pairs = dict(
        pix=pix, gid=gid, first=first, w=w, a=a, t_excl=t_excl, alive=alive, col=col,
        start=start, count=count, dx=dx, dy=dy, m=m, kern=g, clamped=clamped,
    )
    return RenderOutput(
        image=image.reshape(H, W, 3), depth=depth.reshape(H, W), alpha=acc.reshape(H, W),
        view_id=view.id, generation=cloud.generation, n_gaussians=len(cloud), _proj=proj, _pairs=pairs,
    )


def backward(cloud: GaussianCloud, view: CameraView, output: RenderOutput, pixel_loss_grads, accumulate=True) -> dict:
    """Gradients of a scalar loss given ``dL/dimage`` of shape ``(H, W, 3)``.

    Adds into ``cloud.grads`` unless ``accumulate`` is False; always returns
    the gradients of this call as a dict keyed like ``cloud.grads``.

    Raises
    ------
    StaleOutput
        If the cloud was structurally edited after ``output`` was rendered.
    """
    if output.generation != cloud.generation or output.n_gaussians != len(cloud):
        raise StaleOutput("cloud changed since render")
    grads = {k: np.zeros_like(getattr(cloud, k)) for k in PARAM_CLASSES}
    proj, p = output._proj, output._pairs
    if proj is not None and p is not None:
        intr = view.intrinsics
        dimg = np.asarray(pixel_loss_grads, dtype=np.float64).reshape(-1, 3)
        n = len(proj.ids)
        w, a, col, t_excl, alive = p["w"], p["a"], p["col"], p["t_excl"], p["alive"]
        pix, gid, first = p["pix"], p["gid"], p["first"]
        image = output.image.reshape(-1, 3)
        dpix = dimg[pix]

        g_col = np.stack([np.bincount(gid, weights=w * dpix[:, c], minlength=n) for c in range(3)], axis=1)

        # dC/dalpha_k = T_k c_k - S_k / (1 - alpha_k), S_k = colour composited behind k
        wc = w[:, None] * col
        cw = np.cumsum(wc, axis=0)
        behind = image[pix] - (cw - (cw[first] - wc[first]))
        dC_dA = t_excl[:, None] * col - behind / (1.0 - a)[:, None]
        dA_pair = np.einsum("pc,pc->p", dC_dA, dpix) * alive * ~p["clamped"]

        kern = p["kern"]
        g_opac = np.bincount(gid, weights=dA_pair * kern, minlength=n)
        dm = dA_pair * proj.opacity[gid] * _kernel_dm(p["m"])
        dx, dy = p["dx"], p["dy"]
        a, b, c_ = proj.conic[gid, 0, 0], proj.conic[gid, 0, 1], proj.conic[gid, 1, 1]
        # m = d^T A d, d = pixel - mean
        g_u = np.bincount(gid, weights=-2.0 * dm * (a * dx + b * dy), minlength=n)
        g_v = np.bincount(gid, weights=-2.0 * dm * (b * dx + c_ * dy), minlength=n)
        gA = np.empty((n, 2, 2))
        gA[:, 0, 0] = np.bincount(gid, weights=dm * dx * dx, minlength=n)
        gA[:, 0, 1] = gA[:, 1, 0] = np.bincount(gid, weights=dm * dx * dy, minlength=n)
        gA[:, 1, 1] = np.bincount(gid, weights=dm * dy * dy, minlength=n)

        g_cov2 = -proj.conic @ gA @ proj.conic
        g_cov3 = proj.T.transpose(0, 2, 1) @ g_cov2 @ proj.T
        g_T = 2.0 * g_cov2 @ proj.T @ proj.cov3
        g_J = g_T @ view.pose.rotation.T

        x, y, z = proj.pc[:, 0], proj.pc[:, 1], proj.pc[:, 2]
        fx, fy = intr.fx, intr.fy
        g_pc = np.zeros((n, 3))
        g_pc[:, 0] = g_u * fx / z - g_J[:, 0, 2] * fx / z**2
        g_pc[:, 1] = g_v * fy / z - g_J[:, 1, 2] * fy / z**2
        g_pc[:, 2] = (
            -g_u * fx * x / z**2
            - g_v * fy * y / z**2
            - g_J[:, 0, 0] * fx / z**2
            + g_J[:, 0, 2] * 2 * fx * x / z**3
            - g_J[:, 1, 1] * fy / z**2
            + g_J[:, 1, 2] * 2 * fy * y / z**3
        )
        g_mean = g_pc @ view.pose.rotation

        M = proj.rot * proj.scale[:, None, :]
        g_M = 2.0 * g_cov3 @ M
        g_scale = np.einsum("nij,nij->nj", g_M, proj.rot)
        g_rot = g_M * proj.scale[:, None, :]
        g_qhat = _rotmat_grad_to_quat(proj.quat, g_rot)
        raw_q = cloud.quats[proj.ids]
        qn = np.linalg.norm(raw_q, axis=1, keepdims=True)
        g_q = (g_qhat - proj.quat * np.sum(proj.quat * g_qhat, axis=1, keepdims=True)) / qn

        op = proj.opacity
        ids = proj.ids
        grads["means"][ids] = g_mean
        grads["log_scales"][ids] = g_scale * proj.scale
        grads["quats"][ids] = g_q
        grads["opacity_logits"][ids] = g_opac * op * (1.0 - op)
        grads["colors"][ids] = g_col
    if accumulate:
        for k in PARAM_CLASSES:
            cloud.grads[k] += grads[k]
    return grads
