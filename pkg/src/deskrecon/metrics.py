"""Image-quality and calibration metrics: PSNR, SSIM (with gradient), AUSE."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray) -> np.ndarray:
    # separable, zero-padded 'same' filtering over the two spatial axes
    w = gaussian_window_1d()
    out = ndimage.correlate1d(img, w, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, w, axis=1, mode="constant", cval=0.0)


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mx * my + C1
    a2 = 2 * (exy - mx * my) + C2
    b1 = mx * mx + my * my + C1
    b2 = (exx - mx * mx) + (eyy - my * my) + C2
    return mx, my, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), zero padding, channel-averaged.

    Raises
    ------
    ShapeMismatch
    """
    x, y = _check(a, b)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_with_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its gradient with respect to ``a``."""
    x, y = _check(a, b)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    num, den = a1 * a2, b1 * b2
    s = num / den
    n = s.size
    # partials of the per-pixel map w.r.t. the local statistics of x
    d_mx = ((2 * my * a2 - 2 * my * a1) * den - num * (2 * mx * b2 - 2 * mx * b1)) / den**2
    d_exx = -num * b1 / den**2
    d_exy = 2 * a1 / den
    # the zero-padded symmetric filter is self-adjoint
    grad = (_blur(d_mx) + 2 * x * _blur(d_exx) + y * _blur(d_exy)) / n
    return float(s.mean()), grad.reshape(np.shape(a))


def psnr(a, b) -> float:
    x, y = _check(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def l1_with_grad(a, b) -> tuple[float, np.ndarray]:
    x, y = _check(a, b)
    d = x - y
    return float(np.abs(d).mean()), (np.sign(d) / d.size).reshape(np.shape(a))


# -- AUSE ----------------------------------------------------------------------


def _removal_curve(errors: np.ndarray, key: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Mean remaining error after removing ``fractions`` of pixels in descending ``key`` order.

    Pixels with equal keys are removed as a block, at the block's mean error,
    so the result does not depend on how ties happen to be ordered.
    """
    order = np.argsort(-key, kind="stable")
    e, k = errors[order], key[order]
    n = len(e)
    # collapse tie groups to their mean
    starts = np.flatnonzero(np.concatenate([[True], k[1:] != k[:-1]]))
    sizes = np.diff(np.concatenate([starts, [n]]))
    group_mean = np.add.reduceat(e, starts) / sizes
    e = np.repeat(group_mean, sizes)
    cum = np.concatenate([[0.0], np.cumsum(e)])
    total = cum[-1]
    removed = fractions * n
    whole = np.floor(removed).astype(np.int64)
    part = removed - whole
    nxt = e[np.minimum(whole, n - 1)]
    gone = cum[whole] + part * nxt
    return (total - gone) / (n - removed)


def sparsification_curves(errors, uncertainty, step: float = 0.01):
    """Uncertainty-ordered and oracle (error-ordered) sparsification curves.

    Errors are divided by their maximum first, so both curves lie in [0, 1]
    and share one scale.  Removing low-error pixels first can only raise the
    remaining mean, so an anti-calibrated map always scores worst.
    """
    e = np.asarray(errors, dtype=np.float64)
    u = np.asarray(uncertainty, dtype=np.float64)
    if e.shape != u.shape:
        raise ShapeMismatch(f"{e.shape} vs {u.shape}")
    e, u = e.ravel(), u.ravel()
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite values")
    fractions = np.arange(0.0, 1.0 - 1e-12, step)
    scale = np.abs(e).max() if len(e) else 0.0
    if scale <= 0:
        return fractions, np.zeros(len(fractions)), np.zeros(len(fractions))
    e = e / scale
    return fractions, _removal_curve(e, u, fractions), _removal_curve(e, e, fractions)


def ause(errors, uncertainty) -> float:
    """Area under the sparsification error: mean gap between the two normalised curves.

    Raises
    ------
    ShapeMismatch
    """
    _, curve, oracle = sparsification_curves(errors, uncertainty)
    return float(np.mean(np.abs(curve - oracle)))
