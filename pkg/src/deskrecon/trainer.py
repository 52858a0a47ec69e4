"""
Active reconstruction loop
==========================

Residual supervision (a full render and a subset render, both compared to
ground truth), the per-Gaussian uncertainty rank that picks the subset,
Fisher-style candidate scoring, coarse-to-fine next-view selection and the
training schedule that ties them together.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .coverage import CoverageField, FrustumCache, build_grid, dilate, mark_observed, rank_candidates
from .errors import InsufficientCandidates, NoVisibleOverlap, ShapeMismatch
from .geom import CameraView, project_many
from .metrics import ause, l1_with_grad, psnr, ssim, ssim_with_grad
from .sapoints import FileSource, OracleSource, PerturbationSpec, build_sa_points
from .splat import PARAM_CLASSES, GaussianCloud, backward, logit, prune, render

MODES = ("sa-resgs", "fisher-only", "random", "fixed-order")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for the named stream of a master seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class ResidualConfig:
    alpha: float = 90.0
    beta: float = 10.0
    lambda_full: float = 0.5
    lambda_sup: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 100:
            raise ValueError("alpha must lie in (0, 100]")
        if not 0 <= self.beta <= 100:
            raise ValueError("beta must lie in [0, 100]")
        if self.lambda_full < 0 or self.lambda_sup < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_full + self.lambda_sup != 1.0:
            raise ValueError("lambda_full + lambda_sup must equal 1")


@dataclass(frozen=True)
class Schedule:
    initial_views: int = 4
    add_every: int = 100
    target_views: int = 20
    total_iters: int = 2000

    def __post_init__(self):
        if self.initial_views < 2:
            raise ValueError("initial_views must be >= 2")
        if self.target_views < self.initial_views:
            raise ValueError("target_views must be >= initial_views")
        if self.add_every < 1 or self.total_iters < 0:
            raise ValueError("add_every must be >= 1 and total_iters >= 0")


@dataclass(frozen=True)
class OptimConfig:
    """Per-class step sizes; ``means`` is multiplied by the scene extent."""

    kind: str = "adam"
    lr_means: float = 1.6e-4
    lr_log_scales: float = 1e-2
    lr_quats: float = 1e-2
    lr_opacity_logits: float = 1e-2
    lr_colors: float = 1e-2
    prune_every: int = 100
    prune_opacity: float = 0.005

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError("optimizer kind must be 'adam' or 'sgd'")
        if self.prune_every < 0:
            raise ValueError("prune_every must be >= 0")

    def rates(self, extent: float = 1.0) -> dict:
        return {
            "means": self.lr_means * extent,
            "log_scales": self.lr_log_scales,
            "quats": self.lr_quats,
            "opacity_logits": self.lr_opacity_logits,
            "colors": self.lr_colors,
        }


@dataclass(frozen=True)
class LoopSettings:
    """Everything ``run_active_loop`` needs beyond the schedule and loss weights."""

    N: float = 20.0
    table_size: Optional[int] = 2**19
    hash_seed: int = 0
    coverage_resolution: int = 64
    min_points: int = 2
    dilation_radius: int = 2
    prior_radius: int = 1
    tau: float = 1.0
    perturbation: PerturbationSpec = PerturbationSpec()
    noise_sigma: float = 0.0
    stride: int = 5
    optim: OptimConfig = OptimConfig()
    log_every: int = 100
    fixed_order: Optional[tuple] = None
    fisher_relative: bool = True
    fisher_reg: float = 1e-6
    seed: int = 0


# -- uncertainty rank and subset -------------------------------------------------


@dataclass
class UncertaintyRank:
    scores: np.ndarray
    order: np.ndarray


def _rank_norm(x: np.ndarray) -> np.ndarray:
    if len(x) == 1:
        return np.zeros(1)
    return (rankdata(x, method="average") - 1.0) / (len(x) - 1.0)


def uncertainty_rank(cloud: GaussianCloud) -> UncertaintyRank:
    """Score Gaussians by fractional rank of transparency plus fractional rank of size.

    Raises
    ------
    ValueError
        On an empty cloud.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    scores = _rank_norm(1.0 - cloud.opacities) + _rank_norm(cloud.scales.mean(axis=1))
    order = np.lexsort((np.arange(len(scores)), -scores))
    return UncertaintyRank(scores, order)


def build_subset(cloud: GaussianCloud, rank: UncertaintyRank, cfg: ResidualConfig, rng=None) -> np.ndarray:
    """Sorted indices of a random sample of ``alpha`` % united with the top ``beta`` % uncertain."""
    n = len(cloud)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    n_rand = math.ceil(cfg.alpha / 100.0 * n)
    n_unc = math.ceil(cfg.beta / 100.0 * n)
    g_rand = rng.choice(n, size=n_rand, replace=False)
    return np.union1d(g_rand, rank.order[:n_unc]).astype(np.int64)


# -- losses and the residual step -------------------------------------------------


def photometric_loss(image, gt) -> tuple[float, np.ndarray]:
    """``l1 + (1 - SSIM)`` and its gradient with respect to ``image``."""
    l1, g1 = l1_with_grad(image, gt)
    s, gs = ssim_with_grad(image, gt)
    return l1 + (1.0 - s), g1 - gs


@dataclass
class LossReport:
    L_full: float
    L_sup: float
    L_total: float


def residual_gradients(cloud: GaussianCloud, view: CameraView, gt_image, cfg: ResidualConfig, subset=None, rng=None):
    """Loss report and the weighted gradient of both branches, without touching ``cloud``.

    ``subset`` defaults to ``build_subset`` on a fresh uncertainty rank.
    """
    gt = np.asarray(gt_image, dtype=np.float64)
    intr = view.intrinsics
    if gt.shape != (intr.height, intr.width, 3):
        raise ShapeMismatch(f"gt image {gt.shape} vs view {(intr.height, intr.width, 3)}")
    if subset is None:
        subset = build_subset(cloud, uncertainty_rank(cloud), cfg, rng) if len(cloud) else None
    out_full = render(cloud, view)
    out_sup = render(cloud, view, subset=subset)
    L_full, d_full = photometric_loss(out_full.image, gt)
    L_sup, d_sup = photometric_loss(out_sup.image, gt)
    grads = {k: np.zeros_like(getattr(cloud, k)) for k in PARAM_CLASSES}
    for lam, out, d in ((cfg.lambda_full, out_full, d_full), (cfg.lambda_sup, out_sup, d_sup)):
        if lam > 0:
            for k, g in backward(cloud, view, out, d, accumulate=False).items():
                grads[k] += lam * g
    total = cfg.lambda_full * L_full + cfg.lambda_sup * L_sup
    return LossReport(L_full, L_sup, total), grads


class GradientDescent:
    def __init__(self, rates: dict):
        self.rates = dict(rates)

    def step(self, cloud: GaussianCloud):
        for k in PARAM_CLASSES:
            getattr(cloud, k)[...] -= self.rates[k] * cloud.grads[k]

    def keep(self, mask):
        pass


class Adam:
    def __init__(self, rates: dict, betas=(0.9, 0.999), eps=1e-15):
        self.rates = dict(rates)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, cloud: GaussianCloud):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in PARAM_CLASSES:
            g = cloud.grads[k]
            if k not in self.m or self.m[k].shape != g.shape:
                self.m[k], self.v[k] = np.zeros_like(g), np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            getattr(cloud, k)[...] -= self.rates[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def keep(self, mask):
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][mask]


def make_optimizer(optim: OptimConfig, extent: float = 1.0):
    rates = optim.rates(extent)
    return Adam(rates) if optim.kind == "adam" else GradientDescent(rates)


def residual_step(cloud, view, gt_image, cfg: ResidualConfig, optimizer=None, subset=None, rng=None) -> LossReport:
    """Accumulate both branches' gradients, then apply one parameter update.

    Without an ``optimizer`` a plain gradient step with the default rates is taken.
    """
    report, grads = residual_gradients(cloud, view, gt_image, cfg, subset, rng)
    cloud.zero_grad()
    for k in PARAM_CLASSES:
        cloud.grads[k] += grads[k]
    opt = optimizer or GradientDescent(OptimConfig().rates())
    opt.step(cloud)
    np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)
    cloud.normalize_quats()
    return report


# -- Fisher scoring and selection ---------------------------------------------------


def _unit_grads(cloud: GaussianCloud, view: CameraView) -> dict:
    out = render(cloud, view)
    intr = view.intrinsics
    return backward(cloud, view, out, np.ones((intr.height, intr.width, 3)), accumulate=False)


def fisher_score(cloud: GaussianCloud, candidate: CameraView, train_fisher: Optional[dict] = None,
                 reg: float = 1e-6) -> float:
    """Sum of squared parameter gradients of the candidate render under unit pixel adjoints.

    With ``train_fisher`` (per-parameter diagonal Fisher of the training
    views, as returned by ``diag_fisher``) each squared gradient is divided by
    ``train_fisher + reg``, which scores information the training set lacks.
    """
    if len(cloud) == 0:
        return 0.0
    grads = _unit_grads(cloud, candidate)
    if train_fisher is None:
        return float(sum(np.sum(g * g) for g in grads.values()))
    return float(sum(np.sum(g * g / (train_fisher[k] + reg)) for k, g in grads.items()))


def diag_fisher(cloud: GaussianCloud, views: Sequence[CameraView]) -> dict:
    """Per-parameter diagonal Fisher accumulated over ``views``."""
    total = {k: np.zeros_like(getattr(cloud, k)) for k in PARAM_CLASSES}
    for view in views:
        for k, g in _unit_grads(cloud, view).items():
            total[k] += g * g
    return total


def per_gaussian_fisher(cloud: GaussianCloud, views: Sequence[CameraView]) -> np.ndarray:
    """Diagonal Fisher mass of each Gaussian summed over ``views``."""
    return sum(f.reshape(len(cloud), -1).sum(axis=1) for f in diag_fisher(cloud, views).values())


@dataclass
class SelectionRound:
    round: int
    candidates: list
    distances: Optional[dict]
    prefiltered: list
    fisher: dict
    chosen: Hashable
    t_sapoints_ms: float = 0.0
    t_prefilter_ms: float = 0.0
    t_fisher_ms: float = 0.0


@dataclass
class SelectionState:
    training: list
    candidates: list
    rounds: list = field(default_factory=list)

    def __post_init__(self):
        if set(self.training) & set(self.candidates):
            raise ValueError("training and candidate sets overlap")

    def commit(self, rnd: SelectionRound):
        self.candidates.remove(rnd.chosen)
        self.training.append(rnd.chosen)
        self.rounds.append(rnd)


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


def select_next_view(
    state: SelectionState,
    fld: Optional[CoverageField],
    cloud: GaussianCloud,
    N: float,
    views: Mapping,
    *,
    table_size: Optional[int] = None,
    hash_seed: int = 0,
    prior: Optional[np.ndarray] = None,
    near_far=None,
    cache: Optional[FrustumCache] = None,
    t_sapoints_ms: float = 0.0,
    train_fisher: Optional[dict] = None,
    reg: float = 1e-6,
):
    """Prefilter by coverage dissimilarity, then pick the highest Fisher score.

    With ``fld=None`` every candidate is scored (no prefilter).  ``train_fisher``
    and ``reg`` are passed through to ``fisher_score``.  Ties go to
    the smaller id.  The chosen view moves from ``state.candidates`` to
    ``state.training`` and the round is appended to ``state.rounds``.

    Raises
    ------
    InsufficientCandidates
        When the pool is empty.
    """
    if not state.candidates:
        raise InsufficientCandidates("candidate pool is empty")
    pool = sorted(state.candidates)
    t0 = time.perf_counter()
    if fld is None:
        distances, shortlist = None, pool
    else:
        ranking = rank_candidates(fld, [views[i] for i in pool], N, table_size, hash_seed,
                                  near_far=near_far, prior=prior, cache=cache)
        distances, shortlist = ranking.distances, sorted(ranking.retained)
    t_pre = _ms(t0) if fld is not None else 0.0
    t0 = time.perf_counter()
    scores = {i: fisher_score(cloud, views[i], train_fisher, reg) for i in shortlist}
    t_fisher = _ms(t0)
    chosen = max(shortlist, key=lambda i: (scores[i], -_id_key(i)))
    rnd = SelectionRound(len(state.rounds) + 1, pool, distances, shortlist, scores, chosen,
                         t_sapoints_ms, t_pre, t_fisher)
    state.commit(rnd)
    return chosen


def _id_key(i):
    return i if isinstance(i, (int, np.integer)) else 0


# -- model initialisation -----------------------------------------------------------


def init_cloud(points, views: Sequence[CameraView], images: Mapping, opacity: float = 0.1) -> GaussianCloud:
    """Isotropic Gaussians on ``points`` coloured from the first image each one lands in."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return GaussianCloud.empty()
    k = min(4, n)
    if n > 1:
        d, _ = cKDTree(pts).query(pts, k=k)
        spacing = np.maximum(d[:, 1:].mean(axis=1), 1e-4)
    else:
        spacing = np.full(1, 0.05)
    colors = np.full((n, 3), 0.5)
    found = np.zeros(n, dtype=bool)
    for view in views:
        uv, _, ok = project_many(view, pts)
        ok &= ~found
        if not ok.any():
            continue
        img = images[view.id]
        col = np.clip(np.floor(uv[ok, 0]).astype(int), 0, view.intrinsics.width - 1)
        row = np.clip(np.floor(uv[ok, 1]).astype(int), 0, view.intrinsics.height - 1)
        colors[ok] = img[row, col]
        found |= ok
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud(pts, np.log(np.repeat(spacing[:, None], 3, axis=1)), quats,
                         np.full(n, logit(opacity)), colors)


# -- the loop -----------------------------------------------------------------------


@dataclass
class RunRow:
    iteration: int
    view_count: int
    L_full: float
    L_sup: float
    psnr_holdout: float
    ssim_holdout: float


@dataclass
class RunReport:
    mode: str
    rows: list
    state: SelectionState
    per_view: dict  # held-out id -> (psnr, ssim)
    psnr_holdout: float
    ssim_holdout: float
    ause: float
    pruned_total: int
    cloud: GaussianCloud
    final_renders: dict = field(repr=False, default_factory=dict)
    train_ms_per_iter: float = 0.0

    @property
    def stage_means_ms(self) -> dict:
        keys = ("t_sapoints_ms", "t_prefilter_ms", "t_fisher_ms")
        if not self.state.rounds:
            return {k: 0.0 for k in keys}
        return {k: float(np.mean([getattr(r, k) for r in self.state.rounds])) for k in keys}


def evaluate(cloud: GaussianCloud, views: Sequence[CameraView], images: Mapping) -> dict:
    out = {}
    for v in views:
        img = np.clip(render(cloud, v).image, 0.0, 1.0)
        out[v.id] = (psnr(img, images[v.id]), ssim(img, images[v.id]))
    return out


def depth_ause(cloud: GaussianCloud, train_views, eval_views, gt_depth, alpha_min: float = 0.5, eps: float = 1e-8):
    """Mean AUSE of rendered depth over ``eval_views``.

    Pixel uncertainty is the opacity-weighted average over contributing
    Gaussians of ``1 / (Fisher mass on the training views + eps)``; only
    pixels hit by the true surface and covered by the render are scored.
    """
    if len(cloud) == 0:
        return float("nan")
    inv = 1.0 / (per_gaussian_fisher(cloud, train_views) + eps)
    probe = cloud.copy()
    probe.colors = np.repeat(inv[:, None], 3, axis=1)
    values = []
    for v in eval_views:
        out = render(cloud, v)
        unc = render(probe, v).image[..., 0]
        gt = gt_depth(v)
        ok = np.isfinite(gt) & (out.alpha > alpha_min)
        if ok.sum() < 2:
            continue
        err = np.abs(out.depth[ok] - gt[ok])
        values.append(ause(err, unc[ok] / out.alpha[ok]))
    return float(np.mean(values)) if values else float("nan")


def _sa_points_for(scene, view, settings: LoopSettings):
    """SA points for one training view, or None when the scene offers no correspondences."""
    spec = PerturbationSpec(settings.perturbation.dx, settings.perturbation.dy, settings.perturbation.dz,
                            rng_seed=perturbation_seed(settings.seed, view.id))
    corr_dir = getattr(scene, "correspondence_dir", None)
    if corr_dir is not None:
        path = corr_dir / f"{view.id}.txt"
        if not path.is_file():
            return None
        source = FileSource(path)
    elif scene.geometry is not None:
        source = OracleSource(scene.geometry, settings.noise_sigma, settings.stride,
                              rng_seed=int(substream(settings.seed, "noise", view.id).integers(2**31)))
    else:
        return None
    try:
        return build_sa_points(view, spec, source, settings.tau)
    except NoVisibleOverlap:
        return None


def perturbation_seed(seed: int, view_id) -> int:
    return int(substream(seed, "perturbation", view_id).integers(2**31))


def run_active_loop(scene, schedule: Schedule, cfg: ResidualConfig, mode: str = "sa-resgs",
                    settings: LoopSettings = LoopSettings()) -> RunReport:
    """Train from the initial views, adding one selected view every ``add_every`` iterations.

    Raises
    ------
    InsufficientCandidates
        When the pool cannot supply ``target_views`` views.
    """
    if mode not in MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    if len(scene.candidates) < schedule.target_views:
        raise InsufficientCandidates(f"{len(scene.candidates)} candidates for {schedule.target_views} views")
    views = scene.views
    initial = scene.initial_views(schedule.initial_views)
    state = SelectionState(list(initial), [v.id for v in scene.candidates if v.id not in initial])
    cloud = init_cloud(scene.sfm_points, [views[i] for i in initial], scene.images)
    optimizer = make_optimizer(settings.optim, scene.extent)

    rng_subset = substream(settings.seed, "subset", cfg.rng_seed)
    rng_train = substream(settings.seed, "train")
    rng_select = substream(settings.seed, "selection")
    fixed = list(settings.fixed_order) if settings.fixed_order is not None else sorted(state.candidates)

    fld = prior = None
    cache = FrustumCache()
    if mode == "sa-resgs":
        base = build_grid(scene.sfm_points, settings.coverage_resolution, settings.min_points)
        fld = CoverageField.empty(base.grid, settings.dilation_radius, sfm_points=scene.sfm_points)
        prior = dilate(base, settings.prior_radius).dilated_occupied
    marked: set = set()

    rows, pruned_total = [], 0
    window_full, window_sup = [], []
    t_train = 0.0
    for it in range(1, schedule.total_iters + 1):
        t0 = time.perf_counter()
        vid = state.training[int(rng_train.integers(len(state.training)))]
        if len(cloud):
            subset = build_subset(cloud, uncertainty_rank(cloud), cfg, rng_subset)
            rep = residual_step(cloud, views[vid], scene.images[vid], cfg, optimizer, subset)
            window_full.append(rep.L_full)
            window_sup.append(rep.L_sup)
        if settings.optim.prune_every and it % settings.optim.prune_every == 0 and len(cloud):
            keep = cloud.opacities >= settings.optim.prune_opacity
            optimizer.keep(keep)
            pruned_total += len(prune(cloud, settings.optim.prune_opacity).removed)
        t_train += time.perf_counter() - t0

        if it % schedule.add_every == 0 and len(state.training) < schedule.target_views:
            if not state.candidates:
                raise InsufficientCandidates("candidate pool exhausted")
            fisher_kw = {}
            if mode in ("sa-resgs", "fisher-only") and settings.fisher_relative:
                fisher_kw = dict(train_fisher=diag_fisher(cloud, [views[i] for i in state.training]),
                                 reg=settings.fisher_reg)
            if mode == "sa-resgs":
                t0 = time.perf_counter()
                for tid in state.training:
                    if tid not in marked:
                        sa = _sa_points_for(scene, views[tid], settings)
                        if sa is not None and len(sa):
                            fld = mark_observed(fld, sa)
                        marked.add(tid)
                t_sa = _ms(t0)
                select_next_view(state, fld, cloud, settings.N, views, table_size=settings.table_size,
                                 hash_seed=settings.hash_seed, prior=prior, cache=cache, t_sapoints_ms=t_sa,
                                 **fisher_kw)
            elif mode == "fisher-only":
                select_next_view(state, None, cloud, 100.0, views, **fisher_kw)
            else:
                pool = sorted(state.candidates)
                if mode == "random":
                    chosen = pool[int(rng_select.integers(len(pool)))]
                else:
                    remaining = [i for i in fixed if i in state.candidates]
                    if not remaining:
                        raise InsufficientCandidates("fixed order exhausted")
                    chosen = remaining[0]
                state.commit(SelectionRound(len(state.rounds) + 1, pool, None, [chosen], {}, chosen))

        if (settings.log_every and it % settings.log_every == 0) or it == schedule.total_iters:
            ev = evaluate(cloud, scene.test_views, scene.images)
            rows.append(RunRow(
                it, len(state.training),
                float(np.mean(window_full)) if window_full else float("nan"),
                float(np.mean(window_sup)) if window_sup else float("nan"),
                float(np.mean([p for p, _ in ev.values()])), float(np.mean([s for _, s in ev.values()])),
            ))
            window_full, window_sup = [], []

    per_view = evaluate(cloud, scene.test_views, scene.images)
    finals = {v.id: np.clip(render(cloud, v).image, 0.0, 1.0) for v in scene.test_views}
    a = float("nan")
    if scene.depth is not None:
        a = depth_ause(cloud, [views[i] for i in state.training], scene.test_views, scene.depth)
    return RunReport(
        mode=mode, rows=rows, state=state, per_view=per_view,
        psnr_holdout=float(np.mean([p for p, _ in per_view.values()])),
        ssim_holdout=float(np.mean([s for _, s in per_view.values()])),
        ause=a, pruned_total=pruned_total, cloud=cloud, final_renders=finals,
        train_ms_per_iter=t_train * 1e3 / max(schedule.total_iters, 1),
    )
