"""
Command-line entry point.

    deskrecon run --config exp.cfg [--mode M] [--seed N] [--out DIR]
    deskrecon validate-config exp.cfg
    deskrecon make-fixture sphere-room DIR [--seed N] [--resolution R]
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .colmap import load_captured_scene, write_colmap
from .config import ExperimentConfig, load_config
from .errors import DeskReconError
from .fileio import write_csv, write_ply, write_ppm
from .sapoints import OracleSource, PerturbationSpec, extrapolate_pose, generate_correspondences, write_correspondences
from .scenes import make_scene
from .trainer import RunReport, perturbation_seed, run_active_loop

RUN_HEADER = ("iteration", "view_count", "L_full", "L_sup", "psnr_holdout", "ssim_holdout")
SELECTION_HEADER = ("round", "candidate_id", "hamming_d", "in_cprime", "fisher_score", "chosen")


def build_scene(cfg: ExperimentConfig):
    v = cfg.values
    if v["scene.colmap_dir"] is not None:
        return load_captured_scene(v["scene.colmap_dir"])
    return make_scene(
        v["scene.preset"], cfg.scene_seed, resolution=v["scene.resolution"], fov_deg=v["scene.fov_deg"],
        n_candidates=v["scene.n_candidates"], n_test=v["scene.n_test"], gt_gaussians=v["scene.gt_gaussians"],
        sfm_count=v["scene.sfm_count"],
    )


def _none_if_nan(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def selection_rows(report: RunReport):
    for rnd in report.state.rounds:
        for cid in rnd.candidates:
            d = rnd.distances.get(cid) if rnd.distances is not None else None
            yield (rnd.round, cid, d, cid in rnd.prefiltered, rnd.fisher.get(cid), cid == rnd.chosen)


def write_outputs(report: RunReport, cfg: ExperimentConfig, out_dir) -> dict:
    """Write CSV logs, held-out renders, the final cloud and a JSON summary; return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "run.csv", RUN_HEADER,
              ([r.iteration, r.view_count, r.L_full, r.L_sup, r.psnr_holdout, r.ssim_holdout] for r in report.rows))
    write_csv(out / "selection.csv", SELECTION_HEADER, selection_rows(report))
    timing = [{"round": r.round, "t_sapoints_ms": r.t_sapoints_ms, "t_prefilter_ms": r.t_prefilter_ms,
               "t_fisher_ms": r.t_fisher_ms, "n_scored": len(r.fisher)} for r in report.state.rounds]
    (out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    renders = out / "renders"
    renders.mkdir(exist_ok=True)
    for vid, img in sorted(report.final_renders.items()):
        write_ppm(renders / f"{vid}.ppm", img)
    write_ply(out / "cloud.ply", report.cloud)
    (out / "config.cfg").write_text(cfg.dump())
    summary = {
        "mode": report.mode,
        "seed": cfg.seed,
        "psnr_holdout": report.psnr_holdout,
        "ssim_holdout": report.ssim_holdout,
        "ause": _none_if_nan(report.ause),
        "per_view": {str(k): {"psnr": p, "ssim": s} for k, (p, s) in sorted(report.per_view.items())},
        "selection_rounds": len(report.state.rounds),
        "training_views": list(report.state.training),
        "pruned_total": report.pruned_total,
        "n_gaussians": len(report.cloud),
        "timing_ms": {**report.stage_means_ms, "train_per_iter": report.train_ms_per_iter},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=_json_default) + "\n")
    return summary


def _json_default(o):
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(type(o).__name__)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> tuple[RunReport, dict]:
    scene = build_scene(cfg)
    report = run_active_loop(scene, cfg.schedule(), cfg.residual(), cfg["selection.mode"], cfg.loop_settings())
    summary = write_outputs(report, cfg, out_dir or cfg["run.out_dir"])
    return report, summary


def make_fixture(preset: str, out_dir, seed: int = 0, resolution: int = 64, fov_deg: float = 40.0,
                 perturbation: PerturbationSpec = PerturbationSpec()) -> Path:
    """Export a synthetic scene as a COLMAP text model with PPM images and correspondence files.

    Correspondences are noiseless oracle pairs for the extrapolated pose a
    run with master seed ``seed`` will use, so ``scene.colmap_dir`` runs
    reproduce the synthetic pipeline.
    """
    scene = make_scene(preset, seed, resolution=resolution, fov_deg=fov_deg)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "correspondences").mkdir(exist_ok=True)
    held = {v.id for v in scene.test_views}
    names = {}
    for v in scene.candidates + scene.test_views:
        names[v.id] = f"{'test' if v.id in held else 'cand'}_{v.id:03d}.ppm"
        write_ppm(out / "images" / names[v.id], scene.images[v.id])
    write_colmap(out, scene.candidates + scene.test_views, names, scene.sfm_points)
    source = OracleSource(scene.geometry, 0.0, 1)
    for v in scene.candidates:
        spec = PerturbationSpec(perturbation.dx, perturbation.dy, perturbation.dz, perturbation_seed(seed, v.id))
        corr = generate_correspondences(source, v, extrapolate_pose(v, spec))
        write_correspondences(out / "correspondences" / f"{v.id}.txt", corr, header="x_r y_r x_e y_e")
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskrecon", description="Desk-scale active Gaussian-splat reconstruction.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one active-reconstruction experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--mode")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    v = sub.add_parser("validate-config", help="check a config file and print the resolved values")
    v.add_argument("path")
    f = sub.add_parser("make-fixture", help="export a synthetic preset as a COLMAP text model")
    f.add_argument("preset")
    f.add_argument("dir")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--resolution", type=int, default=64)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate-config":
            cfg = load_config(args.path)
            sys.stdout.write(cfg.dump())
            return 0
        if args.command == "make-fixture":
            out = make_fixture(args.preset, args.dir, seed=args.seed, resolution=args.resolution)
            print(f"wrote {out}")
            return 0
        overrides = {}
        if args.mode is not None:
            overrides["selection.mode"] = args.mode
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        if args.out is not None:
            overrides["run.out_dir"] = args.out
        cfg = load_config(args.config, overrides=overrides)
        _, summary = run_experiment(cfg)
        print(f"psnr {summary['psnr_holdout']:.3f}  ssim {summary['ssim_holdout']:.4f}  "
              f"rounds {summary['selection_rounds']}  -> {cfg['run.out_dir']}")
        return 0
    except DeskReconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
