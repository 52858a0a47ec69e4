"""
Experiment configuration
========================

Plain ``key = value`` lines; keys carry a dotted section prefix
(``schedule.total_iters = 2000``).  ``#`` starts a comment.  Every key has a
type, a default and a range check, and unknown keys are rejected, so a bad
file fails as a whole before anything runs.

Environment variables named ``DESKRECON_`` + the key upper-cased with dots
replaced by underscores (``DESKRECON_SCHEDULE_TOTAL_ITERS``) override the
file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from .errors import ConfigError
from .sapoints import PerturbationSpec
from .scenes import PRESETS
from .trainer import MODES, LoopSettings, OptimConfig, ResidualConfig, Schedule

ENV_PREFIX = "DESKRECON_"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> Optional[int]:
    t = text.strip().lower()
    if t in ("", "none"):
        return None
    if t.startswith("2**"):
        return 2 ** int(t[3:])
    return int(t)


def _int_list(text: str) -> Optional[tuple]:
    t = text.strip()
    if t.lower() in ("", "none"):
        return None
    return tuple(int(x) for x in t.replace(",", " ").split())


def _opt_str(text: str) -> Optional[str]:
    t = text.strip()
    return None if t.lower() in ("", "none") else t


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    rule: str = ""


def _between(lo, hi, lo_open=False):
    if lo_open:
        return (lambda v: lo < v <= hi), f"must lie in ({lo}, {hi}]"
    return (lambda v: lo <= v <= hi), f"must lie in [{lo}, {hi}]"


def _at_least(lo):
    return (lambda v: v >= lo), f"must be >= {lo}"


def _positive():
    return (lambda v: v > 0), "must be > 0"


def _f(parse, default, rule=None):
    check, text = rule if rule else (None, "")
    return Field(parse, default, check, text)


FIELDS: dict[str, Field] = {
    "scene.preset": _f(_opt_str, "sphere-room", ((lambda v: v is None or v in PRESETS), f"must be one of {PRESETS}")),
    "scene.colmap_dir": _f(_opt_str, None),
    "scene.seed": _f(_opt_int, None),
    "scene.resolution": _f(int, 64, _between(8, 1024)),
    "scene.fov_deg": _f(float, 40.0, ((lambda v: 1.0 <= v < 179.0), "must lie in [1, 179)")),
    "scene.n_candidates": _f(int, 40, _at_least(1)),
    "scene.n_test": _f(int, 8, _at_least(1)),
    "scene.gt_gaussians": _f(int, 6000, _at_least(1)),
    "scene.sfm_count": _f(int, 1500, _at_least(4)),
    "schedule.initial_views": _f(int, 4, _at_least(2)),
    "schedule.add_every": _f(int, 100, _at_least(1)),
    "schedule.target_views": _f(int, 20, _at_least(2)),
    "schedule.total_iters": _f(int, 2000, _at_least(0)),
    "residual.alpha": _f(float, 90.0, _between(0, 100, lo_open=True)),
    "residual.beta": _f(float, 10.0, _between(0, 100)),
    "residual.lambda_full": _f(float, 0.5, _between(0, 1)),
    "residual.lambda_sup": _f(float, 0.5, _between(0, 1)),
    "residual.rng_seed": _f(int, 0, _at_least(0)),
    "coverage.resolution": _f(int, 32, _between(1, 512)),
    "coverage.min_points": _f(int, 2, _at_least(1)),
    "coverage.dilation_radius": _f(int, 2, _between(0, 16)),
    "coverage.prior_radius": _f(int, 1, _between(0, 16)),
    "coverage.N": _f(float, 20.0, _between(0, 100, lo_open=True)),
    "coverage.table_size": _f(_opt_int, 2**19, ((lambda v: v is None or v >= 1), "must be >= 1 or none")),
    "coverage.hash_seed": _f(int, 0, _at_least(0)),
    "sapoints.tau": _f(float, 1.0, _positive()),
    "sapoints.dx": _f(float, 0.25, _at_least(0.0)),
    "sapoints.dy": _f(float, 0.25, _at_least(0.0)),
    "sapoints.dz": _f(float, -0.5, ((lambda v: v <= 0), "must be <= 0")),
    "sapoints.noise_sigma": _f(float, 0.0, _at_least(0.0)),
    "sapoints.stride": _f(int, 1, _at_least(1)),
    "optim.kind": _f(str, "adam", ((lambda v: v in ("adam", "sgd")), "must be 'adam' or 'sgd'")),
    "optim.lr_means": _f(float, 1.6e-4, _at_least(0.0)),
    "optim.lr_log_scales": _f(float, 1e-2, _at_least(0.0)),
    "optim.lr_quats": _f(float, 1e-2, _at_least(0.0)),
    "optim.lr_opacity_logits": _f(float, 1e-2, _at_least(0.0)),
    "optim.lr_colors": _f(float, 1e-2, _at_least(0.0)),
    "optim.prune_every": _f(int, 100, _at_least(0)),
    "optim.prune_opacity": _f(float, 0.005, ((lambda v: 0 < v < 1), "must lie in (0, 1)")),
    "selection.mode": _f(str, "sa-resgs", ((lambda v: v in MODES), f"must be one of {MODES}")),
    "selection.fixed_order": _f(_int_list, None),
    "selection.fisher_relative": _f(_bool, True),
    "selection.fisher_reg": _f(float, 1e-6, _positive()),
    "run.seed": _f(int, 0, _at_least(0)),
    "run.out_dir": _f(str, "out"),
    "run.log_every": _f(int, 100, _at_least(0)),
}


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_").replace("-", "_")


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **updates) -> "ExperimentConfig":
        """Override keys given with underscores for dots: ``replace(run__seed=3)``."""
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in FIELDS:
                raise ConfigError(key, "unknown key")
            vals[key] = v
        return validate(vals)

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def scene_seed(self) -> int:
        s = self.values["scene.seed"]
        return self.seed if s is None else s

    def schedule(self) -> Schedule:
        v = self.values
        return Schedule(v["schedule.initial_views"], v["schedule.add_every"], v["schedule.target_views"],
                        v["schedule.total_iters"])

    def residual(self) -> ResidualConfig:
        v = self.values
        return ResidualConfig(v["residual.alpha"], v["residual.beta"], v["residual.lambda_full"],
                              v["residual.lambda_sup"], v["residual.rng_seed"])

    def loop_settings(self) -> LoopSettings:
        v = self.values
        return LoopSettings(
            N=v["coverage.N"], table_size=v["coverage.table_size"], hash_seed=v["coverage.hash_seed"],
            coverage_resolution=v["coverage.resolution"], min_points=v["coverage.min_points"],
            dilation_radius=v["coverage.dilation_radius"], prior_radius=v["coverage.prior_radius"],
            tau=v["sapoints.tau"],
            perturbation=PerturbationSpec(v["sapoints.dx"], v["sapoints.dy"], v["sapoints.dz"]),
            noise_sigma=v["sapoints.noise_sigma"], stride=v["sapoints.stride"],
            optim=OptimConfig(
                v["optim.kind"], v["optim.lr_means"], v["optim.lr_log_scales"], v["optim.lr_quats"],
                v["optim.lr_opacity_logits"], v["optim.lr_colors"], v["optim.prune_every"], v["optim.prune_opacity"],
            ),
            log_every=v["run.log_every"], fixed_order=v["selection.fixed_order"],
            fisher_relative=v["selection.fisher_relative"], fisher_reg=v["selection.fisher_reg"], seed=self.seed,
        )

    def dump(self) -> str:
        lines = []
        for key in FIELDS:
            val = self.values[key]
            if val is None:
                text = "none"
            elif isinstance(val, bool):
                text = "true" if val else "false"
            elif isinstance(val, tuple):
                text = ", ".join(str(x) for x in val)
            else:
                text = str(val)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def _parse_value(key: str, text: str):
    try:
        return FIELDS[key].parse(text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, f"cannot parse {text!r}: {exc}") from None


def validate(values: Mapping[str, Any]) -> ExperimentConfig:
    """Fill defaults, range-check every field, then check cross-field rules.

    Raises
    ------
    ConfigError
        Naming the first offending key.
    """
    full = {k: f.default for k, f in FIELDS.items()}
    for k, v in values.items():
        if k not in FIELDS:
            raise ConfigError(k, "unknown key")
        full[k] = v
    for k, f in FIELDS.items():
        if f.check is not None and full[k] is not None and not f.check(full[k]):
            raise ConfigError(k, f"{full[k]!r} {f.rule}")
    if full["residual.lambda_full"] + full["residual.lambda_sup"] != 1.0:
        raise ConfigError("residual.lambda_sup", "lambda_full + lambda_sup must equal 1")
    if full["schedule.target_views"] < full["schedule.initial_views"]:
        raise ConfigError("schedule.target_views", "must be >= schedule.initial_views")
    if full["scene.preset"] is None and full["scene.colmap_dir"] is None:
        raise ConfigError("scene.preset", "either scene.preset or scene.colmap_dir is required")
    if full["scene.colmap_dir"] is None and full["scene.n_candidates"] < full["schedule.target_views"]:
        raise ConfigError("schedule.target_views", "exceeds scene.n_candidates")
    if full["selection.mode"] == "fixed-order" and full["selection.fixed_order"] is not None:
        if len(set(full["selection.fixed_order"])) != len(full["selection.fixed_order"]):
            raise ConfigError("selection.fixed_order", "repeated view id")
    return ExperimentConfig(full)


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{n}", "expected 'key = value'")
        key, val = (s.strip() for s in body.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(key, f"unknown key ({source}:{n})")
        if key in out:
            raise ConfigError(key, f"set twice ({source}:{n})")
        out[key] = _parse_value(key, val)
    return out


def env_overrides(environ: Mapping[str, str]) -> dict:
    out = {}
    known = {env_name(k): k for k in FIELDS}
    for name, text in environ.items():
        if name.startswith(ENV_PREFIX):
            if name not in known:
                raise ConfigError(name, "unknown environment override")
            out[known[name]] = _parse_value(known[name], text)
    return out


def load_config(path=None, environ: Optional[Mapping[str, str]] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """File, then environment, then explicit ``overrides`` (dotted keys)."""
    vals = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(str(p), f"cannot read: {exc.strerror}") from None
        vals.update(parse_text(text, str(p)))
    vals.update(env_overrides(os.environ if environ is None else environ))
    for k, v in (overrides or {}).items():
        if k not in FIELDS:
            raise ConfigError(k, "unknown key")
        vals[k] = v
    return validate(vals)
