import pytest

from deskrecon.config import FIELDS, env_name, env_overrides, load_config, parse_text, validate
from deskrecon.errors import ConfigError


class TestParse:
    def test_defaults(self):
        cfg = load_config(environ={})
        assert cfg["scene.preset"] == "sphere-room" and cfg["coverage.N"] == 20.0
        assert cfg["residual.alpha"] == 90.0 and cfg["residual.beta"] == 10.0
        assert cfg["coverage.dilation_radius"] == 2 and cfg["coverage.table_size"] == 2**19

    def test_values_comments_and_types(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("# experiment\nrun.seed = 7   # trailing\n\ncoverage.table_size = none\n"
                     "selection.fixed_order = 3, 1 2\nselection.fisher_relative = off\nsapoints.tau = 0.5\n")
        cfg = load_config(p, environ={})
        assert cfg.seed == 7 and cfg["coverage.table_size"] is None
        assert cfg["selection.fixed_order"] == (3, 1, 2) and cfg["selection.fisher_relative"] is False
        assert cfg["sapoints.tau"] == 0.5

    def test_power_of_two_shorthand(self):
        assert parse_text("coverage.table_size = 2**11")["coverage.table_size"] == 2048

    @pytest.mark.parametrize("text,field", [
        ("scene.colour = red", "scene.colour"),
        ("run.seed = 1\nrun.seed = 2", "run.seed"),
        ("run.seed = one", "run.seed"),
        ("just words", "<config>:1"),
    ])
    def test_bad_lines(self, text, field):
        with pytest.raises(ConfigError) as exc:
            parse_text(text)
        assert exc.value.field == field


class TestValidate:
    @pytest.mark.parametrize("key,value", [
        ("residual.alpha", 0.0), ("residual.beta", 100.5), ("coverage.N", 0.0), ("coverage.N", 101.0),
        ("sapoints.tau", 0.0), ("sapoints.dz", 0.1), ("scene.resolution", 4), ("scene.preset", "moon"),
        ("selection.mode", "greedy"), ("optim.kind", "lbfgs"), ("coverage.table_size", 0),
        ("schedule.initial_views", 1), ("optim.prune_opacity", 1.0),
    ])
    def test_out_of_range_names_field(self, key, value):
        with pytest.raises(ConfigError) as exc:
            validate({key: value})
        assert exc.value.field == key

    def test_loss_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError) as exc:
            validate({"residual.lambda_full": 0.3})
        assert exc.value.field == "residual.lambda_sup"
        validate({"residual.lambda_full": 0.3, "residual.lambda_sup": 0.7})

    def test_target_below_initial(self):
        with pytest.raises(ConfigError, match="initial_views"):
            validate({"schedule.initial_views": 6, "schedule.target_views": 5})

    def test_target_above_pool(self):
        with pytest.raises(ConfigError, match="n_candidates"):
            validate({"scene.n_candidates": 10, "schedule.target_views": 12})

    def test_scene_source_required(self):
        with pytest.raises(ConfigError):
            validate({"scene.preset": None})

    def test_repeated_fixed_order(self):
        with pytest.raises(ConfigError):
            validate({"selection.mode": "fixed-order", "selection.fixed_order": (1, 2, 1)})

    def test_replace(self):
        cfg = validate({}).replace(run__seed=4)
        assert cfg.seed == 4 and cfg.scene_seed == 4
        assert cfg.replace(scene__seed=9).scene_seed == 9
        with pytest.raises(ConfigError):
            cfg.replace(run__sed=1)

    def test_typed_sections(self):
        cfg = validate({"schedule.total_iters": 50, "residual.rng_seed": 3, "coverage.N": 100.0, "run.seed": 2})
        assert cfg.schedule().total_iters == 50
        assert cfg.residual().rng_seed == 3
        s = cfg.loop_settings()
        assert s.N == 100.0 and s.seed == 2 and s.table_size == 2**19


class TestEnvironment:
    def test_names(self):
        assert env_name("schedule.total_iters") == "DESKRECON_SCHEDULE_TOTAL_ITERS"
        assert len({env_name(k) for k in FIELDS}) == len(FIELDS)

    def test_env_beats_file_and_flags_beat_env(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("run.seed = 1\nrun.log_every = 5\n")
        env = {"DESKRECON_RUN_SEED": "2", "DESKRECON_RUN_LOG_EVERY": "6", "HOME": "/x"}
        cfg = load_config(p, environ=env, overrides={"run.seed": 3})
        assert cfg.seed == 3 and cfg["run.log_every"] == 6

    def test_unknown_env_key(self):
        with pytest.raises(ConfigError):
            env_overrides({"DESKRECON_RUN_SPEED": "1"})

    def test_bad_env_value(self):
        with pytest.raises(ConfigError) as exc:
            env_overrides({"DESKRECON_SAPOINTS_TAU": "wide"})
        assert exc.value.field == "sapoints.tau"


class TestDump:
    def test_dump_reloads_identically(self, tmp_path):
        cfg = validate({"coverage.table_size": None, "selection.fixed_order": (4, 2), "selection.mode": "fixed-order",
                        "selection.fisher_relative": False, "sapoints.tau": 0.75, "scene.colmap_dir": "cap"})
        p = tmp_path / "d.cfg"
        p.write_text(cfg.dump())
        assert dict(load_config(p, environ={}).values) == dict(cfg.values)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.cfg", environ={})
