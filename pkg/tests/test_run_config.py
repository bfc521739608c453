import argparse
import json
import math
import os

import pytest

from errors import ConfigError
from run_config import RunConfig, add_config_flags, apply_flag_overrides, config_from_dict, load_config

REPO_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config.json")


def write_config(tmp_path, values):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(values))
    return str(path)


def parse_flags(argv):
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    add_config_flags(parser)
    return parser.parse_args(argv)


class TestLoadConfig:
    def test_shipped_config_matches_defaults(self):
        assert load_config(REPO_CONFIG) == RunConfig()

    def test_missing_path_gives_defaults(self):
        assert load_config(None) == RunConfig()
        assert load_config("") == RunConfig()

    def test_partial_file_keeps_other_defaults(self, tmp_path):
        config = load_config(write_config(tmp_path, {"SEED": 42, "GRASP_TARGET": 5}))
        assert (config.seed, config.grasp_target) == (42, 5)
        assert config.grasp_offset == RunConfig().grasp_offset

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="GRASP_OFSET"):
            load_config(write_config(tmp_path, {"GRASP_OFSET": 0.1}))

    def test_lowercase_key_is_unknown(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, {"seed": 1}))

    def test_nested_value(self, tmp_path):
        with pytest.raises(ConfigError, match="nested"):
            load_config(write_config(tmp_path, {"GRASP": {"OFFSET": 0.1}}))

    def test_not_an_object(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, [1, 2, 3]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{\"SEED\": ")
        with pytest.raises(ConfigError):
            load_config(str(path))


class TestCoercion:
    def test_nullable_fields(self):
        config = config_from_dict({"NOISE_SIGMA": None, "TARGET_ERROR": None})
        assert config.noise_sigma is None and config.target_error is None
        config = config_from_dict({"NOISE_SIGMA": "0.002", "TARGET_ERROR": 0.01})
        assert (config.noise_sigma, config.target_error) == (0.002, 0.01)

    def test_null_not_allowed(self):
        with pytest.raises(ConfigError, match="GRASP_OFFSET"):
            config_from_dict({"GRASP_OFFSET": None})

    @pytest.mark.parametrize("raw, expected", [(True, True), ("false", False), ("YES", True), ("0", False)])
    def test_booleans(self, raw, expected):
        assert config_from_dict({"LOOP_ONLINE": raw}).loop_online is expected

    def test_bad_boolean(self):
        with pytest.raises(ConfigError):
            config_from_dict({"LOOP_ONLINE": "maybe"})

    def test_integers(self):
        assert config_from_dict({"GRASP_TARGET": "7"}).grasp_target == 7
        assert config_from_dict({"GRASP_TARGET": 7.0}).grasp_target == 7
        with pytest.raises(ConfigError):
            config_from_dict({"GRASP_TARGET": 7.5})
        with pytest.raises(ConfigError):
            config_from_dict({"GRASP_TARGET": "many"})

    def test_seed_list(self):
        assert config_from_dict({"LOOP_SEEDS": ["3", 4]}).loop_seeds == [3, 4]
        with pytest.raises(ConfigError):
            config_from_dict({"LOOP_SEEDS": 3})


class TestDerivedConfigs:
    def test_limits_in_radians(self):
        limits = RunConfig().limits()
        assert limits.thumb_splay == pytest.approx((math.radians(-25.0), math.radians(45.0)))
        assert limits.bend_mcp[1] == pytest.approx(math.pi / 2)

    def test_synth_intrinsics(self):
        intrinsics = config_from_dict({"IMAGE_WIDTH": 320}).synth_config().intrinsics
        assert (intrinsics.fx, intrinsics.cx, intrinsics.cy) == (245.0, 160.0, 112.0)

    def test_loop_difficulty_location(self):
        loop = RunConfig().loop_config()
        assert math.exp(loop.difficulty_mu) == pytest.approx(0.02)
        assert loop.viewpoint_grid == (4, 8)

    def test_threads_reach_workers(self):
        config = config_from_dict({"THREADS": 6})
        assert config.grasp_config().threads == 6
        assert config.loop_config().threads == 6

    def test_to_dict_round_trip(self):
        assert config_from_dict(RunConfig().to_dict()) == RunConfig()


class TestFlagOverrides:
    def test_unset_flags_keep_file_values(self):
        base = config_from_dict({"GRASP_TARGET": 12})
        assert apply_flag_overrides(base, parse_flags([])) == base

    def test_flags_override(self):
        args = parse_flags(["--grasp-offset", "0.1", "--loop-online", "false", "--loop-seeds", "5", "6",
                            "--seed", "9", "--threads", "2"])
        config = apply_flag_overrides(RunConfig(), args)
        assert config.grasp_offset == 0.1
        assert config.loop_online is False
        assert config.loop_seeds == [5, 6]
        assert (config.seed, config.threads) == (9, 2)

    def test_bad_flag_value(self):
        with pytest.raises(ConfigError):
            apply_flag_overrides(RunConfig(), parse_flags(["--grasp-target", "lots"]))
