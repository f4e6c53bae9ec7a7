from dataclasses import replace

import pytest

from active_teacher.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config, with_overrides
from active_teacher.ssod import TrainConfig
from active_teacher.toy import ToyConfig


def test_defaults_and_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg
    custom = ExperimentConfig(replace(ToyConfig(), noise=0.2, n_scenes=300), replace(TrainConfig(), k_iterations=3, tau=0.6),
                              (0.05, 0.1, 0.2), n_test=50)
    assert parse_config(dump_config(custom)) == custom


def test_partial_file_uses_defaults():
    cfg = parse_config("[train]\nlambda_unsup = 2.0  ; lambda\n")
    assert cfg.train.lambda_unsup == 2.0 and cfg.train.tau == 0.7 and cfg.data == ToyConfig()


@pytest.mark.parametrize(
    "text",
    [
        "[train]\nbogus = 1\n",
        "[other]\nx = 1\n",
        "[train]\ntau = high\n",
        "[train]\ntau = 1.5\n",
        "[experiment]\nbudget_fractions = 0.1\n",
        "[experiment]\nn_test = 0\n",
        "[experiment]\nfoo = 1\n",
        "not an ini file",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="absent.ini"):
        load_config(tmp_path / "absent.ini")


def test_overrides():
    cfg = with_overrides(ExperimentConfig(), budget_fractions=(0.1, 0.2, 0.3), k_iterations=3, tau=None, ema_alpha=0.99)
    assert cfg.train.k_iterations == 3 and cfg.train.ema_alpha == 0.99 and cfg.train.tau == 0.7
    with pytest.raises(ConfigError):
        with_overrides(ExperimentConfig(), k_iterations=3)
    with pytest.raises(ConfigError):
        with_overrides(ExperimentConfig(), ema_alpha=1.0)
