import pytest

from actproj.config import ExperimentConfig
from actproj.numerics import ValidationError


def test_defaults_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "c.cfg")
    assert ExperimentConfig.load(tmp_path / "c.cfg") == cfg
    assert cfg.thresholds == (0.97, 0.98, 0.99, 0.995, 1.0)
    assert (cfg.lr, cfg.epochs, cfg.calibration_size) == (1e-3, 3, 512)


def test_text_parsing_and_coercion():
    cfg = ExperimentConfig.from_text("# comment\nseed = 7\nthresholds = 0.9, 1\nstrict_recompute = yes\nbudget_bits = 1e6\n")
    assert cfg.seed == 7 and cfg.thresholds == (0.9, 1.0)
    assert cfg.strict_recompute is True and cfg.budget_bits == 1_000_000


@pytest.mark.parametrize("text", [
    "colour = blue\n",
    "seed = many\n",
    "policy = random\n",
    "thresholds = 0.5, 1.5\n",
    "epochs = -1\n",
    "dataset = cifar10\n",
    "strict_recompute = maybe\n",
    "seed 3\n",
])
def test_invalid_configs(text):
    with pytest.raises(ValidationError):
        ExperimentConfig.from_text(text)


def test_digest_ignores_output_dir_only():
    a = ExperimentConfig()
    assert a.digest() == a.updated(output_dir="/elsewhere").digest()
    assert a.digest() != a.updated(seed=1).digest()
    assert a.updated(output_dir="x").run_dir().parent.name == "x"


def test_policy_settings_share_a_run_directory():
    a = ExperimentConfig()
    assert a.run_dir() == a.updated(policy="greedy", budget_bits=5, strict_recompute=True).run_dir()
    assert a.run_dir() != a.updated(lr=1e-4).run_dir()
