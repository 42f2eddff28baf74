import dataclasses

import pytest

from attrxvec.config import (VARIANTS, ExperimentConfig, format_config, format_config_section,
                             load_config, parse_config, preset_config, preset_text)
from attrxvec.errors import ConfigError


def test_defaults_are_valid():
    cfg = ExperimentConfig().validate()
    assert cfg.variant == "MT-NSA" and cfg.uses_nsa
    assert cfg.training.epochs == 3 and cfg.training.batch_size == 64
    assert cfg.network.frame_dims == (512, 512, 512, 512, 1536)
    assert cfg.network.cross_stitch_layers == (1, 2)
    assert cfg.network.alpha_init == 0.1 and cfg.eval.p_target == 0.001


def test_parse_types():
    cfg = parse_config("[experiment]\nvariant = x-vector\nseed = 4\nsingle_threaded = no\n"
                       "[network]\nframe_dims = 8, 8, 8, 8, 16\n"
                       "[training]\nschedule = speaker, nsa, nsa\nlr_initial = 2e-3\n")
    assert cfg.experiment.seed == 4 and cfg.experiment.single_threaded is False
    assert not cfg.uses_nsa
    assert cfg.network.frame_dims == (8, 8, 8, 8, 16)
    assert cfg.training.schedule == ("speaker", "nsa", "nsa")
    assert cfg.training.lr_initial == 2e-3


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[corpus]\nspeakers = 3\n",
    "[corpus]\nn_speakers = three\n",
    "[features]\ncmn = maybe\n",
    "[experiment]\nvariant = MT-Magic\n",
    "[experiment]\nvariant = MT-SEN-style\n",
    "[tying]\nlabel_source = external\n",
    "[corpus]\ntrial_policy = everything\n",
    "[network]\nframe_dims = 8, 8\n",
    "[eval]\np_target = 1.5\n",
    "[nsa_corpus]\nalignments = a.txt\n",
    "not an ini file",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_format_round_trip():
    cfg = preset_config("desk")
    again = parse_config(format_config(cfg))
    for section in ("experiment", "corpus", "network", "training", "backend", "eval"):
        assert getattr(again, section) == getattr(cfg, section)
    assert format_config_section(cfg, "tying").startswith("label_source=tree;")


def test_every_variant_is_accepted():
    for variant in VARIANTS:
        extra = "[tying]\nlabel_source = external\nexternal_labels = l.txt\n" \
            if variant == "MT-SEN-style" else ""
        assert parse_config(f"[experiment]\nvariant = {variant}\n{extra}").variant == variant


def test_load_config_sets_base_dir(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[corpus]\nmanifest = data/m.txt\n")
    cfg = load_config(path)
    assert cfg.resolve(cfg.corpus.manifest) == tmp_path / "data" / "m.txt"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_presets():
    assert "[network]" in preset_text("desk")
    cfg = preset_config("desk")
    assert cfg.tying.target_leaves == 80
    with pytest.raises(ConfigError):
        preset_text("nonexistent")
