import dataclasses

import pytest

from dgc import config as cfgmod
from dgc.config import ConfigFileError, RunConfig, format_config, load_config, parse_config_text


def test_defaults_follow_reference_hyperparameters():
    t = RunConfig().train
    assert (t.lr, t.beta1, t.beta2, t.adam_eps, t.weight_decay) == (1e-5, 0.9, 0.999, 1e-8, 0.0)
    assert t.batch_size == 16 and t.epochs == 10
    paper = cfgmod.paper_preset()
    assert paper.train.model.latent_dim == 1024
    assert (paper.train.preprocess.resize, paper.train.preprocess.crop) == (256, 224)


def test_round_trip_through_text(tmp_path):
    cfg = cfgmod.desk_preset()
    cfg = dataclasses.replace(cfg, n_train=123, eval_noise_std=0.2)
    f = tmp_path / "run.cfg"
    f.write_text(format_config(cfg))
    assert load_config(f) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigFileError, match="unknown key 'learning_rate'"):
        parse_config_text("learning_rate = 0.1\n")


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigFileError, match="duplicate"):
        parse_config_text("lr = 1\nlr = 2\n")
    with pytest.raises(ConfigFileError, match=":1:"):
        parse_config_text("just words\n")


def test_bad_value_reports_key():
    with pytest.raises(ConfigFileError, match="epochs"):
        cfgmod.apply_items(RunConfig(), {"epochs": "ten"})


def test_partial_file_keeps_defaults():
    cfg = cfgmod.apply_items(cfgmod.desk_preset(), parse_config_text("# comment\nepochs = 3\nencoder_widths = 4,8\n"))
    assert cfg.train.epochs == 3
    assert cfg.train.model.encoder.widths == (4, 8)
    assert cfg.train.lr == cfgmod.desk_preset().train.lr


def test_label_count_drives_generator():
    cfg = cfgmod.apply_items(RunConfig(), {"n_labels": "3"})
    assert cfg.synthetic.n_labels == 3 and len(cfg.synthetic.prevalence) == 3
    cfg = cfgmod.apply_items(RunConfig(), {"prevalence": "0.2"})
    assert cfg.synthetic.prevalence == (0.2,) * 14


def test_optional_values():
    cfg = cfgmod.apply_items(RunConfig(), {"patience": "none", "resize": "none", "crop": "28"})
    assert cfg.train.patience is None and cfg.train.preprocess.resize is None
    assert cfg.train.preprocess.crop == 28
