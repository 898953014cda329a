import pytest

from sgcl.config import ConfigError, ExperimentConfig, load_config, parse_config_text


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.encoder.d == 32 and cfg.encoder.layers == 1 and cfg.encoder.max_len == 10
    assert cfg.train.batch_size == 100 and cfg.train.lr == 1e-3 and cfg.train.l2 == 1e-5
    assert cfg.loss.lam == 0.7 and cfg.augment.n_methods == 2 and cfg.synonym_k == 0.75
    assert cfg.train.epochs == 10


def test_parse_with_aliases_and_comments():
    cfg = parse_config_text("d = 16\nlambda = 0.5  # weight\nM = 3\nk = 0.5\nglobal_context = off\npool = crop, mask, change\n")
    assert cfg.encoder.d == 16 and cfg.loss.lam == 0.5 and cfg.augment.n_methods == 3
    assert cfg.synonym_k == 0.5 and cfg.global_context is False
    assert cfg.augment.pool == ("crop", "mask", "change")


def test_max_len_reaches_encoder_and_augment():
    cfg = ExperimentConfig().with_values({"max_len": 7})
    assert cfg.encoder.max_len == cfg.augment.max_len == 7


def test_text_round_trip():
    cfg = parse_config_text("d = 12\nlambda = 0.25\nseed = 4\npool = change,inject\nn_methods = 1\n")
    assert parse_config_text(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text",
    ["bogus = 1\n", "d = abc\n", "d = 1\n", "global_context = maybe\n", "no equals sign here\n", "n_methods = 9\n"],
)
def test_bad_config_raises(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_with_seed():
    assert ExperimentConfig().with_seed(9).train.seed == 9
