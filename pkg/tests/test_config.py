import pytest

from routedrive.config import DEFAULT_TEXT, RunConfig, load_config, parse_config
from routedrive.errors import ConfigError


def test_default_text_parses_to_defaults():
    assert parse_config(DEFAULT_TEXT) == RunConfig()
    assert load_config(None) == RunConfig()


def test_empty_and_comment_lines():
    assert parse_config("\n# nothing\n   \n") == RunConfig()


def test_values_are_applied(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("d = 16  # small\nheads = 2\nepochs = 1, 2, 3\nlambda-smooth = 0.5\nfreeze-attn-stage2 = yes\n")
    cfg = load_config(path)
    assert cfg.model.d == 16 and cfg.model.heads == 2
    assert cfg.train.epochs == (1, 2, 3)
    assert cfg.train.weights.smooth == 0.5 and cfg.train.weights.path == 1.0
    assert cfg.train.freeze_attn_stage2 is True


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match="line 3.*'dropout'"):
        parse_config("d = 64\n\ndropout = 0.1\n")


@pytest.mark.parametrize("text,match", [
    ("d = sixty", "integer"),
    ("lr = fast", "number"),
    ("freeze-attn-stage2 = maybe", "true/false"),
    ("epochs = 1, 2", "three"),
    ("variant = huge", "variant"),
    ("just words", "key = value"),
])
def test_bad_values(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_with_variant():
    cfg = RunConfig().with_variant("single-expert")
    assert cfg.model.variant == "single-expert" and cfg.train == RunConfig().train
