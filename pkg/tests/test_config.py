import pytest

from gcascade.config import (RunConfig, known_keys, parse_config,
                             read_config, serialize_config, write_config)


def test_defaults_round_trip():
    cfg = RunConfig()
    again = parse_config(serialize_config(cfg))
    assert again == cfg


def test_non_default_round_trip():
    cfg = RunConfig()
    cfg.decoder.variant = "gin"
    cfg.decoder.stage_channels = (64, 40, 16, 8)
    cfg.decoder.head_weights = (0.5, 1.0, 1.5, 2.0)
    cfg.decoder.use_spa = False
    cfg.loss.mutation = False
    cfg.optim.lr = 4e-3
    cfg.train.epochs = 7
    cfg.set_key("seed", "3")
    cfg.set_key("classes", "5")
    again = parse_config(serialize_config(cfg))
    assert again == cfg


def test_shared_keys_set_every_owner():
    cfg = RunConfig().set_key("classes", "4").set_key("seed", "9")
    assert cfg.decoder.classes == 4 and cfg.synth.classes == 4
    assert cfg.train.seed == 9 and cfg.synth.seed == 9


def test_parse_tolerates_comments_and_spacing():
    cfg = parse_config("\n# comment\n  k=7\nvariant =  sage \n\n")
    assert cfg.decoder.k == 7
    assert cfg.decoder.variant == "sage"


def test_boolean_spellings():
    for text, want in [("on", True), ("off", False), ("true", True),
                       ("0", False), ("YES", True)]:
        assert parse_config("mutation = %s" % text).loss.mutation is want
    with pytest.raises(ValueError):
        parse_config("mutation = maybe")


def test_tuple_values():
    cfg = parse_config("reductions = 1, 1, 4, 2\nhead_weights = (1.0,2.0,3.0,4.0)")
    assert cfg.decoder.reductions == (1, 1, 4, 2)
    assert cfg.decoder.head_weights == (1.0, 2.0, 3.0, 4.0)


def test_unknown_key_and_bad_line_name_the_line():
    with pytest.raises(ValueError, match="line 2.*bogus"):
        parse_config("k = 9\nbogus = 1")
    with pytest.raises(ValueError, match="line 1"):
        parse_config("no equals sign here")


def test_known_keys_cover_all_sections():
    keys = known_keys()
    assert len(keys) == len(set(keys))
    for name in ("classes", "variant", "kind", "lr", "epochs", "size"):
        assert name in keys


def test_file_round_trip(tmp_path):
    cfg = RunConfig().set_key("k", "5").set_key("epochs", "3")
    path = tmp_path / "run.cfg"
    write_config(cfg, path)
    assert read_config(path) == cfg


def test_validate_delegates():
    cfg = parse_config("k = 0")
    with pytest.raises(ValueError):
        cfg.validate()
    assert RunConfig().validate() is not None
