import pytest

from stalign.config import RunConfig, describe_defaults, from_text, load_config, to_text
from stalign.errors import ConfigError

from conftest import tiny_config


@pytest.mark.parametrize("cfg", [RunConfig(), tiny_config(7, use_lns=False, seed=3)])
def test_serialize_parse_is_a_fixpoint(cfg):
    text = to_text(cfg)
    again = from_text(text)
    assert again == cfg
    assert to_text(again) == text


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n[train]\nsteps = 12\nuse_abfn = off\n\n[data]\ngrid_side = 5\nniche_k = 2\n")
    cfg = load_config(path)
    assert cfg.train.steps == 12 and cfg.train.use_abfn is False
    assert cfg.data.synthetic.grid_side == 5 and cfg.data.niche_k == 2
    assert cfg.model == RunConfig().model


def test_tuple_fields_parse():
    cfg = from_text("[model]\nimg_channels = 4, 8\n[eval]\ntarget_genes = gene_001,gene_002\n")
    assert cfg.model.img_channels == (4, 8)
    assert cfg.eval.target_genes == ("gene_001", "gene_002")


@pytest.mark.parametrize("text,match", [
    ("[train]\nstep = 3\n", "unknown key 'step'"),
    ("[training]\nsteps = 3\n", "unknown config section"),
    ("[train]\nsteps = many\n", "cannot parse"),
    ("[train]\nuse_lns = maybe\n", "cannot parse"),
    ("steps = 3\n", "malformed"),
])
def test_bad_config_text(text, match):
    with pytest.raises(ConfigError, match=match):
        from_text(text)


def test_validation_catches_inconsistent_values():
    cfg = from_text("[abfn]\ntokens = 3\n")
    with pytest.raises(ConfigError, match="embed_dim"):
        cfg.validate()
    with pytest.raises(ConfigError, match="wd_start"):
        from_text("[train]\nwd_start = 0.5\n").validate()


def test_defaults_listing_names_every_key():
    listing = describe_defaults()
    for line in to_text(RunConfig()).splitlines():
        assert line in listing
    assert "lr_peak = 0.0005" in listing
