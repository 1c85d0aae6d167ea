import pytest

from protfuse.config import DEFAULTS, RunConfig, load_config, parse_overrides
from protfuse.config import parse_text
from protfuse.errors import ConfigError


def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    assert parse_text(cfg.dump()) == cfg


def test_overridden_values_round_trip():
    cfg = RunConfig().with_overrides([("ot.epsilon", "0.01"), ("run.seeds", "3,4"),
                                      ("eval.variant", "concat"), ("finetune.train_encoder", "no"),
                                      ("pretrain.fanout_ppi", "5, 1")])
    assert cfg["ot"]["epsilon"] == 0.01 and cfg["run"]["seeds"] == [3, 4]
    assert cfg["finetune"]["train_encoder"] is False and cfg["pretrain"]["fanout_ppi"] == [5, 1]
    assert parse_text(cfg.dump()) == cfg


def test_sections_dotted_keys_and_comments():
    text = """
    # leading comment
    ot.epsilon = 0.5     # dotted key before any section
    [model]
    d_h = 16
    data.n_terms = 12    # dotted key inside a section names its own section
    """
    cfg = parse_text(text)
    assert cfg["ot"]["epsilon"] == 0.5 and cfg["model"]["d_h"] == 16 and cfg["data"]["n_terms"] == 12


@pytest.mark.parametrize("text", [
    "[ot]\nepsilonn = 1\n",
    "[nope]\nx = 1\n",
    "d_h = 4\n",
    "[model]\nd_h = four\n",
    "[eval]\nvariant = best\n",
    "[model]\njust words\n",
    "[bench]\nrepeats = 9\n",
    "[run]\nseeds =\n",
    "[model]\nd_model = 30\nn_heads = 4\n",
    "[pretrain]\nfanout_go = 1\n",
    "[data]\nsource = files\n",
])
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_digest_tracks_only_named_sections():
    base = RunConfig()
    other = base.with_overrides([("finetune.lr", "0.5")])
    assert base.digest(["data", "ot"]) == other.digest(["data", "ot"])
    assert base.digest(["finetune"]) != other.digest(["finetune"])
    assert base.digest(["data"], extra="seed=1") != base.digest(["data"], extra="seed=2")


def test_load_config_layers(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[model]\nd_h = 16\n[ot]\nepsilon = 0.25\n")
    cfg = load_config(path, parse_overrides(["model.d_h=8"]))
    assert cfg["model"]["d_h"] == 8 and cfg["ot"]["epsilon"] == 0.25
    assert load_config() == RunConfig()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        parse_overrides(["model.d_h"])


def test_every_default_has_a_parseable_text_form():
    cfg = RunConfig()
    for section, keys in DEFAULTS.items():
        for key in keys:
            assert cfg.get(f"{section}.{key}") == keys[key]
