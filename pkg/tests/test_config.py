import pytest

from ticketgan.config import KEYS, ConfigError, ExperimentConfig, parse_config


def test_empty_file_defaults():
    cfg = parse_config("")
    assert cfg["prune.rho"] == 0.2
    adv = cfg.adv_config()
    assert (adv.steps, adv.step_size, adv.lambda_g, adv.lambda_d) == (1, 0.01, 1.0, 1.0)
    spec = cfg.model_spec()
    assert spec.g_split == 1 and spec.d_split == spec.n_layers - 1
    assert cfg["prune.epochs_per_round"] == 10


def test_rho_constraint_names_key_and_line():
    with pytest.raises(ConfigError) as err:
        parse_config("# comment\nprune.rho = 1.5\n")
    assert err.value.key == "prune.rho" and err.value.line == 2
    assert "(0,1)" in str(err.value)


def test_zero_steps_degrades_to_vanilla():
    adv = parse_config("advaug.steps = 0").adv_config()
    assert not adv.active_g and not adv.active_d


@pytest.mark.parametrize("text,key", [
    ("bogus.key = 1", "bogus.key"),
    ("train.batch_size = many", "train.batch_size"),
    ("train.loss = wasserstein", "train.loss"),
    ("advaug.targets = everything", "advaug.targets"),
    ("model.g_split = 9", "model.g_split"),
    ("train.masks_g = /no/such/file.tkm", "train.masks_g"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.key == key


def test_duplicate_key():
    with pytest.raises(ConfigError) as err:
        parse_config("seed = 1\nseed = 2\n")
    assert err.value.line == 2


def test_missing_equals():
    with pytest.raises(ConfigError):
        parse_config("seed 1")


def test_overrides_and_env(monkeypatch):
    cfg = parse_config("seed = 1\n", overrides=["seed=4", "train.lr_g = 0.001"])
    assert cfg["seed"] == 4 and cfg["train.lr_g"] == 0.001
    monkeypatch.setenv("TICKETGAN_SEED", "11")
    assert parse_config("seed = 1\n", overrides=["seed=4"])["seed"] == 11


def test_hash_tracks_training_keys_only():
    a = parse_config("")
    assert a.hash() == parse_config("out = elsewhere\nmetrics.samples = 10").hash()
    assert a.hash() != parse_config("train.lr_d = 0.001").hash()


def test_text_round_trip():
    cfg = parse_config("seed = 3\naug.policy = color,translation\nadvaug.eps = 0.05\n")
    again = parse_config(cfg.to_text())
    assert again.values == cfg.values and again.hash() == cfg.hash()


def test_iteration_doubling():
    assert parse_config("train.iterations = 10").total_iterations() == 10
    assert parse_config("train.iterations = 10\naug.policy = translation").total_iterations() == 20
    assert parse_config("train.iterations = 10\naug.policy = translation\naug.double_iterations = false"
                        ).total_iterations() == 10


def test_every_key_has_a_parseable_default():
    cfg = ExperimentConfig()
    assert set(cfg.values) == {k.name for k in KEYS}
