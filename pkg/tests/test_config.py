from pathlib import Path

import pytest
import yaml

from config import (DEFAULTS, ScenarioPreset, apply_override, build_config, compose_document, load_yaml,
                    output_root_from_env, parse_config, read_config_echo, with_changes, write_config_echo)
from errors import ConfigError, ConfigFileMissingError
from gan_models import Activation, LossKind, OptimKind
from poisoning import DatasetKind


def _write(path, doc):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


# --- defaults and resolution --------------------------------------------------
def test_defaults_resolve():
    cfg = build_config(compose_document({}))
    assert cfg.name == "custom"
    assert cfg.training.malicious_ids == ()
    assert cfg.training.local_steps == 32          # ceil(2000 / 64)
    assert cfg.training.d_lr == cfg.training.g_lr == 2e-4
    assert cfg.trigger.size == 1
    assert cfg.data.data_dim == 3
    assert cfg.generator_spec().output_activation is Activation.IDENTITY
    assert cfg.discriminator_spec(0).output_activation is Activation.SIGMOID


def test_wgan_picks_identity_head_and_rmsprop():
    cfg = build_config(compose_document({}, overrides=["training.loss=wgan_gp"]))
    assert cfg.training.d_lr == 5e-5
    assert cfg.discriminator_spec(1).output_activation is Activation.IDENTITY
    assert cfg.optimizer(10, cfg.training.d_lr).kind is OptimKind.RMSPROP


WGAN_TUNING = {"training": {"by_loss": {"wgan_gp": {"d_lr": 1e-3, "g_lr": 5e-4, "d_steps": 2, "gp_lambda": 1.0}}}}


def _loss_settings(cfg):
    t = cfg.training
    return t.d_lr, t.g_lr, t.d_steps, t.gp_lambda


def test_by_loss_fills_unset_values_for_the_active_loss():
    wgan = build_config(compose_document(WGAN_TUNING, "local_defense", ["training.rounds=20"]))
    vanilla = build_config(compose_document(WGAN_TUNING, "vanilla", ["training.rounds=20"]))
    assert _loss_settings(wgan) == (1e-3, 5e-4, 2, 1.0)
    assert _loss_settings(vanilla) == (2e-4, 2e-4, 1, 10.0)


def test_explicit_training_value_beats_by_loss():
    cfg = build_config(compose_document(WGAN_TUNING, "local_defense", ["training.rounds=20", "training.d_lr=0.01"]))
    assert _loss_settings(cfg) == (0.01, 5e-4, 2, 1.0)


def test_with_changes_rederives_by_loss_for_new_preset():
    base = build_config(compose_document(WGAN_TUNING, "attack", ["training.rounds=20"]))
    assert _loss_settings(base) == (2e-4, 2e-4, 1, 10.0)
    changed = with_changes(base, preset="full_defense")
    assert _loss_settings(changed) == (1e-3, 5e-4, 2, 1.0)
    assert changed.training.anchor_wgan_loss is True


@pytest.mark.parametrize("override", [
    "training.d_steps=0",
    "training.anchor_wgan_loss=maybe",
    "training.by_loss={hinge: {d_lr: 0.1}}",
    "training.by_loss={wgan_gp: {momentum: 0.9}}",
])
def test_training_schedule_schema(override):
    with pytest.raises(ConfigError):
        build_config(compose_document({}, overrides=[override]))


def test_discriminators_get_distinct_init_seeds():
    cfg = build_config(compose_document({}))
    assert cfg.discriminator_spec(0).init_seed != cfg.discriminator_spec(1).init_seed


def test_image_data_defaults():
    cfg = build_config(compose_document({"data": {"kind": "tiny_images", "image_size": 8}}))
    assert cfg.data.kind is DatasetKind.TINY_IMAGES
    assert cfg.data.data_dim == 64
    assert cfg.trigger.size == 2
    assert cfg.generator_spec().output_activation is Activation.TANH


# --- presets ------------------------------------------------------------------
@pytest.mark.parametrize("preset, attacked, detection, loss", [
    ("vanilla", False, False, LossKind.VANILLA_NONSATURATING),
    ("attack", True, False, LossKind.VANILLA_NONSATURATING),
    ("global_defense", True, True, LossKind.VANILLA_NONSATURATING),
    ("local_defense", True, False, LossKind.WGAN_GP),
    ("full_defense", True, True, LossKind.WGAN_GP),
])
def test_preset_composition(preset, attacked, detection, loss):
    cfg = build_config(compose_document({}, preset, ["training.rounds=20"]))
    assert cfg.scenario == preset
    assert bool(cfg.training.malicious_ids) is attacked
    assert cfg.detection.enabled is detection
    assert cfg.training.loss is loss
    if attacked:
        assert cfg.training.malicious_ids == (3,)


def test_preset_keeps_explicit_malicious_ids():
    doc = compose_document({"training": {"n_clients": 5, "malicious_ids": [0, 2]}}, "attack")
    assert build_config(doc).training.malicious_ids == (0, 2)


def test_override_wins_over_preset():
    cfg = build_config(compose_document({}, "full_defense", ["detection.enabled=false", "training.rounds=20"]))
    assert cfg.detection.enabled is False


def test_unknown_preset():
    with pytest.raises(ConfigError) as err:
        compose_document({}, "chaos")
    assert err.value.problems[0][0] == "preset"


def test_preset_properties():
    assert ScenarioPreset.FULL_DEFENSE.detection and ScenarioPreset.FULL_DEFENSE.attacked
    assert not ScenarioPreset.VANILLA.attacked


# --- invariants ---------------------------------------------------------------
def test_half_malicious_is_rejected_with_field_path():
    doc = compose_document({}, overrides=["training.n_clients=4", "training.malicious_ids=[0, 1]"])
    with pytest.raises(ConfigError) as err:
        build_config(doc)
    assert any(path == "training.malicious_ids" and "alpha" in msg for path, msg in err.value.problems)


@pytest.mark.parametrize("ids", ["[10]", "[1, 1]", "[-1]"])
def test_malicious_ids_checks(ids):
    doc = compose_document({}, overrides=["training.n_clients=10", f"training.malicious_ids={ids}"])
    with pytest.raises(ConfigError):
        build_config(doc)


@pytest.mark.parametrize("preset", ["global_defense", "attack", "vanilla"])
def test_warmup_must_precede_last_round(preset):
    doc = compose_document({}, preset, ["training.rounds=5", "detection.warmup=5"])
    with pytest.raises(ConfigError) as err:
        build_config(doc)
    assert err.value.problems[0][0] == "detection.warmup"


def test_zero_rounds_skip_the_warmup_check():
    cfg = build_config(compose_document({}, "global_defense", ["training.rounds=0", "detection.warmup=5"]))
    assert cfg.training.rounds == 0


def test_trigger_must_fit():
    doc = compose_document({}, "attack", ["trigger.size=3", "data.marker_dims=2"])
    with pytest.raises(ConfigError) as err:
        build_config(doc)
    assert err.value.problems[0][0] == "trigger.size"


@pytest.mark.parametrize("override, path", [
    ("detection.decay=1.0", "detection.decay"),
    ("detection.threshold=0.5", "detection.threshold"),
    ("training.batch_size=1", "training.batch_size"),
    ("training.loss=hinge", "training.loss"),
    ("training.colour=red", "training.colour"),
])
def test_schema_problems_carry_field_paths(override, path):
    with pytest.raises(ConfigError) as err:
        build_config(compose_document({}, overrides=[override]))
    assert path in [p for p, _ in err.value.problems]


# --- overrides ----------------------------------------------------------------
def test_apply_override_parses_yaml_values():
    doc = apply_override(DEFAULTS, "model.g_hidden=[8, 8]")
    doc = apply_override(doc, "training.d_lr=1e-3")
    doc = apply_override(doc, "detection.enabled=true")
    assert doc["model"]["g_hidden"] == [8, 8]
    assert doc["training"]["d_lr"] == pytest.approx(1e-3)
    assert doc["detection"]["enabled"] is True
    assert DEFAULTS["model"]["g_hidden"] == [64, 64]


@pytest.mark.parametrize("raw, value", [("1e-3", 0.001), ("5E-4", 0.0005), ("2e2", 200.0), ("-1.5e-2", -0.015)])
def test_exponent_floats_without_a_dot(raw, value):
    doc = apply_override(DEFAULTS, f"training.d_lr={raw}")
    assert isinstance(doc["training"]["d_lr"], float)
    assert doc["training"]["d_lr"] == pytest.approx(value)


def test_config_file_exponent_floats_validate(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("training:\n  d_lr: 1e-3\n  by_loss:\n    wgan_gp: {g_lr: 5e-4}\n", encoding="utf-8")
    doc = load_yaml(path)
    assert doc["training"]["d_lr"] == 0.001
    cfg = build_config(compose_document(doc, "full_defense", ["training.rounds=20"]))
    assert (cfg.training.d_lr, cfg.training.g_lr) == (0.001, 0.0005)


@pytest.mark.parametrize("bad", ["training.rounds", "=5"])
def test_apply_override_rejects_malformed(bad):
    with pytest.raises(ConfigError):
        apply_override(DEFAULTS, bad)


# --- files and environment ----------------------------------------------------
def test_missing_file_is_its_own_error(tmp_path):
    with pytest.raises(ConfigFileMissingError):
        parse_config(tmp_path / "nope.yaml", env_file="")


def test_invalid_yaml_is_a_config_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("training: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigError):
        parse_config(path, env_file="")


def test_parse_config_layers_file_preset_and_overrides(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDGAN_OUTPUT_ROOT", raising=False)
    path = _write(tmp_path / "run.yaml", {"name": "mine", "training": {"rounds": 40, "n_clients": 6}})
    cfg = parse_config(path, "full_defense", ["training.rounds=30"], env_file="")
    assert cfg.name == "mine"
    assert cfg.training.rounds == 30
    assert cfg.training.malicious_ids == (5,)
    assert cfg.training.loss is LossKind.WGAN_GP


def test_output_root_from_dotenv_beats_os_env(tmp_path, monkeypatch):
    env_file = tmp_path / ".env"
    env_file.write_text("FEDGAN_OUTPUT_ROOT=/data/fedgan\n", encoding="utf-8")
    monkeypatch.setenv("FEDGAN_OUTPUT_ROOT", "/elsewhere")
    assert output_root_from_env(str(env_file)) == "/data/fedgan"
    assert output_root_from_env(str(tmp_path / "missing.env")) == "/elsewhere"
    cfg = parse_config(None, env_file=str(env_file))
    assert cfg.output_root == "/data/fedgan"


def test_config_echo_reproduces_config(tmp_path):
    cfg = build_config(compose_document({}, "full_defense", ["training.rounds=20", "model.g_hidden=[16]"]))
    path = write_config_echo(cfg, tmp_path / "config.yaml")
    assert read_config_echo(path) == cfg
    assert yaml.safe_load(path.read_text(encoding="utf-8"))["preset"] is None


def test_with_changes_rederives_for_new_preset():
    base = build_config(compose_document({}, "attack", ["training.rounds=20"]))
    changed = with_changes(base, ["trigger.size=1"], preset="local_defense")
    assert changed.training.loss is LossKind.WGAN_GP
    assert changed.training.d_lr == 5e-5
    assert changed.name == "local_defense"
    assert changed.training.malicious_ids == base.training.malicious_ids


# --- bundled configs ----------------------------------------------------------
CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize("preset", [p.value for p in ScenarioPreset])
def test_bundled_ring_config_parses_with_every_preset(preset, monkeypatch):
    monkeypatch.delenv("FEDGAN_OUTPUT_ROOT", raising=False)
    cfg = parse_config(CONFIG_DIR / "desk.yaml", preset, env_file="")
    assert cfg.scenario == preset and cfg.name == preset
    assert cfg.training.n_clients == 4


def test_bundled_image_config_parses(monkeypatch):
    monkeypatch.delenv("FEDGAN_OUTPUT_ROOT", raising=False)
    cfg = parse_config(CONFIG_DIR / "desk_images.yaml", "full_defense", env_file="")
    assert cfg.data.kind is DatasetKind.TINY_IMAGES
    assert cfg.training.malicious_ids == (3,)
