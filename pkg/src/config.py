#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Run configuration: defaults, scenario presets, YAML parsing and the config echo.

Layering, lowest to highest precedence:
    built-in defaults -> YAML file -> preset deltas -> --set overrides

Usage:
    cfg = parse_config("configs/desk.yaml", preset="full_defense", overrides=["training.rounds=50"])
    write_config_echo(cfg, run_dir / "config.yaml")
"""

import copy
import math
import os
import re
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from dotenv import dotenv_values

from detection import ForestConfig
from errors import ConfigError, ConfigFileMissingError
from gan_models import Activation, GanLossConfig, LossKind, MlpSpec, OptimState
from logger_setup import LoggerSetup
from poisoning import DatasetKind
from schema_validator import CONFIG_SCHEMA, JSONSchemaValidator

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("Config")

OUTPUT_ROOT_ENV = "FEDGAN_OUTPUT_ROOT"
AUTO = "auto"

DEFAULTS: Dict[str, Any] = {
    "name": None,
    "scenario": "custom",
    "preset": None,
    "fidelity": "desk",
    "output_root": "runs",
    "data": {
        "kind": "gaussian_ring",
        "n_per_client": 2000,
        "n_modes": 8,
        "radius": 2.0,
        "sigma": 0.05,
        "marker_dims": 1,
        "image_size": 16,
        "reference_size": 2000,
        "seed": 0,
    },
    "trigger": {
        "size": AUTO,
        "seed": 7,
        "poison_fraction": 1.0,
        "marker_value": 1.0,
    },
    "model": {
        "z_dim": 16,
        "g_hidden": [64, 64],
        "d_hidden": [64, 64],
        "activation": "tanh",
        "standardize": False,
        "init_seed": 0,
    },
    "training": {
        "n_clients": 4,
        "malicious_ids": [],
        "rounds": 300,
        "local_steps": None,
        "batch_size": 64,
        "loss": "vanilla_nonsaturating",
        "gp_lambda": None,
        "d_lr": None,
        "g_lr": None,
        "d_steps": None,
        "anchor_wgan_loss": True,
        "by_loss": {},
        "report_loss": "mean",
        "eval_every": 25,
        "eval_samples": 2048,
        "workers": 1,
        "seed": 0,
    },
    "detection": {
        "enabled": False,
        "warmup": 10,
        "decay": 0.9,
        "decay_mode": "compound",
        "n_trees": 100,
        "subsample": None,
        "threshold": 0.6,
        "seed": 0,
    },
}


# ---------------------------------------------------------------------------
# 2) Scenario presets
# ---------------------------------------------------------------------------
class ScenarioPreset(str, Enum):
    VANILLA = "vanilla"
    ATTACK = "attack"
    GLOBAL_DEFENSE = "global_defense"
    LOCAL_DEFENSE = "local_defense"
    FULL_DEFENSE = "full_defense"

    @property
    def attacked(self) -> bool:
        return self is not ScenarioPreset.VANILLA

    @property
    def detection(self) -> bool:
        return self in (ScenarioPreset.GLOBAL_DEFENSE, ScenarioPreset.FULL_DEFENSE)

    @property
    def loss(self) -> LossKind:
        if self in (ScenarioPreset.LOCAL_DEFENSE, ScenarioPreset.FULL_DEFENSE):
            return LossKind.WGAN_GP
        return LossKind.VANILLA_NONSATURATING

    def deltas(self, doc: Dict[str, Any]) -> Dict[str, Any]:
        """Config changes this scenario implies, as a nested dict to merge."""
        training: Dict[str, Any] = {"loss": self.loss.value}
        if not self.attacked:
            training["malicious_ids"] = []
        elif not doc["training"].get("malicious_ids"):
            training["malicious_ids"] = AUTO
        return {
            "scenario": self.value,
            "training": training,
            "detection": {"enabled": self.detection},
        }


def deep_merge(base: Dict[str, Any], delta: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in delta.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigLoader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-3``) as floats."""


ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def load_yaml_text(text: str) -> Any:
    return yaml.load(text, Loader=ConfigLoader)


def apply_override(doc: Dict[str, Any], assignment: str) -> Dict[str, Any]:
    """``key.path=value`` with the value parsed as a YAML scalar or list."""
    if "=" not in assignment:
        raise ConfigError([(assignment, "override must look like key.path=value")])
    path, raw = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError([(assignment, "override has an empty key path")])
    try:
        value = load_yaml_text(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError([(path.strip(), f"value is not valid YAML: {e}")]) from e
    delta: Dict[str, Any] = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        delta = {key: delta}
    return deep_merge(doc, delta)


# ---------------------------------------------------------------------------
# 3) Typed configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DataConfig:
    kind: DatasetKind
    n_per_client: int
    n_modes: int
    radius: float
    sigma: float
    marker_dims: int
    image_size: int
    reference_size: int
    seed: int

    @property
    def data_dim(self) -> int:
        if self.kind is DatasetKind.TINY_IMAGES:
            return self.image_size * self.image_size
        return 2 + self.marker_dims


@dataclass(frozen=True)
class TriggerConfig:
    size: int
    seed: int
    poison_fraction: float
    marker_value: Optional[float]


@dataclass(frozen=True)
class ModelConfig:
    z_dim: int
    g_hidden: Tuple[int, ...]
    d_hidden: Tuple[int, ...]
    activation: Activation
    standardize: bool
    init_seed: int


@dataclass(frozen=True)
class TrainingConfig:
    n_clients: int
    malicious_ids: Tuple[int, ...]
    rounds: int
    local_steps: int
    batch_size: int
    loss: LossKind
    gp_lambda: float
    d_lr: float
    g_lr: float
    d_steps: int
    anchor_wgan_loss: bool
    by_loss: Dict[str, Dict[str, Any]]
    report_loss: str
    eval_every: int
    eval_samples: int
    workers: int
    seed: int

    @property
    def alpha(self) -> float:
        return len(self.malicious_ids) / self.n_clients


@dataclass(frozen=True)
class DetectionConfig:
    enabled: bool
    warmup: int
    decay: float
    decay_mode: str
    n_trees: int
    subsample: Optional[int]
    threshold: float
    seed: int

    def forest(self, round_index: int) -> ForestConfig:
        """Forest settings for one round; each round grows from its own seed."""
        seed = int(np.random.SeedSequence([self.seed, round_index]).generate_state(1)[0])
        return ForestConfig(self.n_trees, self.subsample, self.threshold, seed)


@dataclass(frozen=True)
class RunConfig:
    name: str
    scenario: str
    fidelity: str
    output_root: str
    data: DataConfig
    trigger: TriggerConfig
    model: ModelConfig
    training: TrainingConfig
    detection: DetectionConfig

    # -- derived model pieces ------------------------------------------------
    @property
    def loss_config(self) -> GanLossConfig:
        return GanLossConfig(self.training.loss, self.training.gp_lambda, self.training.seed)

    def generator_spec(self) -> MlpSpec:
        output = Activation.TANH if self.data.kind is DatasetKind.TINY_IMAGES else Activation.IDENTITY
        sizes = (self.model.z_dim, *self.model.g_hidden, self.data.data_dim)
        return MlpSpec(sizes, self.model.activation, output, self.model.init_seed, self.model.standardize)

    def discriminator_spec(self, client_id: int) -> MlpSpec:
        head = Activation.IDENTITY if self.loss_config.is_wgan else Activation.SIGMOID
        sizes = (self.data.data_dim, *self.model.d_hidden, 1)
        seed = self.model.init_seed + 1 + client_id
        return MlpSpec(sizes, self.model.activation, head, seed, self.model.standardize)

    def optimizer(self, size: int, learning_rate: float) -> OptimState:
        if self.loss_config.is_wgan:
            return OptimState.rmsprop(size, learning_rate)
        return OptimState.adam(size, learning_rate)

    def to_dict(self) -> Dict[str, Any]:
        """Plain, fully-resolved document; parsing it back reproduces this config."""
        doc = _plain(asdict(self))
        doc["preset"] = None
        return doc


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# 4) Invariants and resolution
# ---------------------------------------------------------------------------
# library defaults when neither the run nor training.by_loss names a value
LOSS_FALLBACKS: Dict[str, Dict[str, Any]] = {
    LossKind.WGAN_GP.value: {"d_lr": 5e-5, "g_lr": 5e-5, "d_steps": 1, "gp_lambda": 10.0},
    AUTO: {"d_lr": 2e-4, "g_lr": 2e-4, "d_steps": 1, "gp_lambda": 10.0},
}


def _resolve(doc: Dict[str, Any]) -> Dict[str, Any]:
    """
    Materialize every derived default (malicious ids, K, learning rates, name).

    Unset ``d_lr``, ``g_lr``, ``d_steps`` and ``gp_lambda`` come from
    ``training.by_loss[<loss>]`` first, then from the library fallbacks.
    """
    doc = copy.deepcopy(doc)
    training, data = doc["training"], doc["data"]
    if training["malicious_ids"] == AUTO:
        training["malicious_ids"] = [training["n_clients"] - 1]
    if doc["trigger"]["size"] == AUTO:
        # 2x2 patch on images, one marker coordinate on ring data
        doc["trigger"]["size"] = 2 if data["kind"] == DatasetKind.TINY_IMAGES.value else 1
    if training["local_steps"] is None:
        training["local_steps"] = math.ceil(data["n_per_client"] / training["batch_size"])
    per_loss = training["by_loss"].get(training["loss"], {})
    fallback = LOSS_FALLBACKS.get(training["loss"], LOSS_FALLBACKS[AUTO])
    for key, value in fallback.items():
        if training[key] is None:
            training[key] = per_loss.get(key, value)
    if not doc.get("name"):
        doc["name"] = doc["scenario"]
    return doc


def _invariant_problems(doc: Dict[str, Any]) -> List[Tuple[str, str]]:
    problems: List[Tuple[str, str]] = []
    training, detection, data, trigger = doc["training"], doc["detection"], doc["data"], doc["trigger"]
    n = training["n_clients"]
    malicious = training["malicious_ids"]

    if len(set(malicious)) != len(malicious):
        problems.append(("training.malicious_ids", "client ids must be unique"))
    out_of_range = [i for i in malicious if not 0 <= i < n]
    if out_of_range:
        problems.append(("training.malicious_ids", f"ids {out_of_range} outside [0, {n})"))
    if len(malicious) >= n / 2.0:
        problems.append((
            "training.malicious_ids",
            f"alpha = {len(malicious)}/{n} violates 0 <= alpha < 0.5 (honest majority required)",
        ))
    if detection["enabled"] and n < 2:
        problems.append(("training.n_clients", "detection needs at least 2 clients"))
    # T = 0 is the untrained-generator edge case
    if training["rounds"] > 0 and detection["warmup"] >= training["rounds"]:
        problems.append(("detection.warmup", f"warmup m={detection['warmup']} must be < rounds T={training['rounds']}"))
    if malicious:
        if data["kind"] == DatasetKind.TINY_IMAGES.value and trigger["size"] > data["image_size"]:
            problems.append(("trigger.size", f"{trigger['size']} does not fit {data['image_size']}x{data['image_size']} images"))
        if data["kind"] == DatasetKind.GAUSSIAN_RING.value and trigger["size"] > data["marker_dims"]:
            problems.append(("trigger.size", f"ring trigger spans {trigger['size']} marker dims but data has {data['marker_dims']}"))
    if training["loss"] == LossKind.WGAN_GP.value and training["gp_lambda"] == 0:
        logger.warning("wgan_gp with gp_lambda=0 trains an unconstrained critic")
    return problems


def build_config(doc: Dict[str, Any]) -> RunConfig:
    """Schema-check, resolve and type a merged config document."""
    validator = JSONSchemaValidator()
    validator.validate(doc, CONFIG_SCHEMA)
    doc = _resolve(doc)
    problems = _invariant_problems(doc)
    if problems:
        raise ConfigError(problems)

    data, trigger, model = doc["data"], doc["trigger"], doc["model"]
    training, detection = doc["training"], doc["detection"]
    return RunConfig(
        name=str(doc["name"]),
        scenario=str(doc["scenario"]),
        fidelity=str(doc["fidelity"]),
        output_root=str(doc["output_root"]),
        data=DataConfig(DatasetKind(data["kind"]), **{k: v for k, v in data.items() if k != "kind"}),
        trigger=TriggerConfig(**trigger),
        model=ModelConfig(
            z_dim=model["z_dim"],
            g_hidden=tuple(model["g_hidden"]),
            d_hidden=tuple(model["d_hidden"]),
            activation=Activation(model["activation"]),
            standardize=model["standardize"],
            init_seed=model["init_seed"],
        ),
        training=TrainingConfig(
            **{**training, "malicious_ids": tuple(training["malicious_ids"]), "loss": LossKind(training["loss"])}
        ),
        detection=DetectionConfig(**detection),
    )


def load_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileMissingError(f"Config file '{path}' not found")
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = yaml.load(f, Loader=ConfigLoader)
        except yaml.YAMLError as e:
            raise ConfigError([("<root>", f"not valid YAML: {e}")]) from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    return doc


def compose_document(file_doc: Dict[str, Any], preset: Optional[str] = None,
                     overrides: Sequence[str] = ()) -> Dict[str, Any]:
    doc = deep_merge(DEFAULTS, file_doc)
    preset_name = preset or doc.get("preset")
    if preset_name:
        try:
            chosen = ScenarioPreset(preset_name)
        except ValueError as e:
            names = ", ".join(p.value for p in ScenarioPreset)
            raise ConfigError([("preset", f"unknown preset '{preset_name}' (expected one of {names})")]) from e
        doc = deep_merge(doc, chosen.deltas(doc))
        doc["preset"] = chosen.value
        logger.debug("Applied preset '%s'", chosen.value)
    for assignment in overrides:
        doc = apply_override(doc, assignment)
    return doc


def parse_config(path: Optional[Union[str, Path]], preset: Optional[str] = None,
                 overrides: Sequence[str] = (), env_file: str = ".env") -> RunConfig:
    """
    Load, layer, validate and resolve a run configuration.

    ``path`` may be None to start from the built-in defaults alone.
    Raises ConfigFileMissingError for a missing file and ConfigError (with
    field paths) for schema or invariant violations.
    """
    file_doc = load_yaml(path) if path is not None else {}
    doc = compose_document(file_doc, preset, overrides)
    root = output_root_from_env(env_file)
    if root:
        doc["output_root"] = root
    cfg = build_config(doc)
    logger.info(
        "Config '%s': scenario=%s N=%d malicious=%s T=%d K=%d loss=%s detection=%s",
        cfg.name, cfg.scenario, cfg.training.n_clients, list(cfg.training.malicious_ids),
        cfg.training.rounds, cfg.training.local_steps, cfg.training.loss.value, cfg.detection.enabled,
    )
    return cfg


def output_root_from_env(env_file: str = ".env") -> Optional[str]:
    """FEDGAN_OUTPUT_ROOT from the .env file first, the OS environment second."""
    env_values = dotenv_values(env_file) if env_file and os.path.isfile(env_file) else {}
    value = env_values.get(OUTPUT_ROOT_ENV) or os.getenv(OUTPUT_ROOT_ENV)
    if value:
        logger.debug("Output root overridden by %s=%s", OUTPUT_ROOT_ENV, value)
    return value or None


def write_config_echo(cfg: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
    return path


def read_config_echo(path: Union[str, Path]) -> RunConfig:
    """Rebuild a run's config from its echo without consulting the environment."""
    return build_config(compose_document(load_yaml(path)))


def with_changes(cfg: RunConfig, overrides: Sequence[str] = (), preset: Optional[str] = None) -> RunConfig:
    """Derive a new config from a resolved one (used by sweeps)."""
    doc = cfg.to_dict()
    if preset:
        # re-derive the per-loss settings for the new loss kind
        for key in LOSS_FALLBACKS[AUTO]:
            doc["training"][key] = None
        doc["name"] = None
    return build_config(compose_document(doc, preset, overrides))
