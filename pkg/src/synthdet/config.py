"""Declarative run configuration: one document covering world, networks,
training, and adaptation, with documented defaults, strict key checking,
dotted-path overrides, and a content hash stamped into every artifact."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

from .adaptation import ClassifierConfig, ScaleSearchConfig
from .critics import CriticConfig, paper_critic_config
from .detector import DetectorConfig
from .synthnet import SynthConfig, VolumeSpec
from .toyworld import WorldConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    data_root: str = ""  # empty resolves to $SSOD_DATA_ROOT or ./data
    n_source: int = 400
    n_target: int = 300
    n_target_val: int = 120
    n_background: int = 200
    source_split: str = "source_train"
    target_split: str = "target_train"
    val_split: str = "target_val"
    background_split: str = "source_bg"


@dataclass
class RunConfig:
    preset: str = "toy64"
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    scale_search: ScaleSearchConfig = field(default_factory=ScaleSearchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    depth_ranges: tuple[tuple[float, float], ...] = (
        (4.0, 5.2), (5.2, 6.4), (6.4, 7.6),
    )

    def validate(self) -> None:
        sizes = {
            "world": self.world.image_size,
            "synth": self.synth.image_size,
            "critic": self.critic.image_size,
            "detector": self.detector.image_size,
            "classifier": self.classifier.image_size,
        }
        if len(set(sizes.values())) != 1:
            raise ValueError(f"inconsistent image sizes across modules: {sizes}")
        if self.synth.k_max < self.world.k_max:
            raise ValueError("synthesizer k_max below the world's object count cap")


def toy64_config(seed: int = 0) -> RunConfig:
    """Desk-scale preset: 64x64 world with thinned network widths and
    one-tenth-scale iteration budgets."""
    config = RunConfig(
        preset="toy64",
        seed=seed,
        synth=SynthConfig(
            code_channels_fg=32,
            code_channels_bg=16,
            branch_channels=(16, 12),
            project_channels=48,
            decoder_channels=(24, 12),
        ),
        critic=CriticConfig(
            scene_channels=(12, 24, 48, 96),
            patch_channels=(8, 12, 16, 24, 32),
        ),
        detector=DetectorConfig(
            backbone_channels=(12, 24, 48),
            head_channels=48,
        ),
        train=TrainConfig(
            learning_rate=2e-4,
            batch_size=8,
            synth_epochs=20,
            detector_train_images=1000,
            detector_epochs=10,
            coupled_iterations=2500,
        ),
    )
    config.validate()
    return config


def paper256_config(seed: int = 0) -> RunConfig:
    """Full-scale preset mirroring the reference architecture and schedule;
    impractical on a CPU, documented for completeness."""
    world = WorldConfig(image_size=256)
    config = RunConfig(
        preset="paper256",
        seed=seed,
        world=world,
        synth=SynthConfig(
            image_size=256,
            decoder_channels=(128, 64, 32, 16),
            volume=VolumeSpec(),
        ),
        critic=paper_critic_config(),
        detector=DetectorConfig(
            image_size=256,
            anchor_scales=(56.0, 84.0, 128.0),
        ),
        classifier=ClassifierConfig(image_size=256, channels=(8, 16, 32, 64)),
        train=TrainConfig(),
    )
    config.validate()
    return config


PRESETS = {"toy64": toy64_config, "paper256": paper256_config}


def _coerce(value: Any, annotation: Any) -> Any:
    origin = get_origin(annotation)
    if dataclasses.is_dataclass(annotation):
        return _from_dict(annotation, value)
    if origin in (Union, types.UnionType):
        args = [a for a in get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0])
    if origin is tuple:
        args = get_args(annotation)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0]) for v in value)
        if len(args) != len(value):
            raise ValueError(f"expected {len(args)} items, got {value!r}")
        return tuple(_coerce(v, a) for v, a in zip(value, args))
    if annotation is float:
        return float(value)
    if annotation is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected integer, got {value!r}")
        return int(value)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ValueError(f"expected bool, got {value!r}")
        return value
    if annotation is str:
        return str(value)
    return value


def _from_dict(cls: type, data: Any) -> Any:
    if not isinstance(data, dict):
        raise ValueError(f"expected mapping for {cls.__name__}, got {data!r}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(
            f"unknown config keys for {cls.__name__}: {sorted(unknown)}"
        )
    kwargs = {key: _coerce(value, hints[key]) for key, value in data.items()}
    return cls(**kwargs)


def _merge_into(config: Any, data: dict) -> Any:
    """Replace fields of a dataclass tree with values from a partial dict."""
    hints = get_type_hints(type(config))
    names = {f.name for f in dataclasses.fields(config)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(
            f"unknown config keys for {type(config).__name__}: {sorted(unknown)}"
        )
    updates = {}
    for key, value in data.items():
        current = getattr(config, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            updates[key] = _merge_into(current, value)
        else:
            updates[key] = _coerce(value, hints[key])
    return dataclasses.replace(config, **updates)


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def load_config(
    path: Path | str | None = None,
    preset: str | None = None,
    overrides: dict[str, Any] | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Resolve a run configuration: preset defaults, then the (partial)
    config file, then dotted-key overrides, then the seed flag."""
    file_data: dict = {}
    if path is not None:
        file_data = json.loads(Path(path).read_text())
        if not isinstance(file_data, dict):
            raise ValueError("config file must hold a JSON object")
    preset_name = preset or file_data.get("preset", "toy64")
    if preset_name not in PRESETS:
        raise ValueError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    config = PRESETS[preset_name]()
    if file_data:
        config = _merge_into(config, file_data)
    for key, value in (overrides or {}).items():
        config = apply_override(config, key, value)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    config.validate()
    return config


def apply_override(config: RunConfig, dotted_key: str, value: Any) -> RunConfig:
    """Set one field by dotted path, e.g. train.batch_size=8."""
    parts = dotted_key.split(".")
    node: dict = {}
    leaf = node
    for part in parts[:-1]:
        leaf[part] = {}
        leaf = leaf[part]
    leaf[parts[-1]] = value
    return _merge_into(config, node)


def parse_override_value(raw: str) -> Any:
    """Interpret an override string as JSON when possible, else as a string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def save_config(config: RunConfig, path: Path | str) -> str:
    """Write the resolved config with its hash; returns the hash."""
    digest = config_hash(config)
    payload = {"config_hash": digest, "config": config_to_dict(config)}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))
    return digest
