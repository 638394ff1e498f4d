"""Configuration dataclasses and the flat key-value config file format.

The config file is plain text, one ``section.field = value`` per line,
``#`` comments allowed.  Every field of ModelConfig, TrainConfig and
SceneConfig is addressable; unknown keys are errors.  The same serializer
produces the config echo embedded in checkpoints, which records (among
other things) the PRNG family used for data generation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Network hyperparameters; defaults follow the full-scale recipe."""

    num_classes: int = 19
    embed_width: int = 256          # E: shared embedding width, concat is 4E
    global_stride: int = 16         # S: global grid is (H/S, W/S)
    width_factor: float = 1.0       # scales backbone widths 256/512/1024/2048
    reduction_ratio: int = 16       # channel-attention bottleneck ratio
    gn_group_1: int = 32            # group-norm groups of decoder stages 1..3
    gn_group_2: int = 16
    gn_group_3: int = 8
    backbone_groups: int = 8
    dropout: float = 0.1
    input_size: int = 1024
    provider: str = "frozen_random"  # or "files"
    provider_seed: int = 7
    provider_dir: str = ""
    init_seed: int = 0

    @property
    def backbone_channels(self):
        return tuple(int(round(c * self.width_factor)) for c in (256, 512, 1024, 2048))

    @property
    def decoder_widths(self):
        e = self.embed_width
        return ((4 * e, e), (e, e // 2), (e // 2, e // 4))

    @property
    def gn_groups(self):
        return (self.gn_group_1, self.gn_group_2, self.gn_group_3)

    @property
    def grid_size(self):
        return self.input_size // self.global_stride

    def validate(self):
        e = self.embed_width
        if self.input_size % 32 != 0:
            raise ConfigError("input_size must be divisible by 32")
        if self.input_size % self.global_stride != 0:
            raise ConfigError("global_stride must divide input_size")
        if e % 4 != 0:
            raise ConfigError("embed_width must be divisible by 4")
        if e % self.reduction_ratio != 0:
            raise ConfigError("reduction_ratio must divide embed_width")
        for (cin, cout), groups in zip(self.decoder_widths, self.gn_groups):
            if cout % groups != 0:
                raise ConfigError(
                    f"decoder width {cout} not divisible by its {groups} groups")
        for c in self.backbone_channels:
            if c <= 0 or c % self.backbone_groups != 0:
                raise ConfigError(
                    f"backbone channels {self.backbone_channels} must be positive "
                    f"multiples of {self.backbone_groups}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.provider not in ("frozen_random", "files"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        return self

    @classmethod
    def desk(cls, **overrides):
        """Desk-scale preset: 128x128 inputs, 6 classes, E=32."""
        base = dict(num_classes=6, embed_width=32, width_factor=0.125,
                    input_size=128)
        base.update(overrides)
        return cls(**base).validate()


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    base_lr: float = 2e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    backbone_lr_mult: float = 0.1
    head_lr_mult: float = 1.0    # fusion, decoder, and class head
    seed: int = 0
    eval_batch_size: int = 2     # metrics do not depend on this knob
    ignore_value: int = 255

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        return self


@dataclass
class SceneConfig:
    """Procedural road-scene generator parameters.

    Samples are pure functions of (seed, index) via the Philox counter-based
    64-bit PRNG, so regeneration is reproducible across platforms.
    """

    num_classes: int = 6
    height: int = 128
    width: int = 128
    seed: int = 0
    noise: float = 0.03             # per-pixel Gaussian color noise (std)
    sky_frac_min: float = 0.2       # horizon height as a fraction of H
    sky_frac_max: float = 0.4
    road_half_width_min: float = 0.18   # at the bottom row, fraction of W
    road_half_width_max: float = 0.32
    sidewalk_margin: float = 0.5    # extra ground visible beside the road
    building_count_min: int = 1
    building_count_max: int = 3
    vegetation_count_min: int = 1
    vegetation_count_max: int = 3
    vehicle_count_min: int = 1
    vehicle_count_max: int = 3
    palette_shift: float = 0.0      # domain-shift knob for retention studies
    rng: str = "philox"             # fixed; echoed for reproducibility audits

    def validate(self):
        if not 4 <= self.num_classes <= 19:
            raise ConfigError("scene num_classes must be in [4, 19]")
        if self.height < 32 or self.width < 32:
            raise ConfigError("scene extents must be >= 32")
        if self.rng != "philox":
            raise ConfigError("only the philox generator is supported")
        if not 0.05 <= self.sky_frac_min <= self.sky_frac_max <= 0.6:
            raise ConfigError("sky fraction range must satisfy 0.05 <= min <= max <= 0.6")
        return self


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "scene": SceneConfig}


@dataclass
class ConfigBundle:
    model: ModelConfig
    train: TrainConfig
    scene: SceneConfig

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.scene.validate()
        return self


def default_bundle():
    return ConfigBundle(ModelConfig(), TrainConfig(), SceneConfig())


def desk_bundle():
    return ConfigBundle(ModelConfig.desk(), TrainConfig(), SceneConfig())


def _parse_value(raw, ftype, key):
    raw = raw.strip()
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text):
    """Parse flat key-value text into a validated ConfigBundle."""
    sections = {name: {} for name in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, field = key.split(".", 1)
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        ftypes = {f.name: f.type for f in dataclasses.fields(cls)}
        if field not in ftypes:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        ftype = {"int": int, "float": float, "bool": bool, "str": str}[ftypes[field]] \
            if isinstance(ftypes[field], str) else ftypes[field]
        sections[section][field] = _parse_value(raw, ftype, key)
    bundle = ConfigBundle(model=ModelConfig(**sections["model"]),
                          train=TrainConfig(**sections["train"]),
                          scene=SceneConfig(**sections["scene"]))
    return bundle.validate()


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def serialize_config(bundle):
    """Inverse of parse_config_text; also used as the checkpoint config echo."""
    lines = []
    for section, obj in (("model", bundle.model), ("train", bundle.train),
                         ("scene", bundle.scene)):
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
