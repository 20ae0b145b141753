"""Full experiment configuration with JSON round-tripping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .context import GaSpec
from .distribution import Arrangement, LdSpec
from .errors import InvalidSpec
from .segnet import BackboneSpec, TrainConfig


def _default_ga() -> GaSpec:
    return GaSpec(kind="cgnl", channels=32, groups=4, downsample_input=True)


@dataclass
class GaldConfig:
    channels: int = 32
    num_classes: int = 3
    ga: GaSpec = field(default_factory=_default_ga)
    ld: LdSpec = field(default_factory=LdSpec)
    arrangement: Arrangement = field(default_factory=Arrangement)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: Optional[str] = None
    output_dir: Optional[str] = None
    image_size: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")
        if self.backbone.widths[-1] != self.channels:
            raise InvalidSpec(f"backbone final width {self.backbone.widths[-1]} != channels {self.channels}")
        if self.ga.channels != self.channels:
            raise InvalidSpec(f"ga.channels {self.ga.channels} != channels {self.channels}")
        feat = self.image_size // self.backbone.output_stride
        if self.image_size % self.backbone.output_stride:
            raise InvalidSpec("image_size must be divisible by the backbone output stride")
        if self.arrangement.uses_ld and feat < self.ld.d:
            raise InvalidSpec(f"feature map {feat}x{feat} smaller than LD ratio {self.ld.d}")

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "ga": self.ga.to_dict(),
            "ld": self.ld.to_dict(),
            "arrangement": {"kind": self.arrangement.kind},
            "backbone": {"in_ch": self.backbone.in_ch, "widths": list(self.backbone.widths), "strides": list(self.backbone.strides)},
            "train": self.train.to_dict(),
            "dataset": self.dataset,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaldConfig":
        d = dict(d)
        known = {"channels", "num_classes", "image_size", "ga", "ld", "arrangement", "backbone", "train", "dataset", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown config keys {sorted(unknown)}")
        channels = d.get("channels", 32)
        ga = dict(_default_ga().to_dict(), channels=channels)
        ga.update(d.get("ga", {}))
        return cls(
            channels=channels,
            num_classes=d.get("num_classes", 3),
            image_size=d.get("image_size", 64),
            ga=GaSpec.from_dict(ga),
            ld=LdSpec.from_dict(d.get("ld", {})),
            arrangement=Arrangement(**d.get("arrangement", {})),
            backbone=BackboneSpec(**d.get("backbone", {})),
            train=TrainConfig(**d.get("train", {})),
            dataset=d.get("dataset"),
            output_dir=d.get("output_dir"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GaldConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "GaldConfig":
        """Copy with nested overrides, e.g. replace(arrangement={"kind": "ga_only"})."""
        d = self.to_dict()
        for k, v in changes.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return GaldConfig.from_dict(d)
