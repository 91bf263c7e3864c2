"""Architecture configuration and the named CAT presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class CatConfig:
    dims: tuple[int, ...] = (96, 192, 384, 768)
    depths: tuple[int, ...] = (1, 1, 3, 1)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    patch_size: int = 7
    cpsa_heads: int = 1
    embed_variant: str = "conv"
    embed_stride: int = 4
    in_chans: int = 3
    base_input: tuple[int, int] = (224, 224)
    mlp_ratio: int = 4
    drop_path_rate: float = 0.2
    ipsa_attn_dropout: float = 0.0
    cpsa_attn_dropout: float = 0.2
    abs_pos: bool = True
    num_classes: int = 1000
    pad_input: bool = False
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        for key in ("dims", "depths", "heads", "base_input"):
            object.__setattr__(self, key, tuple(getattr(self, key)))
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self) -> list[str]:
        out = []
        n_stages = len(self.dims)
        if n_stages < 1:
            out.append("at least one stage is required")
        if len(self.depths) != n_stages or len(self.heads) != n_stages:
            out.append(f"dims/depths/heads must have equal length, got "
                       f"{len(self.dims)}/{len(self.depths)}/{len(self.heads)}")
        if any(d < 1 for d in self.dims):
            out.append(f"dims must be positive, got {self.dims}")
        for a, b in zip(self.dims, self.dims[1:]):
            if b != 2 * a:
                out.append(f"stage dims must double each stage, got {self.dims}")
                break
        if any(d < 0 for d in self.depths):
            out.append(f"depths must be >= 0, got {self.depths}")
        for i, (d, h) in enumerate(zip(self.dims, self.heads)):
            if h < 1 or d % h:
                out.append(f"stage {i + 1}: {h} heads do not divide dim {d}")
        if self.patch_size < 1:
            out.append(f"patch_size must be >= 1, got {self.patch_size}")
        if self.cpsa_heads not in (1, self.patch_size):
            out.append(f"cpsa_heads must be 1 or patch_size ({self.patch_size}), got {self.cpsa_heads}")
        if self.embed_variant not in ("conv", "slice"):
            out.append(f"embed_variant must be 'conv' or 'slice', got {self.embed_variant!r}")
        if self.embed_stride < 1 or self.in_chans < 1 or self.mlp_ratio < 1 or self.num_classes < 1:
            out.append("embed_stride, in_chans, mlp_ratio and num_classes must be positive")
        if len(self.base_input) != 2 or any(s < self.embed_stride for s in self.base_input):
            out.append(f"base_input must be (H, W) of at least the embedding stride, got {self.base_input}")
        elif any(s % self.embed_stride for s in self.base_input):
            out.append(f"base_input {self.base_input} is not divisible by embed_stride {self.embed_stride}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            out.append(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        for key in ("ipsa_attn_dropout", "cpsa_attn_dropout"):
            if not 0.0 <= getattr(self, key) < 1.0:
                out.append(f"{key} must be in [0, 1), got {getattr(self, key)}")
        return out

    @property
    def num_stages(self) -> int:
        return len(self.dims)

    @property
    def down_rates(self) -> tuple[int, ...]:
        return tuple(self.embed_stride * 2 ** i for i in range(self.num_stages))

    @property
    def size_multiple(self) -> int:
        """Input sides must be multiples of this for every stage to tile into patches."""
        return self.down_rates[-1] * self.patch_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("dims", "depths", "heads", "base_input"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CatConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "CatConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)

    def replace(self, **changes) -> "CatConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "cat-t": CatConfig(dims=(64, 128, 256, 512), depths=(1, 1, 3, 1), heads=(2, 4, 8, 16),
                       drop_path_rate=0.1, name="cat-t"),
    "cat-s": CatConfig(dims=(96, 192, 384, 768), depths=(1, 1, 3, 1), heads=(3, 6, 12, 24),
                       drop_path_rate=0.2, name="cat-s"),
    "cat-b": CatConfig(dims=(96, 192, 384, 768), depths=(1, 1, 6, 1), heads=(3, 6, 12, 24),
                       drop_path_rate=0.3, name="cat-b"),
    # desk-scale preset for the training harness
    "toy": CatConfig(dims=(32, 64, 128, 256), depths=(1, 1, 1, 1), heads=(1, 2, 4, 8), patch_size=2,
                     base_input=(64, 64), drop_path_rate=0.1, num_classes=2, name="toy"),
}


def preset(name: str) -> CatConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r} (choose from {', '.join(PRESETS)})") from None
