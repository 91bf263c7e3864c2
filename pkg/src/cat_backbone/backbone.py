"""Hierarchical CAT backbone: build, feature pyramid, classification head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AbsolutePositionEncoding
from .blocks import (
    CabParams,
    LayerNormParams,
    PatchEmbedParams,
    PatchProjectionParams,
    cab_forward,
    patch_embed,
    patch_projection,
)
from .config import CatConfig
from .errors import DivisibilityError, ShapeError
from .init import trunc_normal
from .tensor import Tensor


@dataclass
class FeaturePyramid:
    """Per-stage outputs ``F1..F4`` at down-rates 4/8/16/32.

    ``valid`` holds, per stage, the ``(h, w)`` region that corresponds to the
    unpadded input; it equals the full map unless the input was padded.
    """

    maps: list[Tensor]
    valid: list[tuple[int, int]]
    input_size: tuple[int, int]

    def __getitem__(self, i: int) -> Tensor:
        return self.maps[i]

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    F1 = property(lambda self: self.maps[0])
    F2 = property(lambda self: self.maps[1])
    F3 = property(lambda self: self.maps[2])
    F4 = property(lambda self: self.maps[3])

    def cropped(self) -> list[Tensor]:
        return [T.crop_hw(f, h, w) for f, (h, w) in zip(self.maps, self.valid)]


@dataclass
class Model:
    config: CatConfig
    embed: PatchEmbedParams
    abs_pos: AbsolutePositionEncoding | None
    projections: list[PatchProjectionParams | None]
    stages: list[list[CabParams]]
    head_norm: LayerNormParams
    head_weight: Tensor
    head_bias: Tensor
    training: bool = False
    _params: dict[str, Tensor] = field(default=None, repr=False)

    @property
    def params(self) -> dict[str, Tensor]:
        """Every learnable tensor under a unique, stable dotted name."""
        if self._params is None:
            out: dict[str, Tensor] = {}
            out.update({f"patch_embed.{k}": v for k, v in self.embed.named().items()})
            if self.abs_pos is not None:
                out["abs_pos"] = self.abs_pos.pos
            for i, (proj, blocks) in enumerate(zip(self.projections, self.stages)):
                if proj is not None:
                    out.update({f"stages.{i}.projection.{k}": v for k, v in proj.named().items()})
                for j, cab in enumerate(blocks):
                    out.update({f"stages.{i}.blocks.{j}.{k}": v for k, v in cab.named().items()})
            out["head.norm.gamma"] = self.head_norm.gamma
            out["head.norm.beta"] = self.head_norm.beta
            out["head.weight"] = self.head_weight
            out["head.bias"] = self.head_bias
            self._params = out
        return self._params

    @property
    def dtype(self):
        return self.head_weight.dtype

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def drop_path_schedule(cfg: CatConfig) -> list[float]:
    """Linearly increasing stochastic-depth rates, one per attention/MLP pair."""
    units = 3 * sum(cfg.depths)
    if units == 0:
        return []
    if units == 1:
        return [0.0]
    return [cfg.drop_path_rate * i / (units - 1) for i in range(units)]


def build(cfg: CatConfig, seed: int = 0, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    embed = PatchEmbedParams.init(cfg.embed_variant, cfg.in_chans, cfg.dims[0], rng,
                                  patch=cfg.embed_stride, dtype=dtype)
    abs_pos = None
    if cfg.abs_pos:
        h, w = (s // cfg.embed_stride for s in cfg.base_input)
        abs_pos = AbsolutePositionEncoding.init(h, w, cfg.dims[0], dtype)
    rates = iter(drop_path_schedule(cfg))
    projections, stages = [], []
    for i, (dim, depth, heads) in enumerate(zip(cfg.dims, cfg.depths, cfg.heads)):
        projections.append(PatchProjectionParams.init(cfg.dims[i - 1], rng, dtype) if i else None)
        blocks = []
        for _ in range(depth):
            dp = (next(rates), next(rates), next(rates))
            blocks.append(CabParams.init(
                dim, cfg.patch_size, heads, rng, cpsa_heads=cfg.cpsa_heads, mlp_ratio=cfg.mlp_ratio,
                ipsa_attn_dropout=cfg.ipsa_attn_dropout, cpsa_attn_dropout=cfg.cpsa_attn_dropout,
                drop_path_rates=dp, dtype=dtype))
        stages.append(blocks)
    c_last = cfg.dims[-1]
    return Model(
        config=cfg, embed=embed, abs_pos=abs_pos, projections=projections, stages=stages,
        head_norm=LayerNormParams.init(c_last, dtype),
        head_weight=Tensor(trunc_normal(rng, (c_last, cfg.num_classes), dtype=dtype), requires_grad=True),
        head_bias=Tensor(np.zeros(cfg.num_classes, dtype), requires_grad=True),
    )


def check_input_size(cfg: CatConfig, H: int, W: int) -> tuple[int, int]:
    """Return the (possibly padded) working size, or raise with the nearest valid size."""
    m = cfg.size_multiple
    Hp, Wp = m * math.ceil(H / m), m * math.ceil(W / m)
    if (Hp, Wp) != (H, W) and not cfg.pad_input:
        raise DivisibilityError(
            f"input {H}x{W} does not tile into {cfg.patch_size}x{cfg.patch_size} patches at every stage; "
            f"sides must be multiples of {m} (smallest valid size: {Hp}x{Wp}), or enable pad_input")
    return Hp, Wp


def forward_features(m: Model, x, rng: np.random.Generator | None = None) -> FeaturePyramid:
    cfg = m.config
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[-1] != cfg.in_chans:
        raise ShapeError(f"expected input [B, H, W, {cfg.in_chans}], got {x.shape}")
    _, H, W, _ = x.shape
    Hp, Wp = check_input_size(cfg, H, W)
    x = T.pad_hw(x, Hp - H, Wp - W)

    y = patch_embed(x, m.embed)
    if m.abs_pos is not None:
        y = m.abs_pos.apply(y)
    maps, valid = [], []
    for i, (proj, blocks) in enumerate(zip(m.projections, m.stages)):
        if proj is not None:
            y = patch_projection(y, proj)
        for cab in blocks:
            y = cab_forward(y, cab, m.training, rng)
        maps.append(y)
        rate = cfg.down_rates[i]
        valid.append((math.ceil(H / rate), math.ceil(W / rate)))
    return FeaturePyramid(maps, valid, (H, W))


def forward_classify(m: Model, x, rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``[B, num_classes]``: LN, global average pool over the last stage, linear."""
    pyr = forward_features(m, x, rng)
    h, w = pyr.valid[-1]
    last = T.crop_hw(pyr.maps[-1], h, w)
    pooled = T.mean(m.head_norm(last), axis=(1, 2))
    return T.linear(pooled, m.head_weight, m.head_bias)
