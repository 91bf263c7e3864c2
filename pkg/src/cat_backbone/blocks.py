"""Composite layers: MLP, the cross attention block, patch embedding/projection.

A cross attention block (CAB) runs three pre-norm residual pairs in order::

    y = y + IPSA(LN(y));  y = y + MLP(LN(y))
    y = y + CPSA(LN(y));  y = y + MLP(LN(y))
    y = y + IPSA(LN(y));  y = y + MLP(LN(y))

Each residual branch is wrapped in stochastic depth; the two branches of a
pair share one drop rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, RelativePositionBias, cpsa_forward, ipsa_forward
from .errors import DivisibilityError, ShapeError
from .init import trunc_normal
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim: int, dtype=np.float32) -> "LayerNormParams":
        return cls(Tensor(np.ones(dim, dtype), requires_grad=True),
                   Tensor(np.zeros(dim, dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, LN_EPS)

    def named(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass
class MlpParams:
    w1: Tensor  # [C, rC]
    b1: Tensor
    w2: Tensor  # [rC, C]
    b2: Tensor

    def __post_init__(self):
        C, hidden = self.w1.shape
        if self.w2.shape != (hidden, C) or self.b1.shape != (hidden,) or self.b2.shape != (C,):
            raise ShapeError(f"inconsistent MLP shapes w1={self.w1.shape} w2={self.w2.shape}")

    @property
    def ratio(self) -> float:
        return self.w1.shape[1] / self.w1.shape[0]

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, ratio: int = 4, dtype=np.float32) -> "MlpParams":
        hidden = int(dim * ratio)
        return cls(Tensor(trunc_normal(rng, (dim, hidden), dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(hidden, dtype), requires_grad=True),
                   Tensor(trunc_normal(rng, (hidden, dim), dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(dim, dtype), requires_grad=True))

    def named(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    if x.shape[-1] != p.w1.shape[0]:
        raise ShapeError(f"MLP expects last dim {p.w1.shape[0]}, got {x.shape[-1]}")
    return T.linear(T.gelu(T.linear(x, p.w1, p.b1)), p.w2, p.b2)


@dataclass
class DropPathState:
    rate: float = 0.0
    training: bool = False
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"drop path rate must be in [0, 1), got {self.rate}")


def drop_path(x: Tensor, s: DropPathState) -> Tensor:
    """Stochastic depth: drop whole samples of a residual branch.

    Kept samples are rescaled by ``1 / (1 - rate)``. Inactive (eval mode or
    zero rate) returns ``x`` itself.
    """
    if not s.training or s.rate == 0.0:
        return x
    if s.rng is None:
        raise ValueError("drop_path in training mode needs an explicit rng")
    keep = s.rng.random(x.shape[0]) >= s.rate
    mask = (keep / (1.0 - s.rate)).astype(x.dtype).reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return T.mul(x, Tensor(mask, dtype=x.dtype))


@dataclass
class CabParams:
    ipsa1: AttentionParams
    rpb1: RelativePositionBias
    cpsa: AttentionParams
    ipsa2: AttentionParams
    rpb2: RelativePositionBias
    norms: list[LayerNormParams]
    mlps: list[MlpParams]
    patch_size: int
    drop_path_rates: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        C = self.ipsa1.dim
        n = self.patch_size
        if len(self.norms) != 6 or len(self.mlps) != 3 or len(self.drop_path_rates) != 3:
            raise ShapeError("a CAB needs 6 layer norms, 3 MLPs and 3 drop path rates")
        if self.ipsa2.dim != C or self.cpsa.dim != n * n:
            raise ShapeError(f"attention dims {self.ipsa1.dim}/{self.cpsa.dim}/{self.ipsa2.dim} "
                             f"inconsistent with C={C}, n={n}")
        if any(ln.gamma.shape != (C,) for ln in self.norms) or any(m.w1.shape[0] != C for m in self.mlps):
            raise ShapeError(f"norm/MLP widths inconsistent with C={C}")

    @property
    def dim(self) -> int:
        return self.ipsa1.dim

    @classmethod
    def init(cls, dim: int, n: int, heads: int, rng: np.random.Generator, *, cpsa_heads: int = 1,
             mlp_ratio: int = 4, ipsa_attn_dropout: float = 0.0, cpsa_attn_dropout: float = 0.2,
             drop_path_rates=(0.0, 0.0, 0.0), dtype=np.float32) -> "CabParams":
        ipsa1 = AttentionParams.init(dim, heads, rng, attn_dropout_rate=ipsa_attn_dropout, dtype=dtype)
        rpb1 = RelativePositionBias.init(n, heads, rng, dtype=dtype)
        cpsa = AttentionParams.init(n * n, cpsa_heads, rng, attn_dropout_rate=cpsa_attn_dropout, dtype=dtype)
        ipsa2 = AttentionParams.init(dim, heads, rng, attn_dropout_rate=ipsa_attn_dropout, dtype=dtype)
        rpb2 = RelativePositionBias.init(n, heads, rng, dtype=dtype)
        norms = [LayerNormParams.init(dim, dtype) for _ in range(6)]
        mlps = [MlpParams.init(dim, rng, mlp_ratio, dtype) for _ in range(3)]
        return cls(ipsa1, rpb1, cpsa, ipsa2, rpb2, norms, mlps, n, tuple(drop_path_rates))

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, group in (("ipsa1", self.ipsa1), ("cpsa", self.cpsa), ("ipsa2", self.ipsa2)):
            out.update({f"{prefix}.{k}": v for k, v in group.named().items()})
        out["ipsa1.rel_pos_table"] = self.rpb1.table
        out["ipsa2.rel_pos_table"] = self.rpb2.table
        for i, ln in enumerate(self.norms):
            out.update({f"norm{i}.{k}": v for k, v in ln.named().items()})
        for i, m in enumerate(self.mlps):
            out.update({f"mlp{i}.{k}": v for k, v in m.named().items()})
        return out


def cab_forward(y: Tensor, p: CabParams, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    B, H, W, C = y.shape
    n = p.patch_size
    if H % n or W % n:
        raise DivisibilityError(f"feature map {H}x{W} is not divisible by patch size {n}")
    attns = (
        lambda t: ipsa_forward(t, p.ipsa1, p.rpb1, n, training, rng),
        lambda t: cpsa_forward(t, p.cpsa, n, training, rng),
        lambda t: ipsa_forward(t, p.ipsa2, p.rpb2, n, training, rng),
    )
    for i, attn in enumerate(attns):
        dp = DropPathState(p.drop_path_rates[i], training, rng)
        y = T.add(y, drop_path(attn(p.norms[2 * i](y)), dp))
        y = T.add(y, drop_path(mlp_forward(p.norms[2 * i + 1](y), p.mlps[i]), dp))
    return y


# --------------------------------------------------------- space <-> depth


def space_to_depth(x: Tensor, s: int) -> Tensor:
    """``[B, H, W, C] -> [B, H/s, W/s, s*s*C]``.

    Output channel ``(dy * s + dx) * C + c`` holds input pixel
    ``(s*i + dy, s*j + dx)`` channel ``c``.
    """
    B, H, W, C = x.shape
    if H % s or W % s:
        raise DivisibilityError(f"input {H}x{W} is not divisible by {s}")
    t = T.reshape(x, (B, H // s, s, W // s, s, C))
    t = T.permute(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B, H // s, W // s, s * s * C))


def depth_to_space(x: Tensor, s: int) -> Tensor:
    B, h, w, D = x.shape
    if D % (s * s):
        raise ShapeError(f"channel count {D} is not divisible by {s * s}")
    C = D // (s * s)
    t = T.reshape(x, (B, h, w, s, s, C))
    t = T.permute(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B, h * s, w * s, C))


def _im2col(x: Tensor, P: int) -> Tensor:
    # conv-kernel order: feature index c * P*P + dy * P + dx
    B, H, W, C = x.shape
    t = T.reshape(x, (B, H // P, P, W // P, P, C))
    t = T.permute(t, (0, 1, 3, 5, 2, 4))
    return T.reshape(t, (B, H // P, W // P, C * P * P))


@dataclass
class PatchEmbedParams:
    """Stride-``P`` patch embedding followed by layer norm.

    ``kind="conv"`` stores the kernel as ``[C1, C_in, P, P]``; ``kind="slice"``
    stores a ``[P*P*C_in, C1]`` matrix applied after :func:`space_to_depth`.
    """

    kind: str
    weight: Tensor
    bias: Tensor
    norm: LayerNormParams
    patch: int = 4

    def __post_init__(self):
        if self.kind not in ("conv", "slice"):
            raise ValueError(f"unknown embedding variant {self.kind!r}")

    @property
    def out_dim(self) -> int:
        return self.bias.shape[0]

    @classmethod
    def init(cls, kind: str, in_chans: int, dim: int, rng: np.random.Generator, patch: int = 4,
             dtype=np.float32) -> "PatchEmbedParams":
        fan = in_chans * patch * patch
        shape = (dim, in_chans, patch, patch) if kind == "conv" else (fan, dim)
        w = Tensor(trunc_normal(rng, shape, dtype=dtype), requires_grad=True)
        return cls(kind, w, Tensor(np.zeros(dim, dtype), requires_grad=True),
                   LayerNormParams.init(dim, dtype), patch)

    def named(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias, "norm.gamma": self.norm.gamma,
                "norm.beta": self.norm.beta}


def conv_to_slice_weight(w_conv: np.ndarray) -> np.ndarray:
    """Rearrange a ``[C1, C_in, P, P]`` kernel into the slice layout ``[P*P*C_in, C1]``.

    Row ``(dy * P + dx) * C_in + c`` of the result is ``w_conv[:, c, dy, dx]``.
    """
    C1, Cin, P, _ = w_conv.shape
    return np.ascontiguousarray(w_conv.transpose(2, 3, 1, 0).reshape(P * P * Cin, C1))


def patch_embed_conv(x: Tensor, p: PatchEmbedParams) -> Tensor:
    B, H, W, Cin = x.shape
    P = p.patch
    if H % P or W % P:
        raise DivisibilityError(f"input {H}x{W} is not divisible by the embedding stride {P}")
    C1 = p.weight.shape[0]
    if p.weight.shape != (C1, Cin, P, P):
        raise ShapeError(f"conv kernel {p.weight.shape} does not match {Cin} input channels, stride {P}")
    w = T.permute(T.reshape(p.weight, (C1, Cin * P * P)), (1, 0))
    return p.norm(T.linear(_im2col(x, P), w, p.bias))


def patch_embed_slice(x: Tensor, p: PatchEmbedParams) -> Tensor:
    B, H, W, Cin = x.shape
    P = p.patch
    if H % P or W % P:
        raise DivisibilityError(f"input {H}x{W} is not divisible by the slice size {P}")
    if p.weight.shape[0] != P * P * Cin:
        raise ShapeError(f"slice weight {p.weight.shape} expects {p.weight.shape[0]} inputs, "
                         f"space-to-depth gives {P * P * Cin}")
    return p.norm(T.linear(space_to_depth(x, P), p.weight, p.bias))


def patch_embed(x: Tensor, p: PatchEmbedParams) -> Tensor:
    return patch_embed_conv(x, p) if p.kind == "conv" else patch_embed_slice(x, p)


@dataclass
class PatchProjectionParams:
    norm: LayerNormParams  # over 4C
    weight: Tensor  # [4C, 2C], no bias
    bias: Tensor | None = field(default=None)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, dtype=np.float32) -> "PatchProjectionParams":
        return cls(LayerNormParams.init(4 * dim, dtype),
                   Tensor(trunc_normal(rng, (4 * dim, 2 * dim), dtype=dtype), requires_grad=True))

    def named(self) -> dict[str, Tensor]:
        out = {"norm.gamma": self.norm.gamma, "norm.beta": self.norm.beta, "weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


def patch_projection(x: Tensor, p: PatchProjectionParams) -> Tensor:
    """Halve the resolution and double the channels: ``[B,H,W,C] -> [B,H/2,W/2,2C]``."""
    C = x.shape[-1]
    if p.weight.shape[0] != 4 * C:
        raise ShapeError(f"projection weight {p.weight.shape} expects input dim {p.weight.shape[0] // 4}, got {C}")
    return T.linear(p.norm(space_to_depth(x, 2)), p.weight, p.bias)
