"""Finite-difference verification of every layer's tape gradients.

Each check builds a small float64 instance of a layer, reduces its output to
a scalar with a fixed random weighting (a plain sum can be identically flat,
e.g. the channel sum of a layer norm), and compares the tape gradient
against central differences for the input and selected parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionParams, RelativePositionBias, cpsa_forward, ipsa_forward
from .blocks import (
    CabParams,
    MlpParams,
    PatchEmbedParams,
    PatchProjectionParams,
    cab_forward,
    mlp_forward,
    patch_embed_conv,
    patch_embed_slice,
    patch_projection,
)
from .tensor import Tensor

THRESHOLD = 1e-4


@dataclass
class CheckResult:
    block: str
    target: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < THRESHOLD


def _flip_grad(x: Tensor) -> Tensor:
    # identity whose backward negates: negative control for the harness
    return T._make(x.data.copy(), (x,), lambda g: (-g,), "flip_grad")


def _randomize(params: dict[str, Tensor], rng: np.random.Generator, scale: float = 0.5) -> None:
    # init-scale weights (std 0.02) make attention nearly uniform; use larger ones
    for t in params.values():
        t.data = rng.normal(0.0, scale, t.shape)


def _cases(rng: np.random.Generator, C: int, n: int, H: int, B: int):
    f64 = np.float64

    def attn(dim, heads):
        p = AttentionParams.init(dim, heads, rng, dtype=f64)
        _randomize(p.named(), rng)
        return p

    ipsa_p, rpb = attn(C, 2), RelativePositionBias.init(n, 2, rng, dtype=f64)
    _randomize({"t": rpb.table}, rng)
    cpsa_p = attn(n * n, 1)
    mlp_p = MlpParams.init(C, rng, dtype=f64)
    _randomize(mlp_p.named(), rng)
    cab_p = CabParams.init(C, n, 2, rng, dtype=f64)
    _randomize({k: v for k, v in cab_p.named().items() if "norm" not in k}, rng)
    conv_p = PatchEmbedParams.init("conv", 3, C, rng, patch=4, dtype=f64)
    slice_p = PatchEmbedParams.init("slice", 3, C, rng, patch=4, dtype=f64)
    _randomize({"a": conv_p.weight, "b": conv_p.bias, "c": slice_p.weight, "d": slice_p.bias}, rng)
    proj_p = PatchProjectionParams.init(C // 2, rng, dtype=f64)
    _randomize({"w": proj_p.weight}, rng)

    feat = rng.standard_normal((B, H, H, C))
    image = rng.standard_normal((B, 4 * H // 2, 4 * H // 2, 3))
    half = rng.standard_normal((B, H, H, C // 2))
    return [
        ("ipsa", lambda x: ipsa_forward(x, ipsa_p, rpb, n), feat,
         {"w_q": ipsa_p.w_q, "b_v": ipsa_p.b_v, "rel_pos_table": rpb.table}),
        ("cpsa", lambda x: cpsa_forward(x, cpsa_p, n), feat, {"w_k": cpsa_p.w_k, "w_o": cpsa_p.w_o}),
        ("mlp", lambda x: mlp_forward(x, mlp_p), feat, {"w1": mlp_p.w1, "b2": mlp_p.b2}),
        ("cab", lambda x: cab_forward(x, cab_p), feat,
         {"cpsa.w_q": cab_p.cpsa.w_q, "norm2.gamma": cab_p.norms[2].gamma, "mlp1.w2": cab_p.mlps[1].w2}),
        ("patch_embed_conv", lambda x: patch_embed_conv(x, conv_p), image, {"weight": conv_p.weight}),
        ("patch_embed_slice", lambda x: patch_embed_slice(x, slice_p), image, {"weight": slice_p.weight}),
        ("patch_projection", lambda x: patch_projection(x, proj_p), half,
         {"weight": proj_p.weight, "norm.gamma": proj_p.norm.gamma}),
    ]


def run_gradchecks(seed: int = 0, C: int = 8, n: int = 2, H: int = 4, B: int = 2, h: float = 1e-5,
                   inject_bug: str | None = None) -> list[CheckResult]:
    """Check input and parameter gradients of IPSA, CPSA, MLP, CAB and the patch layers."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fwd, x0, params in _cases(rng, C, n, H, B):
        if inject_bug == name:
            fwd = (lambda f: lambda x: _flip_grad(f(x)))(fwd)
        out_shape = fwd(Tensor(x0)).shape
        weight = Tensor(rng.standard_normal(out_shape))

        def loss(x, fwd=fwd, weight=weight):
            return T.sum(T.mul(fwd(x), weight))

        x = Tensor(x0.copy())
        results.append(CheckResult(name, "input", T.finite_diff_check(loss, x, h)))
        for pname, p in params.items():
            err = T.finite_diff_check(lambda _p, x=x, loss=loss: loss(x), p, h)
            results.append(CheckResult(name, pname, err))
    return results


def summarize(results: list[CheckResult]) -> dict[str, float]:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.block] = max(worst.get(r.block, 0.0), r.error)
    return worst


BlockFn = Callable[[Tensor], Tensor]
