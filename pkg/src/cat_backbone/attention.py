"""Attention kernels: plain MSA, inner-patch (IPSA) and cross-patch (CPSA).

All feature maps are channels-last ``[B, H, W, C]``. IPSA treats the
``n*n`` pixels of each non-overlapping patch as a token sequence with ``C``
features. CPSA splits the map by channel and treats each flattened ``n*n``
patch of one channel as a token with ``n*n`` features, so every channel
attends globally over its own patches with projection weights shared by all
channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DivisibilityError, ShapeError
from .init import trunc_normal
from .tensor import Tensor


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor | None
    b_k: Tensor | None
    b_v: Tensor | None
    b_o: Tensor | None
    heads: int = 1
    attn_dropout_rate: float = 0.0

    def __post_init__(self):
        dim = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (dim, dim):
                raise ShapeError(f"{name} must be {dim}x{dim}, got {getattr(self, name).shape}")
        for name in ("b_q", "b_k", "b_v", "b_o"):
            b = getattr(self, name)
            if b is not None and b.shape != (dim,):
                raise ShapeError(f"{name} must have shape ({dim},), got {b.shape}")
        if self.heads < 1 or dim % self.heads:
            raise ShapeError(f"heads={self.heads} must divide dim={dim}")
        if not 0.0 <= self.attn_dropout_rate < 1.0:
            raise ValueError(f"attention dropout must be in [0, 1), got {self.attn_dropout_rate}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator, *, bias: bool = True,
             attn_dropout_rate: float = 0.0, dtype=np.float32) -> "AttentionParams":
        ws = [Tensor(trunc_normal(rng, (dim, dim), dtype=dtype), requires_grad=True) for _ in range(4)]
        bs = [Tensor(np.zeros(dim, dtype), requires_grad=True) if bias else None for _ in range(4)]
        return cls(*ws, *bs, heads=heads, attn_dropout_rate=attn_dropout_rate)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for name in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out


def relative_position_index(n: int) -> np.ndarray:
    """``[n*n, n*n]`` map from token pair to its row in the bias table.

    Token ``i`` sits at ``(i // n, i % n)``; the row for a pair is
    ``(drow + n - 1) * (2n - 1) + (dcol + n - 1)``.
    """
    if n < 1:
        raise ValueError(f"patch size must be >= 1, got {n}")
    r, c = np.divmod(np.arange(n * n), n)
    dr = r[:, None] - r[None, :]
    dc = c[:, None] - c[None, :]
    return ((dr + n - 1) * (2 * n - 1) + (dc + n - 1)).astype(np.int64)


@dataclass
class RelativePositionBias:
    table: Tensor
    index: np.ndarray = field(repr=False)

    def __post_init__(self):
        rows = self.index.max() + 1 if self.index.size else 0
        if self.table.ndim != 2 or self.table.shape[0] < rows:
            raise ShapeError(f"bias table {self.table.shape} too small for index values up to {rows - 1}")

    @property
    def heads(self) -> int:
        return self.table.shape[1]

    @classmethod
    def init(cls, n: int, heads: int, rng: np.random.Generator, dtype=np.float32) -> "RelativePositionBias":
        table = trunc_normal(rng, ((2 * n - 1) ** 2, heads), dtype=dtype)
        return cls(Tensor(table, requires_grad=True), relative_position_index(n))

    def bias(self) -> Tensor:
        """Gathered bias of shape ``[n*n, n*n, heads]``."""
        return T.take_rows(self.table, self.index)


@dataclass
class AbsolutePositionEncoding:
    pos: Tensor  # [h, w, C] at the configured base resolution

    @classmethod
    def init(cls, h: int, w: int, dim: int, dtype=np.float32) -> "AbsolutePositionEncoding":
        return cls(Tensor(np.zeros((h, w, dim), dtype), requires_grad=True))

    def apply(self, y: Tensor) -> Tensor:
        _, H, W, C = y.shape
        if C != self.pos.shape[2]:
            raise ShapeError(f"position encoding has {self.pos.shape[2]} channels, features have {C}")
        return T.add(y, T.resize_bilinear(self.pos, (H, W)))


# ------------------------------------------------------------------ layouts


def _check_divisible(H: int, W: int, n: int) -> None:
    if n < 1 or H % n or W % n:
        raise DivisibilityError(f"feature map {H}x{W} is not divisible by patch size {n}")


def window_partition(x: Tensor, n: int) -> Tensor:
    """``[B, H, W, C] -> [B * (H/n) * (W/n), n*n, C]``, windows in row-major order."""
    B, H, W, C = x.shape
    _check_divisible(H, W, n)
    t = T.reshape(x, (B, H // n, n, W // n, n, C))
    t = T.permute(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B * (H // n) * (W // n), n * n, C))


def window_reverse(windows: Tensor, n: int, H: int, W: int) -> Tensor:
    _check_divisible(H, W, n)
    nw = (H // n) * (W // n)
    if windows.ndim != 3 or windows.shape[1] != n * n or windows.shape[0] % nw:
        raise ShapeError(f"windows of shape {windows.shape} do not tile a {H}x{W} map with patch {n}")
    B, C = windows.shape[0] // nw, windows.shape[2]
    t = T.reshape(windows, (B, H // n, W // n, n, n, C))
    t = T.permute(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B, H, W, C))


def channel_partition(x: Tensor, n: int) -> Tensor:
    """``[B, H, W, C] -> [B * C, (H/n) * (W/n), n*n]``: one sequence per channel."""
    B, H, W, C = x.shape
    _check_divisible(H, W, n)
    t = T.reshape(x, (B, H // n, n, W // n, n, C))
    t = T.permute(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (B * C, (H // n) * (W // n), n * n))


def channel_reverse(seqs: Tensor, n: int, H: int, W: int, C: int) -> Tensor:
    _check_divisible(H, W, n)
    L = (H // n) * (W // n)
    if seqs.ndim != 3 or seqs.shape[1:] != (L, n * n) or seqs.shape[0] % C:
        raise ShapeError(f"sequences of shape {seqs.shape} do not tile a {H}x{W}x{C} map with patch {n}")
    B = seqs.shape[0] // C
    t = T.reshape(seqs, (B, C, H // n, W // n, n, n))
    t = T.permute(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (B, H, W, C))


# ------------------------------------------------------------------- kernels


def _split_heads(t: Tensor, heads: int) -> Tensor:
    Bs, L, d = t.shape
    if heads == 1:
        return T.reshape(t, (Bs, 1, L, d))
    return T.permute(T.reshape(t, (Bs, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    Bs, h, L, dh = t.shape
    if h == 1:
        return T.reshape(t, (Bs, L, dh))
    return T.reshape(T.permute(t, (0, 2, 1, 3)), (Bs, L, h * dh))


def attention_probs(q: Tensor, k: Tensor, heads: int, bias: Tensor | None = None) -> Tensor:
    """Post-softmax attention weights ``[B*, heads, L, L]``."""
    if q.ndim != 3 or k.shape != q.shape:
        raise ShapeError(f"q/k shapes must match [B, L, d], got {q.shape} and {k.shape}")
    Bs, L, d = q.shape
    if heads < 1 or d % heads:
        raise ShapeError(f"heads={heads} must divide token dim {d}")
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    scores = T.mul(T.matmul(qh, T.permute(kh, (0, 1, 3, 2))), float((d // heads) ** -0.5))
    if bias is not None:
        if bias.shape != (L, L, heads):
            raise ShapeError(f"bias must have shape {(L, L, heads)}, got {bias.shape}")
        scores = T.add(scores, T.permute(bias, (2, 0, 1)))
    return T.softmax_lastdim(scores)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor | None = None,
                         dropout_rate: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head ``softmax(q k^T / sqrt(d_head) + bias) v`` with heads concatenated."""
    if v.shape != q.shape:
        raise ShapeError(f"v shape {v.shape} does not match q shape {q.shape}")
    probs = attention_probs(q, k, heads, bias)
    probs = T.dropout(probs, dropout_rate, training, rng)
    return _merge_heads(T.matmul(probs, _split_heads(v, heads)))


def _attend(tokens: Tensor, p: AttentionParams, bias, training, rng) -> Tensor:
    if tokens.shape[-1] != p.dim:
        raise ShapeError(f"token dim {tokens.shape[-1]} does not match projection dim {p.dim}")
    q = T.linear(tokens, p.w_q, p.b_q)
    k = T.linear(tokens, p.w_k, p.b_k)
    v = T.linear(tokens, p.w_v, p.b_v)
    out = scaled_dot_attention(q, k, v, p.heads, bias, p.attn_dropout_rate, training, rng)
    return T.linear(out, p.w_o, p.b_o)


def msa_forward(x: Tensor, p: AttentionParams, bias: Tensor | None = None,
                training: bool = False, rng=None) -> Tensor:
    """Global self-attention over all ``H*W`` pixels (quadratic reference)."""
    B, H, W, C = x.shape
    out = _attend(T.reshape(x, (B, H * W, C)), p, bias, training, rng)
    return T.reshape(out, (B, H, W, C))


def ipsa_forward(x: Tensor, p: AttentionParams, rpb: RelativePositionBias | None, n: int,
                 training: bool = False, rng=None) -> Tensor:
    B, H, W, C = x.shape
    windows = window_partition(x, n)
    bias = rpb.bias() if rpb is not None else None
    out = _attend(windows, p, bias, training, rng)
    return window_reverse(out, n, H, W)


def cpsa_forward(x: Tensor, p: AttentionParams, n: int, training: bool = False, rng=None) -> Tensor:
    B, H, W, C = x.shape
    if p.dim != n * n:
        raise ShapeError(f"CPSA projection dim must be n*n={n * n}, got {p.dim}")
    if p.heads not in (1, n):
        raise ShapeError(f"CPSA heads must be 1 or the patch size {n}, got {p.heads}")
    seqs = channel_partition(x, n)
    out = _attend(seqs, p, None, training, rng)
    return channel_reverse(out, n, H, W, C)
