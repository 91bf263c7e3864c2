"""Analytical parameter and operation counts.

All counts are exact Python integers. Operation counts are multiply-accumulates
(MACs): one ``[L, a] @ [a, b]`` product costs ``L * a * b``. Biases, layer
norms, softmax, GELU, residual adds and position-bias adds are not counted.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

from .config import CatConfig
from .errors import DivisibilityError

CONVENTION = "MACs (multiply-accumulates); bias/LN/softmax/GELU/residual/position-bias ops excluded"


def _positive(**kw) -> None:
    for k, v in kw.items():
        if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
            raise ValueError(f"{k} must be a positive integer, got {v!r}")


def _divisible(h: int, w: int, n: int) -> None:
    if h % n or w % n:
        raise DivisibilityError(f"{h}x{w} is not divisible by patch size {n}")


def flops_msa(h: int, w: int, c: int) -> int:
    """Global self-attention: ``4hwc^2 + 2(hw)^2 c``."""
    _positive(h=h, w=w, c=c)
    return 4 * h * w * c * c + 2 * (h * w) ** 2 * c


def flops_ipsa(h: int, w: int, c: int, n: int) -> int:
    """Inner-patch attention: ``4hwc^2 + 2 n^2 hwc``."""
    _positive(h=h, w=w, c=c, n=n)
    _divisible(h, w, n)
    return 4 * h * w * c * c + 2 * n * n * h * w * c


def flops_cpsa(h: int, w: int, c: int, n: int) -> int:
    """Cross-patch attention: ``4 n^2 hwc + 2 (hw / n)^2 c``.

    ``(hw/n)^2`` is evaluated as ``(hw)^2 / n^2``, which stays integral
    whenever ``n`` divides both sides.
    """
    _positive(h=h, w=w, c=c, n=n)
    _divisible(h, w, n)
    return 4 * n * n * h * w * c + 2 * (h * w) ** 2 * c // (n * n)


def flops_mlp(h: int, w: int, c: int, ratio: int = 4) -> int:
    return 2 * h * w * c * (ratio * c)


@dataclass
class FlopsEntry:
    name: str
    kind: str
    stage: int  # 0 = stem/head
    macs: int


@dataclass
class FlopsReport:
    input_size: tuple[int, int]
    entries: list[FlopsEntry] = field(default_factory=list)
    convention: str = CONVENTION

    def add(self, name: str, kind: str, stage: int, macs: int) -> None:
        if macs < 0:
            raise ValueError(f"negative count for {name}")
        self.entries.append(FlopsEntry(name, kind, stage, macs))

    @property
    def total(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def stage_totals(self) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for e in self.entries:
            out[e.stage] += e.macs
        return dict(sorted(out.items()))

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for e in self.entries:
            out[e.kind] += e.macs
        return dict(out)

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "convention": self.convention,
            "entries": [e.__dict__ for e in self.entries],
            "stage_totals": {str(k): v for k, v in self.stage_totals.items()},
            "total": self.total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        width = max([len(e.name) for e in self.entries] + [5])
        lines = [f"{'layer':<{width}}  {'kind':<10} {'stage':>5} {'MACs':>16}"]
        lines.append("-" * len(lines[0]))
        for e in self.entries:
            lines.append(f"{e.name:<{width}}  {e.kind:<10} {e.stage:>5} {e.macs:>16,}")
        lines.append("-" * len(lines[0]))
        for s, v in self.stage_totals.items():
            label = f"stage {s}" if s else "stem+head"
            lines.append(f"{label:<{width}}  {'':<10} {'':>5} {v:>16,}")
        lines.append(f"{'total':<{width}}  {'':<10} {'':>5} {self.total:>16,}")
        lines.append(f"({self.total / 1e9:.3f} G; {self.convention})")
        return "\n".join(lines)


def model_flops(cfg: CatConfig, h: int, w: int) -> FlopsReport:
    _positive(h=h, w=w)
    if h % cfg.size_multiple or w % cfg.size_multiple:
        raise DivisibilityError(f"input {h}x{w} must have sides divisible by {cfg.size_multiple}")
    rep = FlopsReport((h, w))
    s, n, r = cfg.embed_stride, cfg.patch_size, cfg.mlp_ratio
    hi, wi = h // s, w // s
    rep.add("patch_embed", "embed", 0, hi * wi * (cfg.in_chans * s * s) * cfg.dims[0])
    for i, (c, depth) in enumerate(zip(cfg.dims, cfg.depths), start=1):
        if i > 1:
            hi, wi = hi // 2, wi // 2
            prev = cfg.dims[i - 2]
            rep.add(f"stages.{i - 1}.projection", "projection", i, hi * wi * 4 * prev * 2 * prev)
        for j in range(depth):
            pre = f"stages.{i - 1}.blocks.{j}"
            rep.add(f"{pre}.ipsa1", "ipsa", i, flops_ipsa(hi, wi, c, n))
            rep.add(f"{pre}.mlp0", "mlp", i, flops_mlp(hi, wi, c, r))
            rep.add(f"{pre}.cpsa", "cpsa", i, flops_cpsa(hi, wi, c, n))
            rep.add(f"{pre}.mlp1", "mlp", i, flops_mlp(hi, wi, c, r))
            rep.add(f"{pre}.ipsa2", "ipsa", i, flops_ipsa(hi, wi, c, n))
            rep.add(f"{pre}.mlp2", "mlp", i, flops_mlp(hi, wi, c, r))
    rep.add("head", "head", 0, cfg.dims[-1] * cfg.num_classes)
    return rep


def param_count(cfg: CatConfig) -> int:
    """Parameter total of :func:`build` output, computed from the config alone."""
    return sum(param_breakdown(cfg).values())


def param_breakdown(cfg: CatConfig) -> dict[str, int]:
    out: dict[str, int] = {}
    s, n, r = cfg.embed_stride, cfg.patch_size, cfg.mlp_ratio
    c1 = cfg.dims[0]
    out["patch_embed"] = cfg.in_chans * s * s * c1 + c1 + 2 * c1
    if cfg.abs_pos:
        out["abs_pos"] = (cfg.base_input[0] // s) * (cfg.base_input[1] // s) * c1
    table = (2 * n - 1) ** 2
    for i, (c, depth, heads) in enumerate(zip(cfg.dims, cfg.depths, cfg.heads)):
        if i:
            prev = cfg.dims[i - 1]
            out[f"stages.{i}.projection"] = 2 * 4 * prev + 4 * prev * 2 * prev
        for j in range(depth):
            attn = 2 * (4 * c * c + 4 * c + table * heads) + 4 * (n * n) ** 2 + 4 * n * n
            mlp = 3 * (2 * r * c * c + r * c + c)
            out[f"stages.{i}.blocks.{j}"] = attn + mlp + 6 * 2 * c
    c4 = cfg.dims[-1]
    out["head"] = 2 * c4 + c4 * cfg.num_classes + cfg.num_classes
    return out


def count_params(m) -> tuple[int, dict[str, int]]:
    """Exact element count of a built model, grouped by layer (name minus last component)."""
    groups: dict[str, int] = defaultdict(int)
    for name, t in m.params.items():
        layer = name.rsplit(".", 1)[0] if "." in name else name
        groups[layer] += t.size
    return sum(groups.values()), dict(groups)
