import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cat_backbone.analysis import (
    count_params,
    flops_cpsa,
    flops_ipsa,
    flops_mlp,
    flops_msa,
    model_flops,
    param_breakdown,
    param_count,
)
from cat_backbone.backbone import build
from cat_backbone.blocks import PatchProjectionParams
from cat_backbone.config import preset
from cat_backbone.errors import DivisibilityError


class TestKernelCounts:
    def test_unity(self):
        assert flops_msa(1, 1, 1) == 6

    def test_frozen_values(self):
        assert flops_msa(56, 56, 96) == 2_003_828_736
        assert flops_ipsa(56, 56, 96, 7) == 145_108_992
        assert flops_cpsa(56, 56, 96, 7) == 97_542_144
        assert flops_ipsa(7, 7, 1, 7) == 4998
        assert flops_cpsa(2, 2, 1, 2) == 72

    def test_width_doubling_scales_terms(self):
        h, w, c = 14, 14, 32
        proj = 4 * h * w * c * c
        assert flops_msa(h, 2 * w, c) - 2 * proj == 4 * (flops_msa(h, w, c) - proj)

    def test_cpsa_is_linear_in_c(self):
        assert flops_cpsa(28, 28, 192, 7) == 2 * flops_cpsa(28, 28, 96, 7)

    def test_results_are_python_ints_without_overflow(self):
        v = flops_msa(4096, 4096, 4096)
        assert isinstance(v, int) and v == 4 * 4096 ** 4 + 2 * 4096 ** 5

    @pytest.mark.parametrize("args", [(0, 1, 1), (1, -2, 1), (1, 1, 0), (True, 1, 1), (1.5, 1, 1)])
    def test_non_positive_rejected(self, args):
        with pytest.raises(ValueError):
            flops_msa(*args)

    def test_divisibility(self):
        with pytest.raises(DivisibilityError):
            flops_ipsa(56, 56, 96, 5)
        with pytest.raises(DivisibilityError):
            flops_cpsa(56, 30, 96, 7)

    @given(h=st.integers(1, 64), w=st.integers(1, 64), c=st.integers(1, 512))
    def test_single_patch_degeneracy(self, h, w, c):
        # n^2 == h*w with n | h, n | w forces h == w == n
        assert flops_ipsa(h, h, c, h) == flops_msa(h, h, c)

    @given(k=st.integers(1, 100), m=st.integers(1, 100), c=st.integers(1, 1000), n=st.integers(1, 8))
    def test_strictly_increasing(self, k, m, c, n):
        h, w = k * n, m * n
        assert flops_msa(h + 1, w, c) > flops_msa(h, w, c) < flops_msa(h, w + 1, c)
        assert flops_msa(h, w, c + 1) > flops_msa(h, w, c)
        for f in (flops_ipsa, flops_cpsa):
            assert f(h + n, w, c, n) > f(h, w, c, n)
            assert f(h, w + n, c, n) > f(h, w, c, n)
            assert f(h, w, c + 1, n) > f(h, w, c, n)
        assert flops_ipsa(2 * h, 2 * w, c, 2 * n) > flops_ipsa(2 * h, 2 * w, c, n)

    def test_cpsa_is_not_monotone_in_patch_size(self):
        # larger patches trade projection cost for attention cost
        assert flops_cpsa(56, 56, 96, 4) > flops_cpsa(56, 56, 96, 7) < flops_cpsa(56, 56, 96, 8)

    def test_mlp(self):
        assert flops_mlp(7, 7, 768) == 2 * 49 * 768 * 3072


class TestModelFlops:
    @pytest.mark.parametrize("name,target", [("cat-t", 2.8e9), ("cat-s", 5.9e9), ("cat-b", 8.9e9)])
    def test_within_five_percent(self, name, target):
        assert abs(model_flops(preset(name), 224, 224).total / target - 1) <= 0.05

    def test_frozen_totals(self):
        # closed-form sums of the per-layer terms, evaluated outside the package
        assert [model_flops(preset(k), 224, 224).total for k in ("cat-t", "cat-s", "cat-b")] == [
            2_770_478_080, 6_063_207_936, 8_928_056_832]

    def test_report_consistency(self):
        rep = model_flops(preset("cat-t"), 224, 224)
        assert rep.total == sum(e.macs for e in rep.entries) == sum(rep.stage_totals.values())
        assert all(isinstance(e.macs, int) and e.macs >= 0 for e in rep.entries)
        assert sum(rep.by_kind().values()) == rep.total
        assert rep.by_kind()["cpsa"] == sum(flops_cpsa(224 // r, 224 // r, c, 7) * d for r, c, d in
                                            zip((4, 8, 16, 32), (64, 128, 256, 512), (1, 1, 3, 1)))

    def test_zero_cabs_counts_only_linear_maps(self):
        cfg = preset("cat-t").replace(depths=(0, 0, 0, 0))
        rep = model_flops(cfg, 224, 224)
        assert set(rep.by_kind()) == {"embed", "projection", "head"}
        expected = 56 * 56 * 48 * 64 + sum((224 // r) ** 2 * 4 * c * 2 * c
                                           for r, c in zip((8, 16, 32), (64, 128, 256))) + 512 * 1000
        assert rep.total == expected

    def test_serialisations(self):
        rep = model_flops(preset("toy"), 64, 64)
        d = json.loads(rep.to_json())
        assert d["total"] == rep.total and "MAC" in d["convention"]
        assert "total" in rep.to_text() and f"{rep.total:,}" in rep.to_text()

    def test_invalid_size(self):
        with pytest.raises(DivisibilityError):
            model_flops(preset("cat-s"), 200, 224)


class TestParamCounts:
    @pytest.mark.parametrize("name,target", [("cat-t", 17e6), ("cat-s", 37e6), ("cat-b", 52e6)])
    def test_within_five_percent(self, name, target):
        assert abs(param_count(preset(name)) / target - 1) <= 0.05

    def test_frozen_totals(self):
        assert [param_count(preset(k)) for k in ("cat-t", "cat-s", "cat-b", "toy")] == [
            16_870_996, 37_294_258, 51_531_922, 2_987_344]

    def test_count_params_matches_built_model(self):
        m = build(preset("toy"))
        total, per_layer = count_params(m)
        assert total == param_count(preset("toy")) == sum(p.size for p in m.params.values())
        assert per_layer["head"] == 256 * 2 + 2
        assert per_layer["stages.0.blocks.0.cpsa"] == 4 * (4 * 4 + 4)

    def test_linear_with_bias(self):
        class OneLinear:
            params = {"fc.weight": np.zeros((5, 5)), "fc.bias": np.zeros(5)}

        assert count_params(OneLinear()) == (30, {"fc": 30})

    def test_breakdown_groups(self):
        b = param_breakdown(preset("cat-s"))
        assert sum(b.values()) == param_count(preset("cat-s"))
        proj = PatchProjectionParams.init(96, np.random.default_rng(0))
        assert b["stages.1.projection"] == sum(t.size for t in proj.named().values())

    def test_without_abs_pos(self):
        cfg = preset("cat-t")
        assert param_count(cfg) - param_count(cfg.replace(abs_pos=False)) == 56 * 56 * 64
