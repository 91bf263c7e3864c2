import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cat_backbone import analysis
from cat_backbone.backbone import build, check_input_size, drop_path_schedule, forward_classify, forward_features
from cat_backbone.config import CatConfig, preset
from cat_backbone.errors import DivisibilityError, ShapeError

TINY = CatConfig(dims=(8, 16, 32, 64), depths=(1, 1, 1, 1), heads=(1, 2, 2, 4), patch_size=2,
                 base_input=(64, 64), num_classes=3, name="tiny")


def quiet(cfg):
    return cfg.replace(drop_path_rate=0.0, ipsa_attn_dropout=0.0, cpsa_attn_dropout=0.0)


@pytest.fixture(scope="module")
def tiny64():
    return build(TINY, seed=0, dtype=np.float64)


class TestBuild:
    def test_same_seed_same_weights(self):
        a, b = build(TINY, seed=3).state_dict(), build(TINY, seed=3).state_dict()
        assert list(a) == list(b)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_different_seed_different_weights(self):
        a, b = build(TINY, seed=3).state_dict(), build(TINY, seed=4).state_dict()
        assert not np.array_equal(a["stages.0.blocks.0.ipsa1.w_q"], b["stages.0.blocks.0.ipsa1.w_q"])

    @pytest.mark.parametrize("name", ["toy", "cat-t"])
    def test_built_count_matches_analytic_count(self, name):
        m = build(preset(name))
        assert sum(p.size for p in m.params.values()) == analysis.param_count(preset(name))

    def test_parameter_names(self):
        names = list(build(TINY).params)
        assert names[0].startswith("patch_embed.")
        assert "abs_pos" in names and "stages.0.projection.weight" not in names
        assert "stages.1.projection.weight" in names and "stages.3.projection.bias" not in names
        assert names[-1] == "head.bias"
        assert len(names) == len(set(names))

    def test_abs_pos_starts_at_zero_and_can_be_disabled(self):
        m = build(TINY)
        assert m.abs_pos.pos.shape == (16, 16, 8) and not m.abs_pos.pos.data.any()
        assert build(TINY.replace(abs_pos=False)).abs_pos is None

    def test_drop_path_schedule(self):
        rates = drop_path_schedule(preset("cat-b"))
        assert len(rates) == 3 * 9
        assert rates[0] == 0.0 and rates[-1] == pytest.approx(0.3)
        assert all(a < b for a, b in zip(rates, rates[1:]))
        m = build(preset("cat-b"))
        got = [r for blocks in m.stages for cab in blocks for r in cab.drop_path_rates]
        assert got == rates


class TestShapes:
    def test_cat_s_pyramid_at_224(self):
        pyr = forward_features(build(preset("cat-s")), np.zeros((1, 224, 224, 3), np.float32))
        assert [f.shape for f in pyr] == [(1, 56, 56, 96), (1, 28, 28, 192), (1, 14, 14, 384), (1, 7, 7, 768)]

    @settings(max_examples=25, deadline=None)
    @given(hk=st.integers(1, 4), wk=st.integers(1, 4), batch=st.integers(1, 2))
    def test_shape_law(self, hk, wk, batch):
        m = build(TINY)
        H, W = 64 * hk, 64 * wk
        pyr = forward_features(m, np.zeros((batch, H, W, 3), np.float32))
        for f, rate, C in zip(pyr, (4, 8, 16, 32), TINY.dims):
            assert f.shape == (batch, H // rate, W // rate, C)
        assert pyr.valid == [(H // r, W // r) for r in (4, 8, 16, 32)]

    def test_logits_shape(self, tiny64, rng):
        assert forward_classify(tiny64, rng.standard_normal((2, 64, 128, 3))).shape == (2, 3)


class TestInvariants:
    def test_batch_permutation_equivariance(self, tiny64, rng):
        x = rng.standard_normal((3, 64, 64, 3))
        perm = np.array([2, 0, 1])
        a = forward_features(tiny64, x).F4.data
        b = forward_features(tiny64, x[perm]).F4.data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_samples_are_independent(self, tiny64, rng):
        x = rng.standard_normal((2, 64, 64, 3))
        both = forward_classify(tiny64, x).data
        alone = forward_classify(tiny64, x[1:]).data
        np.testing.assert_allclose(both[1:], alone, atol=1e-12)

    def test_eval_is_deterministic(self, rng):
        m = build(TINY).eval()
        x = rng.standard_normal((2, 64, 64, 3)).astype(np.float32)
        np.testing.assert_array_equal(forward_classify(m, x).data, forward_classify(m, x).data)

    def test_train_equals_eval_without_stochastic_layers(self, rng):
        m = build(quiet(TINY), dtype=np.float64)
        x = rng.standard_normal((2, 64, 64, 3))
        ev = forward_classify(m.eval(), x).data
        tr = forward_classify(m.train(), x, np.random.default_rng(0)).data
        np.testing.assert_array_equal(tr, ev)

    def test_training_mode_is_stochastic(self, rng):
        m = build(TINY, dtype=np.float64).train()
        x = rng.standard_normal((4, 64, 64, 3))
        a = forward_classify(m, x, np.random.default_rng(0)).data
        b = forward_classify(m, x, np.random.default_rng(1)).data
        assert not np.array_equal(a, b)
        with pytest.raises(ValueError):
            forward_classify(m, x)

    def test_abs_pos_resized_for_other_sizes(self, rng):
        m = build(TINY, dtype=np.float64)
        m.abs_pos.pos.data = rng.standard_normal(m.abs_pos.pos.shape)
        assert forward_features(m, np.zeros((1, 128, 64, 3))).F1.shape == (1, 32, 16, 8)


class TestInputSizeContract:
    def test_indivisible_input_names_valid_size(self):
        m = build(TINY)
        with pytest.raises(DivisibilityError, match="128x64"):
            forward_features(m, np.zeros((1, 70, 64, 3), np.float32))

    def test_check_input_size(self):
        assert check_input_size(preset("cat-s"), 224, 448) == (224, 448)
        with pytest.raises(DivisibilityError, match="448x224"):
            check_input_size(preset("cat-s"), 230, 224)

    def test_pad_mode(self, rng):
        cfg = quiet(TINY).replace(pad_input=True)
        m = build(cfg, dtype=np.float64)
        x = rng.standard_normal((1, 70, 40, 3))
        pyr = forward_features(m, x)
        assert pyr.F1.shape == (1, 32, 16, 8)
        assert pyr.valid == [(18, 10), (9, 5), (5, 3), (3, 2)]
        assert [f.shape[1:3] for f in pyr.cropped()] == pyr.valid
        padded = np.zeros((1, 128, 64, 3))
        padded[:, :70, :40] = x
        np.testing.assert_array_equal(forward_features(m, padded).F4.data, pyr.F4.data)
        assert forward_classify(m, x).shape == (1, 3)

    def test_wrong_channels_or_rank(self):
        m = build(TINY)
        with pytest.raises(ShapeError):
            forward_features(m, np.zeros((1, 64, 64, 1), np.float32))
        with pytest.raises(ShapeError):
            forward_features(m, np.zeros((64, 64, 3), np.float32))
