import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cat_backbone.backbone import build, forward_classify
from cat_backbone.checkpoint import (
    Container,
    decode,
    encode,
    load_checkpoint,
    load_state,
    read_container,
    save_checkpoint,
    write_container,
)
from cat_backbone.config import CatConfig
from cat_backbone.errors import CheckpointFormatError

SMALL = CatConfig(dims=(8, 16), depths=(1, 1), heads=(1, 2), patch_size=2, base_input=(32, 32),
                  num_classes=2, name="small")


def hand_encoded() -> bytes:
    return (b"CATW" + (1).to_bytes(4, "little") + (7).to_bytes(8, "little") + b'{"a":1}'
            + (1).to_bytes(8, "little")
            + (1).to_bytes(8, "little") + b"x" + b"\x00" + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
            + bytes.fromhex("0000803f") + bytes.fromhex("00000040"))


class TestContainer:
    def test_encode_matches_hand_layout(self):
        c = Container('{"a":1}', {"x": np.array([1.0, 2.0], np.float32)})
        assert encode(c) == hand_encoded()

    def test_decode_hand_layout(self):
        c = decode(hand_encoded())
        assert c.config == {"a": 1}
        assert list(c.tensors) == ["x"]
        assert c.tensors["x"].dtype == np.float32 and c.tensors["x"].tolist() == [1.0, 2.0]

    def test_float64_and_scalar_rank(self):
        c = Container("{}", {"s": np.array(3.5), "m": np.arange(6.0).reshape(2, 3)})
        back = decode(encode(c))
        assert back.tensors["s"].shape == () and back.tensors["s"] == 3.5
        np.testing.assert_array_equal(back.tensors["m"], c.tensors["m"])

    @settings(max_examples=30, deadline=None)
    @given(arrays=st.dictionaries(
        st.text(min_size=1, max_size=12),
        hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                   elements=st.floats(-1e6, 1e6, width=32)),
        max_size=4))
    def test_round_trip_is_byte_identical(self, arrays):
        raw = encode(Container('{"k": [1, 2]}', arrays))
        back = decode(raw)
        assert list(back.tensors) == list(arrays)
        for k, v in arrays.items():
            assert back.tensors[k].dtype == v.dtype
            np.testing.assert_array_equal(back.tensors[k], v)
        assert encode(back) == raw

    def test_unsupported_dtype(self):
        with pytest.raises(TypeError):
            encode(Container("{}", {"i": np.arange(3)}))

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b[:10], "truncated"),
        (lambda b: b + b"\x00", "trailing"),
        (lambda b: b[:40] + b"\x07" + b[41:], "dtype"),  # byte 40: dtype code
        (lambda b: b"", "truncated"),
    ], ids=["magic", "version", "short_data", "short_header", "trailing", "dtype", "empty"])
    def test_corruption_is_detected(self, mutate, match):
        with pytest.raises(CheckpointFormatError, match=match):
            decode(mutate(hand_encoded()))

    def test_duplicate_names(self):
        one = hand_encoded()
        record = one[31:]
        dup = one[:23] + (2).to_bytes(8, "little") + record + record
        with pytest.raises(CheckpointFormatError, match="duplicate"):
            decode(dup)

    def test_write_is_atomic_and_readable(self, tmp_path):
        path = tmp_path / "c.catw"
        write_container(path, Container("{}", {"a": np.ones(2, np.float32)}))
        assert read_container(path).tensors["a"].tolist() == [1.0, 1.0]
        assert not (tmp_path / "c.catw.tmp").exists()


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_save_load_bit_exact(self, tmp_path, dtype, rng):
        m = build(SMALL, seed=5, dtype=dtype)
        for p in m.params.values():
            p.data = rng.standard_normal(p.shape).astype(dtype)
        path = tmp_path / "m.catw"
        save_checkpoint(m, path)
        m2 = load_checkpoint(path)
        assert m2.config == SMALL and m2.dtype == dtype
        for k, v in m.state_dict().items():
            assert m2.params[k].data.tobytes() == v.tobytes()
        x = rng.standard_normal((2, 32, 32, 3)).astype(dtype)
        np.testing.assert_array_equal(forward_classify(m2, x).data, forward_classify(m.eval(), x).data)

    def test_resave_is_byte_identical(self, tmp_path):
        save_checkpoint(build(SMALL, seed=1), tmp_path / "a.catw")
        save_checkpoint(load_checkpoint(tmp_path / "a.catw"), tmp_path / "b.catw")
        assert (tmp_path / "a.catw").read_bytes() == (tmp_path / "b.catw").read_bytes()

    def test_mismatched_config_names_the_tensor(self, tmp_path):
        save_checkpoint(build(SMALL), tmp_path / "m.catw")
        other = SMALL.replace(dims=(16, 32), heads=(2, 2))
        with pytest.raises(CheckpointFormatError, match="patch_embed"):
            load_checkpoint(tmp_path / "m.catw", config=other)

    def test_missing_and_unknown_names(self):
        m = build(SMALL)
        state = dict(m.state_dict())
        state.pop("head.bias")
        with pytest.raises(CheckpointFormatError, match="head.bias"):
            load_state(build(SMALL), state)
        state["head.bias"] = np.zeros(2, np.float32)
        state["extra"] = np.zeros(1, np.float32)
        with pytest.raises(CheckpointFormatError, match="extra"):
            load_state(build(SMALL), state)

    def test_truncated_checkpoint(self, tmp_path):
        save_checkpoint(build(SMALL), tmp_path / "m.catw")
        raw = (tmp_path / "m.catw").read_bytes()
        (tmp_path / "cut.catw").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(tmp_path / "cut.catw")

    def test_invalid_embedded_config(self, tmp_path):
        write_container(tmp_path / "bad.catw", Container('{"dims": [8, 9]}', {}))
        with pytest.raises(CheckpointFormatError, match="config"):
            load_checkpoint(tmp_path / "bad.catw")
