import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcpaseg import tensor as T
from dcpaseg.errors import (
    CheckpointShapeError,
    CorruptHeaderError,
    GeometryError,
    ShapeError,
    TruncatedCheckpointError,
)
from dcpaseg.unet import (
    R1,
    R2,
    Checkpoint,
    ModelConfig,
    _layer_shapes,
    build,
    geometry,
    geometry_for_input,
    load,
    load_checkpoint,
    margin_for_depth,
    param_count,
    save,
)
from oracles import trace_input_extent, unet_param_count_by_hand

TINY = ModelConfig(depth=2, base_width=2, seed=3)


@pytest.fixture
def tiny():
    return build(TINY)


@pytest.fixture
def tiny_input(rng):
    geo = geometry(TINY, 8)
    return rng.random((3, geo.input_h, geo.input_w)).astype(np.float32)


class TestConfig:
    def test_r1_widths(self):
        assert R1.widths() == [64, 128, 256, 512, 1024]

    def test_r2_is_half_width(self):
        assert R2.depth == 4 and R2.base_width == 32

    @pytest.mark.parametrize("kwargs", [{"depth": 0}, {"base_width": 0}, {"num_classes": 3}, {"in_channels": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_odd_width_cannot_halve(self):
        with pytest.raises(ValueError):
            ModelConfig(base_width=3).halved()


class TestParamCount:
    def test_r1_range(self):
        assert 30e6 <= param_count(R1) <= 32e6

    def test_r2_range(self):
        assert 7e6 <= param_count(R2) <= 8.5e6

    @pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
    @pytest.mark.parametrize("width", [1, 4, 8, 64])
    def test_matches_hand_count(self, depth, width):
        assert param_count(ModelConfig(depth=depth, base_width=width)) == unet_param_count_by_hand(depth, width)

    def test_matches_instantiated_arrays(self):
        cfg = ModelConfig(depth=3, base_width=4)
        assert param_count(cfg) == sum(p.data.size for p in build(cfg).parameters())

    def test_single_1x1_conv(self):
        # the head of a width-2 net is a 1x1 conv from 2 to 2 channels
        params = build(ModelConfig(depth=1, base_width=2)).params
        assert params["head.weight"].data.size + params["head.bias"].data.size == 6

    @pytest.mark.parametrize("width", [8, 16, 32, 64])
    def test_width_halving_ratio(self, width):
        ratio = param_count(ModelConfig(base_width=width)) / param_count(ModelConfig(base_width=width // 2))
        assert 3.8 <= ratio <= 4.5


class TestGeometry:
    def test_388_572(self):
        geo = geometry(R1, 388)
        assert (geo.input_w, geo.input_h, geo.margin) == (572, 572, 92)

    def test_inverse_572(self):
        geo = geometry_for_input(R1, 572)
        assert (geo.output_w, geo.output_h) == (388, 388)

    def test_836_gives_1020_not_1040(self):
        geo = geometry(R1, 836)
        assert geo.input_w == 1020
        assert geo.input_w != 1040

    def test_1040_is_not_a_valid_input(self):
        with pytest.raises(GeometryError):
            geometry_for_input(R1, 1040)

    def test_depth1_margin(self):
        cfg = ModelConfig(depth=1, base_width=1)
        geo = geometry(cfg, 4)
        assert geo.input_w == 20 and geo.margin == 8

    @pytest.mark.parametrize("depth, margin", [(1, 8), (2, 20), (3, 44), (4, 92)])
    def test_margins(self, depth, margin):
        assert margin_for_depth(depth) == margin

    def test_depth3_100(self):
        assert geometry(ModelConfig(depth=3, base_width=8), 100).input_w == 188

    def test_rectangular(self):
        geo = geometry(R1, (388, 196))
        assert (geo.input_w, geo.input_h) == (572, 380)

    def test_invalid_size_suggests_neighbors(self):
        with pytest.raises(GeometryError, match="388") as info:
            geometry(R1, 389)
        assert "404" in str(info.value)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 600))
    def test_matches_trace(self, depth, out):
        expected = trace_input_extent(depth, out)
        cfg = ModelConfig(depth=depth, base_width=1)
        if expected is None:
            with pytest.raises(GeometryError):
                geometry(cfg, out)
        else:
            geo = geometry(cfg, out)
            assert geo.input_w == expected
            assert geometry_for_input(cfg, geo.input_w).output_w == out


class TestForward:
    def test_minimal_net_on_20x20(self, rng):
        model = build(ModelConfig(depth=1, base_width=1))
        y = model(rng.random((3, 20, 20)).astype(np.float32))
        assert y.shape == (2, 4, 4)

    def test_probabilities_sum_to_one(self, tiny, tiny_input):
        y = tiny(tiny_input).data
        np.testing.assert_allclose(y.sum(axis=0), 1.0, atol=1e-6)

    def test_deterministic(self, tiny, tiny_input):
        np.testing.assert_array_equal(tiny(tiny_input).data, tiny(tiny_input).data)

    def test_batch_matches_single(self, tiny, tiny_input):
        batch = np.stack([tiny_input, tiny_input[:, ::-1].copy()])
        out = tiny(batch).data
        np.testing.assert_allclose(out[0], tiny(tiny_input).data, atol=1e-6)

    def test_wrong_size_rejected(self, tiny):
        with pytest.raises(GeometryError):
            tiny(np.zeros((3, 41, 41), np.float32))

    def test_wrong_channels_rejected(self, tiny):
        with pytest.raises(ShapeError):
            tiny(np.zeros((1, 48, 48), np.float32))

    def test_untrained_mean_near_half(self, rng):
        cfg = ModelConfig(depth=2, base_width=4)
        x_size = geometry(cfg, 16).input_w
        means = []
        for seed in range(10):
            model = build(ModelConfig(depth=2, base_width=4, seed=seed))
            means.append(model(rng.random((3, x_size, x_size)).astype(np.float32)).data.mean(axis=(1, 2)))
        # single seeds carry an init-dependent logit offset; the seed average does not
        np.testing.assert_allclose(np.mean(means, axis=0), 0.5, atol=0.2)

    def test_seed_controls_init(self):
        a, b = build(ModelConfig(depth=1, base_width=2, seed=1)), build(ModelConfig(depth=1, base_width=2, seed=2))
        assert not np.array_equal(a.params["enc0.conv1.weight"].data, b.params["enc0.conv1.weight"].data)
        assert np.all(a.params["enc0.conv1.bias"].data == 0)

    @settings(max_examples=12, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3))
    def test_output_shape_matches_geometry(self, depth, k):
        cfg = ModelConfig(depth=depth, base_width=1)
        out = next(o for o in range(k, 200) if _valid(cfg, o))
        geo = geometry(cfg, out)
        y = build(cfg)(np.zeros((3, geo.input_h, geo.input_w), np.float32))
        assert y.shape == (2, geo.output_h, geo.output_w)

    def test_gradients_reach_every_parameter(self, tiny, tiny_input):
        disc = np.stack([np.zeros((8, 8)), np.ones((8, 8))]).astype(np.float32)
        grads = T.backward(T.sum(T.mul(tiny(tiny_input), T.Tensor(disc))))
        assert set(grads) == set(tiny.parameters())
        assert all(g.shape == p.shape for p, g in grads.items())


def _valid(cfg, out):
    try:
        geometry(cfg, out)
        return True
    except GeometryError:
        return False


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny, tmp_path):
        path = tmp_path / "m.ckpt"
        save(tiny, path, {"epoch": 4, "val_f1": 0.5})
        ckpt = load_checkpoint(path)
        assert ckpt.config == TINY
        assert ckpt.metadata == {"epoch": 4, "val_f1": 0.5}
        for name, arr in tiny.state_dict().items():
            assert ckpt.params[name].tobytes() == arr.tobytes()

    def test_forward_identical_after_load(self, tiny, tiny_input, tmp_path):
        path = tmp_path / "m.ckpt"
        save(tiny, path)
        np.testing.assert_array_equal(load(path)(tiny_input).data, tiny(tiny_input).data)

    def test_checkpoint_object_round_trip(self, tiny, tmp_path):
        path = tmp_path / "c.ckpt"
        save(Checkpoint(TINY, tiny.state_dict(), {"epoch": 1}), path)
        assert load_checkpoint(path).metadata == {"epoch": 1}

    def test_starts_with_magic_and_version(self, tiny, tmp_path):
        path = tmp_path / "m.ckpt"
        save(tiny, path)
        assert path.read_bytes()[:5] == b"DCPA\x01"

    def test_truncated(self, tiny, tmp_path):
        path = tmp_path / "m.ckpt"
        save(tiny, path)
        data = path.read_bytes()
        for cut in (3, 7, len(data) // 2, len(data) - 1):
            path.write_bytes(data[:cut])
            with pytest.raises(TruncatedCheckpointError):
                load_checkpoint(path)

    def test_bad_magic(self, tiny, tmp_path):
        path = tmp_path / "m.ckpt"
        save(tiny, path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CorruptHeaderError):
            load_checkpoint(path)

    def test_bad_version(self, tiny, tmp_path):
        path = tmp_path / "m.ckpt"
        save(tiny, path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptHeaderError, match="version"):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        state = build(TINY).state_dict()
        state["head.weight"] = np.zeros((2, 3, 1, 1), np.float32)
        path = tmp_path / "m.ckpt"
        save(Checkpoint(TINY, state), path)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)

    def test_errors_are_distinct(self):
        assert len({CorruptHeaderError, TruncatedCheckpointError, CheckpointShapeError}) == 3
        assert not issubclass(TruncatedCheckpointError, CorruptHeaderError)

    def test_r2_about_quarter_of_r1(self, tmp_path):
        # zero-valued state keeps memory low; only the file size matters
        sizes = {}
        for name, cfg in (("r1", R1), ("r2", R2)):
            state = {}
            for layer, wshape, nbias, _ in _layer_shapes(cfg):
                state[f"{layer}.weight"] = np.zeros(wshape, np.float32)
                state[f"{layer}.bias"] = np.zeros(nbias, np.float32)
            save(Checkpoint(cfg, state), tmp_path / f"{name}.ckpt")
            sizes[name] = os.path.getsize(tmp_path / f"{name}.ckpt")
        assert 3.8 <= sizes["r1"] / sizes["r2"] <= 4.5
