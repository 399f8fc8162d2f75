import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatenet.foldconv import (
    ABLATION_VARIANTS,
    AsppConfig,
    aspp_forward,
    aspp_param_shapes,
    fold,
    folded_atrous_conv,
    receptive_field,
    unfold,
)
from gatenet.reference import folded_conv_gather
from gatenet.tensor import Tensor, conv2d


def random_params(config, in_channels, seed=0):
    rng = np.random.default_rng(seed)
    return {k: Tensor(rng.normal(0, 0.3, size=s)) for k, s in aspp_param_shapes(config, in_channels).items()}


class TestFold:
    def test_index_mapping(self):
        x = Tensor(np.arange(1.0, 17.0).reshape(1, 1, 4, 4))
        out = fold(x).data[0]
        np.testing.assert_array_equal(out[0], [[1, 3], [9, 11]])
        np.testing.assert_array_equal(out[1], [[2, 4], [10, 12]])
        np.testing.assert_array_equal(out[2], [[5, 7], [13, 15]])
        np.testing.assert_array_equal(out[3], [[6, 8], [14, 16]])

    def test_shape(self):
        assert fold(Tensor(np.zeros((1, 3, 4, 4)))).shape == (1, 12, 2, 2)

    def test_odd_shape_rounds_up(self):
        assert fold(Tensor(np.zeros((2, 1, 5, 3)))).shape == (2, 4, 3, 2)

    def test_constant(self):
        np.testing.assert_array_equal(fold(Tensor(np.full((1, 2, 6, 4), 1.25))).data, 1.25)

    def test_channel_formula(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 4, 6))
        out = fold(Tensor(x)).data
        for c in range(3):
            for dy in range(2):
                for dx in range(2):
                    np.testing.assert_array_equal(out[0, 4 * c + 2 * dy + dx], x[0, c, dy::2, dx::2])

    def test_is_permutation_for_even_dims(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 6, 8))
        np.testing.assert_array_equal(np.sort(fold(Tensor(x)).data.ravel()), np.sort(x.ravel()))


class TestUnfold:
    def test_inverse_of_example(self):
        x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(unfold(fold(Tensor(x)), (4, 4)).data, x)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
    def test_round_trip(self, n, c, h, w, seed):
        x = np.random.default_rng(seed).normal(size=(n, c, h, w))
        back = unfold(fold(Tensor(x)), (h, w)).data
        assert back.shape == x.shape
        assert back.tobytes() == x.tobytes()

    def test_channels_must_divide_by_four(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            unfold(Tensor(np.zeros((1, 3, 2, 2))), (4, 4))

    def test_inconsistent_size(self):
        with pytest.raises(ValueError):
            unfold(Tensor(np.zeros((1, 4, 2, 2))), (7, 4))


class TestFoldedAtrousConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 2, 6, 6))
        w = np.zeros((8, 8, 3, 3))
        w[np.arange(8), np.arange(8), 1, 1] = 1.0
        out = folded_atrous_conv(Tensor(x), Tensor(w), Tensor(np.zeros(8)), 2)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("rate", [1, 2, 4, 6])
    def test_gather_oracle(self, rate):
        rng = np.random.default_rng(rate)
        x, w, b = rng.normal(size=(1, 2, 12, 12)), rng.normal(size=(8, 8, 3, 3)), rng.normal(size=8)
        got = folded_atrous_conv(Tensor(x), Tensor(w), Tensor(b), rate).data
        np.testing.assert_allclose(got, folded_conv_gather(x, w, b, rate), rtol=0, atol=1e-9)

    def test_gather_oracle_odd_size(self):
        rng = np.random.default_rng(9)
        x, w = rng.normal(size=(2, 1, 7, 9)), rng.normal(size=(4, 4, 3, 3))
        got = folded_atrous_conv(Tensor(x), Tensor(w), None, 2).data
        assert got.shape == (2, 1, 7, 9)
        np.testing.assert_allclose(got, folded_conv_gather(x, w, None, 2), rtol=0, atol=1e-9)

    def test_out_channels_divisible(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            folded_atrous_conv(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((6, 4, 3, 3))), None, 1)

    def test_in_channels_checked(self):
        with pytest.raises(ValueError, match="4\\*c"):
            folded_atrous_conv(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((4, 4, 3, 3))), None, 1)


class TestReceptiveField:
    def test_plain_atrous(self):
        got = receptive_field("plain_atrous", 4, 3, (10, 10))
        assert got == {(10 + dy, 10 + dx) for dy in (-4, 0, 4) for dx in (-4, 0, 4)}

    def test_folded_nine_blocks(self):
        got = receptive_field("folded_atrous", 2, 3, (12, 12))
        assert len(got) == 36
        blocks = {(r // 2, c // 2) for r, c in got}
        assert blocks == {(6 + dy, 6 + dx) for dy in (-2, 0, 2) for dx in (-2, 0, 2)}
        # every block is a full 2x2 connected region
        assert all({(2 * by + i, 2 * bx + j) for i in (0, 1) for j in (0, 1)} <= got for by, bx in blocks)

    def test_pointwise(self):
        assert receptive_field("plain_atrous", 1, 1, (3, 5)) == {(3, 5)}

    @pytest.mark.parametrize("rate", [1, 2, 3])
    def test_folded_is_four_times_plain(self, rate):
        assert len(receptive_field("folded_atrous", rate, 3, (13, 13))) == 4 * len(
            receptive_field("plain_atrous", rate, 3, (13, 13)))


class TestAspp:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            AsppConfig(rates=())
        with pytest.raises(ValueError):
            AsppConfig(rates=(0, 2))
        with pytest.raises(ValueError):
            AsppConfig(out_channels=0)
        with pytest.raises(ValueError):
            AsppConfig(conv_kind="deformable")

    def test_config_round_trip(self):
        cfg = AsppConfig("plain_atrous", "dense", (1, 3), False, True, 8)
        assert AsppConfig.from_dict(cfg.to_dict()) == cfg

    def test_degenerate_assembly(self):
        cfg = AsppConfig("folded_atrous", "parallel", (2,), False, False, 4)
        params = random_params(cfg, 3)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 8, 8)))
        got = aspp_forward(x, cfg, params).data
        branch = folded_atrous_conv(x, params["atrous0.w"], params["atrous0.b"], 2)
        want = conv2d(branch, params["fuse.w"], params["fuse.b"]).data
        np.testing.assert_array_equal(got, want)

    @pytest.mark.parametrize("name", sorted(ABLATION_VARIANTS))
    def test_preserves_spatial_size(self, name):
        cfg = ABLATION_VARIANTS[name]
        x = Tensor(np.random.default_rng(2).normal(size=(2, 6, 6, 10)))
        out = aspp_forward(x, cfg, random_params(cfg, 6))
        assert out.shape == (2, cfg.out_channels, 6, 10)

    def test_dense_differs_from_parallel(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 4, 8, 8)))
        par = AsppConfig("folded_atrous", "parallel", out_channels=8)
        dense = AsppConfig("folded_atrous", "dense", out_channels=8)
        p_par, p_dense = random_params(par, 4), random_params(dense, 4)
        # share every weight that has the same shape; dense rate convs see wider inputs
        shared = {k: v for k, v in p_par.items() if v.shape == p_dense[k].shape}
        p_dense.update(shared)
        assert not np.allclose(aspp_forward(x, par, p_par).data, aspp_forward(x, dense, p_dense).data)

    def test_dense_input_widths(self):
        shapes = aspp_param_shapes(AsppConfig("plain_atrous", "dense", (2, 4, 6), False, False, 32), 64)
        assert [shapes[f"atrous{i}.w"][1] for i in range(3)] == [64, 96, 128]
        assert shapes["fuse.w"] == (32, 96, 1, 1)

    def test_folded_weight_shapes(self):
        shapes = aspp_param_shapes(AsppConfig(), 64)
        assert shapes["atrous0.w"] == (128, 256, 3, 3)
        assert shapes["pw.w"] == (32, 64, 1, 1)
        assert shapes["fuse.w"] == (32, 5 * 32, 1, 1)

    def test_missing_param(self):
        cfg = AsppConfig(out_channels=4)
        params = random_params(cfg, 2)
        del params["pool.w"]
        with pytest.raises(ValueError, match="pool.w"):
            aspp_forward(Tensor(np.zeros((1, 2, 4, 4))), cfg, params)

    def test_wrong_param_shape(self):
        cfg = AsppConfig(out_channels=4)
        params = random_params(cfg, 2)
        params["fuse.w"] = Tensor(np.zeros((4, 3, 1, 1)))
        with pytest.raises(ValueError):
            aspp_forward(Tensor(np.zeros((1, 2, 4, 4))), cfg, params)
