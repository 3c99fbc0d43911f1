"""Layer tests: shape contracts, init determinism, parameter counts."""

import numpy as np
import pytest

from dgatt import tensor as T
from dgatt.nn import (
    ConvBlock,
    ConvBlockSpec,
    Dense,
    InitSpec,
    Initializer,
    conv_stack_param_count,
    count_params,
)
from dgatt.tensor import ShapeError, Tape, Tensor


def make_init(seed=0, dtype=np.float64):
    return Initializer(InitSpec(seed=seed), dtype=dtype)


class TestConvBlock:
    def test_full_scale_first_block_geometry(self):
        block = ConvBlock(3, ConvBlockSpec(64, convs=2), init=make_init(dtype=np.float32))
        out = block(Tensor(np.zeros((224, 224, 3), dtype=np.float32)))
        assert out.shape == (112, 112, 64)

    def test_toy_block_geometry(self):
        block = ConvBlock(3, ConvBlockSpec(8, convs=1), init=make_init())
        out = block(Tensor(np.zeros((64, 64, 3))))
        assert out.shape == (32, 32, 8)

    def test_same_init_spec_identical_parameters(self):
        b1 = ConvBlock(3, ConvBlockSpec(8, convs=2), init=make_init(seed=9))
        b2 = ConvBlock(3, ConvBlockSpec(8, convs=2), init=make_init(seed=9))
        for (_, p1), (_, p2) in zip(b1.parameters(), b2.parameters()):
            assert np.array_equal(p1.data, p2.data)

    def test_zero_channels_rejected(self):
        with pytest.raises(ValueError):
            ConvBlock(3, ConvBlockSpec(0), init=make_init())


class TestDense:
    def test_zero_weights_bias_everywhere(self):
        init = make_init()
        layer = Dense(4, 3, init=init)
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = np.array([1.0, 2.0, 3.0])
        out = layer(Tensor(np.random.default_rng(0).normal(size=(5, 5, 4))))
        assert out.shape == (5, 5, 3)
        assert np.allclose(out.data, [1.0, 2.0, 3.0])

    def test_spatial_axes_preserved(self):
        layer = Dense(64, 256, init=make_init())
        out = layer(Tensor(np.zeros((7, 7, 64))))
        assert out.shape == (7, 7, 256)

    def test_hand_case(self):
        layer = Dense(2, 2, init=make_init())
        layer.weight.data[:] = np.array([[1.0, 2.0], [3.0, 4.0]])
        layer.bias.data[:] = 0.0
        out = layer(Tensor(np.array([[1.0, 2.0]])))
        assert np.allclose(out.data, [[7.0, 10.0]])

    def test_width_mismatch(self):
        layer = Dense(4, 2, init=make_init())
        with pytest.raises(ShapeError):
            layer(Tensor(np.zeros((3, 5))))


class TestParamCounts:
    def test_dense_with_bias(self):
        layer = Dense(64, 256, init=make_init())
        assert count_params(layer) == 16640
        assert layer.param_count() == 16640

    def test_vgg16_stack_arithmetic(self):
        # independent per-layer oracle
        widths, convs = [64, 128, 256, 512, 512], (2, 2, 3, 3, 3)
        expected, cin = 0, 3
        for w, n in zip(widths, convs):
            for _ in range(n):
                expected += 3 * 3 * cin * w + w
                cin = w
        assert expected == 14_714_688
        assert conv_stack_param_count(3, widths, convs) == expected

    def test_built_block_matches_arithmetic(self):
        block = ConvBlock(3, ConvBlockSpec(8, convs=2), init=make_init())
        assert count_params(block) == conv_stack_param_count(3, [8], [2])

    def test_composite_is_sum_of_parts(self):
        b1 = ConvBlock(3, ConvBlockSpec(4, convs=1), init=make_init())
        b2 = ConvBlock(4, ConvBlockSpec(8, convs=2), init=make_init(seed=1))
        assert count_params(b1) + count_params(b2) == (
            conv_stack_param_count(3, [4, 8], [1, 2]))


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self):
        rng = np.random.default_rng(3)
        init = make_init(seed=4)
        block = ConvBlock(2, ConvBlockSpec(4, convs=2), init=init)
        head = Dense(4, 3, activation="tanh", init=init)
        x = Tensor(rng.normal(size=(8, 8, 2)))
        with Tape() as tape:
            feat = block(x).mean(axis=(0, 1))
            loss = T.mul(head(feat.reshape((1, 4))), Tensor(rng.normal(size=(1, 3)))).sum()
            T.backward(tape, loss)
            for unit in (block, head):
                for name, p in unit.parameters():
                    g = tape.grad(p)
                    assert np.any(g != 0.0), f"zero gradient at {name}"
