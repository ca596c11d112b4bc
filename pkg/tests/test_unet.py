import numpy as np
import pytest

from tversky3d import unet
from tversky3d.errors import BadMagicError, ConfigError, TruncatedFileError
from tversky3d.gradcheck import TINY_CONFIG, network_gradients, rel_error
from tversky3d.loss import TverskyParams


def test_paper_plan_first_layer():
    plan = unet.plan_shapes(unet.PAPER_CONFIG)
    assert plan[0].name == "C1"
    assert plan[0].input_shape == (128, 224, 256, 3)
    assert plan[0].output_shape == (128, 224, 256, 16)


def test_paper_plan_e5_input_is_skip_plus_upsampled():
    by_name = {layer.name: layer for layer in unet.plan_shapes(unet.PAPER_CONFIG)}
    assert by_name["E5"].input_shape == (32, 56, 64, 192)
    assert by_name["E4"].output_shape[3] == 128 + 64


def test_small_config_output():
    cfg = unet.NetConfig((16, 16, 16), in_channels=1, levels=2, base_features=4)
    plan = unet.plan_shapes(cfg)
    assert plan[-1].output_shape == (16, 16, 16, 2)
    assert [layer.name for layer in plan if layer.kind == "pool"] == ["C3", "C6"]


@pytest.mark.parametrize("levels", [1, 2, 3, 4])
def test_features_double_per_level(levels):
    cfg = unet.NetConfig((32, 32, 32), in_channels=3, levels=levels, base_features=3)
    convs = [layer for layer in unet.plan_shapes(cfg) if layer.kind == "conv" and layer.name.startswith("C")]
    widths = [layer.output_shape[3] for layer in convs[::2]]
    assert widths == [3 * 2 ** i for i in range(levels + 1)]
    assert unet.plan_shapes(cfg)[-1].output_shape == (32, 32, 32, 2)


def test_plan_chains():
    plan = unet.plan_shapes(unet.PAPER_CONFIG)
    for prev, nxt in zip(plan, plan[1:]):
        assert prev.output_shape == nxt.input_shape, (prev.name, nxt.name)


def test_non_divisible_extent():
    with pytest.raises(ConfigError, match="H=12"):
        unet.NetConfig((16, 12, 16), levels=3)


def test_init_deterministic():
    a = unet.init_params(unet.NetConfig(seed=4))
    b = unet.init_params(unet.NetConfig(seed=4))
    c = unet.init_params(unet.NetConfig(seed=5))
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())
    assert all(not k.bias.any() for k in a.kernels.values())


def test_init_variance_is_he_scaled():
    cfg = unet.NetConfig((8, 8, 8), in_channels=16, levels=1, base_features=16, seed=11)
    w = unet.init_params(cfg).kernels["C2"].weights
    assert w.shape == (3, 3, 3, 16, 16)
    target = 2 / (27 * 16)
    assert abs(w.var() - target) < 0.2 * target
    assert abs(w.mean()) < 0.1 * np.sqrt(target)


def test_forward_outputs_probabilities():
    cfg = unet.NetConfig((8, 8, 8), in_channels=2, levels=2, base_features=2, seed=1)
    x = np.random.default_rng(0).normal(size=(8, 8, 8, 2))
    probs, _ = unet.forward(unet.init_params(cfg), x)
    assert probs.shape == (8, 8, 8, 2)
    assert np.all(np.abs(probs.sum(-1) - 1) < 1e-12)


def test_zero_input_uniform_half():
    cfg = unet.NetConfig((8, 8, 8), in_channels=3, levels=1, base_features=2, seed=2)
    probs, _ = unet.forward(unet.init_params(cfg), np.zeros((8, 8, 8, 3)))
    np.testing.assert_array_equal(probs[..., 0], 0.5)


def test_forward_shape_mismatch():
    with pytest.raises(ConfigError):
        unet.forward(unet.init_params(unet.NetConfig()), np.zeros((32, 32, 32, 1)))


def test_backward_zero_upstream_and_deterministic():
    cfg = unet.NetConfig((8, 8, 8), in_channels=3, levels=1, base_features=2)
    params = unet.init_params(cfg)
    x = np.random.default_rng(1).normal(size=(8, 8, 8, 3))
    _, cache = unet.forward(params, x)
    z = np.zeros((8, 8, 8))
    grads = unet.backward(params, cache, z, z)
    assert all(not g.weights.any() and not g.bias.any() for g in grads.values())
    g = np.random.default_rng(2).normal(size=(8, 8, 8))
    a = unet.backward(params, cache, g, -g)
    b = unet.backward(params, cache, g, -g)
    assert all(np.array_equal(a[n].weights, b[n].weights) for n in a)


def test_stale_cache_rejected():
    params = unet.init_params(unet.NetConfig((8, 8, 8), levels=1))
    _, cache = unet.forward(params, np.zeros((8, 8, 8, 3)))
    params.version += 1
    z = np.zeros((8, 8, 8))
    with pytest.raises(ConfigError, match="stale"):
        unet.backward(params, cache, z, z)


def test_network_gradient_two_levels():
    cfg = unet.NetConfig((4, 4, 4), in_channels=2, levels=2, base_features=1, seed=3)
    a, n = network_gradients(cfg, TverskyParams(0.4, 0.6), seed=5)
    assert rel_error(a, n) < 1e-4


def test_bias_free_config_keeps_zero_bias_gradients():
    cfg = unet.NetConfig((4, 4, 4), in_channels=1, levels=1, base_features=1, use_bias=False)
    params = unet.init_params(cfg)
    _, cache = unet.forward(params, np.random.default_rng(0).normal(size=(4, 4, 4, 1)))
    g = np.ones((4, 4, 4))
    assert all(not k.bias.any() for k in unet.backward(params, cache, g, -g).values())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = unet.init_params(TINY_CONFIG)
        rng = np.random.default_rng(0)
        for k in params.kernels.values():
            k.bias[:] = rng.normal(size=k.bias.shape)
        path = tmp_path / "net.tvnet"
        unet.save_checkpoint(path, params)
        back = unet.load_checkpoint(path)
        assert back.config == params.config
        assert back.names() == params.names()
        assert params.flat().tobytes() == back.flat().tobytes()

    def test_starts_with_magic(self, tmp_path):
        path = tmp_path / "net.tvnet"
        unet.save_checkpoint(path, unet.init_params(TINY_CONFIG))
        assert path.read_bytes().startswith(b"TVNET1")

    def test_bad_magic_and_truncation(self, tmp_path):
        path = tmp_path / "net.tvnet"
        unet.save_checkpoint(path, unet.init_params(TINY_CONFIG))
        blob = path.read_bytes()
        path.write_bytes(b"XXXXXX" + blob[6:])
        with pytest.raises(BadMagicError, match="TVNET1"):
            unet.load_checkpoint(path)
        path.write_bytes(blob[:-9])
        with pytest.raises(TruncatedFileError):
            unet.load_checkpoint(path)
