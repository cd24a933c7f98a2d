import numpy as np
import pytest

from attnet.data import SyntheticConfig, SyntheticWorld
from attnet.exceptions import ConfigError, DimensionError, ParseError
from attnet.model import (
    ModelConfig,
    attention_layer_forward,
    attention_network_forward,
    attention_params,
    describe,
    describe_images,
    encoder_forward,
    forward,
    init_model,
    load_checkpoint,
    output_head,
    save_checkpoint,
)
from attnet.ops import softmax_rows
from attnet.tensor import Parameter, Tensor

from conftest import SMALL_PROJ, toy_config


def identity_attention(c):
    eye = np.eye(c).reshape(c, c, 1, 1)
    zero = np.zeros(c)
    return [Parameter(eye, "wk"), Parameter(zero, "bk"), Parameter(eye, "wq"), Parameter(zero, "bq"),
            Parameter(eye, "wv"), Parameter(zero, "bv")]


def random_attention(rng, c, gamma):
    out = []
    for name in ("k", "q", "v"):
        out.append(Parameter(rng.standard_normal((c, c, 1, 1)) * 0.5, "w" + name))
        out.append(Parameter(rng.standard_normal(c) * 0.1, "b" + name))
    return out + [Parameter(np.array(gamma), "gamma")]


def test_encoder_shapes():
    image = np.random.default_rng(0).standard_normal((5, 64, 256))
    for depth, width in ((1, 128), (5, 8)):
        cfg = ModelConfig(depth, 0, "toy", input_height=64, input_width=256, descriptor_dim=64 * 8)
        out = encoder_forward(image, init_model(cfg))
        assert out.shape == (cfg.widths[-1], 64, width)


def test_full_preset_first_layer_shape():
    cfg = ModelConfig(1, 0, "full", input_height=64, input_width=256, descriptor_dim=1024)
    out = encoder_forward(np.zeros((5, 64, 256)), init_model(cfg))
    assert out.shape == (32, 64, 128) and np.isfinite(out.data).all()


def test_width_must_divide():
    with pytest.raises(ConfigError):
        ModelConfig(3, 0, "toy", input_width=900)


def test_wrong_image_shape():
    state = init_model(toy_config())
    with pytest.raises(DimensionError):
        encoder_forward(np.zeros((5, 16, 32)), state)


def test_gamma_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((4, 3, 5)))
    y = attention_layer_forward(x, *random_attention(rng, 4, 0.0))
    np.testing.assert_array_equal(y.data, x.data)


def test_single_channel_map_is_one(rng):
    x = Tensor(rng.standard_normal((1, 2, 3)))
    params = random_attention(rng, 1, 0.5)
    y, attn = attention_layer_forward(x, *params, return_map=True)
    np.testing.assert_array_equal(attn.data, [[1.0]])
    v = params[4].data[0, 0, 0, 0] * x.data + params[5].data[0]
    np.testing.assert_allclose(y.data, x.data + 0.5 * v)


def test_identity_weights_dense_oracle(rng):
    x = rng.standard_normal((3, 2, 2))
    y = attention_layer_forward(Tensor(x), *identity_attention(3), Parameter(np.array(1.0), "g"))
    X = x.reshape(3, 4)
    logits = X @ X.T
    A = np.exp(logits - logits.max(axis=1, keepdims=True))
    A /= A.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(y.data, (X + A @ X).reshape(3, 2, 2), rtol=0, atol=1e-10)


def test_attention_map_contract(rng):
    for _ in range(20):
        c, h, d = (int(v) for v in rng.integers(1, 9, 3))
        x = Tensor(rng.standard_normal((c, h, d)))
        y, attn = attention_layer_forward(x, *random_attention(rng, c, rng.standard_normal()), return_map=True)
        assert attn.shape == (c, c) and y.shape == x.shape
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-9)


def test_stacked_attention():
    cfg = toy_config(attention_depth=4)
    state = init_model(cfg, seed=3)
    rng = np.random.default_rng(0)
    for k in range(1, 5):
        state[f"attention.layer{k}.gamma"].data[...] = rng.standard_normal()
    x = Tensor(rng.standard_normal((cfg.channels, 16, 16)))
    manual = x
    for k in range(1, 5):
        manual = attention_layer_forward(manual, *attention_params(state, k))
    np.testing.assert_array_equal(attention_network_forward(x, state).data, manual.data)


def test_zero_attention_depth_and_zero_gammas_identity(rng):
    x = Tensor(rng.standard_normal((toy_config().channels, 16, 16)))
    for depth in (0, 2):
        state = init_model(toy_config(attention_depth=depth), seed=1)
        np.testing.assert_array_equal(attention_network_forward(x, state).data, x.data)


def test_descriptor_length_1024():
    cfg = ModelConfig(3, 1, "toy", input_height=64, input_width=1024, descriptor_dim=1024)
    assert cfg.pooled_width == 16
    feats = Tensor(np.random.default_rng(0).standard_normal((cfg.channels, 64, cfg.feature_width)))
    assert output_head(feats, init_model(cfg)).shape == (1024,)


def test_constant_features_zero_descriptor():
    cfg = toy_config()
    out = output_head(Tensor(np.full((cfg.channels, 16, 16), 2.5)), init_model(cfg))
    np.testing.assert_array_equal(out.data, np.zeros(128))


def test_head_rejects_narrow_features():
    cfg = toy_config()
    with pytest.raises(ConfigError):
        output_head(Tensor(np.zeros((cfg.channels, 16, 4))), init_model(cfg))


def test_batched_forward_matches_single(rng):
    state = init_model(toy_config())
    images = rng.standard_normal((3, 5, 16, 64))
    batch = forward(Tensor(images), state).data
    for i in range(3):
        np.testing.assert_allclose(forward(Tensor(images[i]), state).data, batch[i], atol=1e-12)


def test_describe_deterministic_and_same_place():
    cfg = SyntheticConfig(seed=9, landmarks=120)
    world = SyntheticWorld.generate(cfg, ((-60, -60), (60, 60)))
    state = init_model(toy_config(), seed=2)
    a = describe(world.scan((1.0, 2.0, 0.0), 0.4, frame_id=1), state, SMALL_PROJ)
    b = describe(world.scan((1.0, 2.0, 0.0), 0.4, frame_id=2), state, SMALL_PROJ)
    np.testing.assert_array_equal(a.values, describe(world.scan((1.0, 2.0, 0.0), 0.4), state, SMALL_PROJ).values)
    cos = a.values @ b.values / np.linalg.norm(a.values) / np.linalg.norm(b.values)
    assert cos == pytest.approx(1.0, abs=1e-6)


def test_encoder_shared_across_attention_depths():
    a = init_model(toy_config(attention_depth=0), seed=5)
    b = init_model(toy_config(attention_depth=3), seed=5)
    for name, p in a.parameters.items():
        np.testing.assert_array_equal(p.data, b[name].data)


def test_zero_image_finite():
    out = describe_images(np.zeros((1, 5, 16, 64)), init_model(toy_config(encoder_depth=5, descriptor_dim=32)))
    assert np.isfinite(out).all()


def test_checkpoint_round_trip(tmp_path, rng):
    state = init_model(toy_config(), seed=4)
    state["attention.layer1.gamma"].data[...] = 0.25
    state.running["encoder.layer1.down.bn"].mean[:] = rng.standard_normal(4)
    save_checkpoint(tmp_path / "m.adlw", state)
    back = load_checkpoint(tmp_path / "m.adlw")
    assert back.config == state.config
    for name, p in state.parameters.items():
        np.testing.assert_array_equal(back[name].data, p.data.astype(np.float32))
    np.testing.assert_array_equal(
        back.running["encoder.layer1.down.bn"].mean,
        state.running["encoder.layer1.down.bn"].mean.astype(np.float32),
    )
    raw = (tmp_path / "m.adlw").read_bytes()
    (tmp_path / "bad.adlw").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.adlw")
    (tmp_path / "short.adlw").write_bytes(raw[:-3])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "short.adlw")
