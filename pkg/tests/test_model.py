import numpy as np
import pytest
from conftest import tiny_config

from swtrunet import tensor as T
from swtrunet.errors import (ChecksumError, ConfigError, DimensionError, FormatError, LengthError,
                             MagicError, TensorNameError, VersionError)
from swtrunet.model import (SwtrConfig, build, forward, labels_from_probs, parameter_checksum,
                            parameter_count, predict_mask)
from swtrunet.tensor import Tensor, grad_check
from swtrunet.training import compute_loss
from swtrunet.volume import VolumeImage
from swtrunet.weights import load_weights, read_tensor_file, save_weights


def closed_form_count(cfg: SwtrConfig) -> int:
    """Parameter count derived by hand from the layer layout (one residual block per stage)."""
    c0, c1, c2, c3 = cfg.encoder_channels
    d = cfg.d_model
    conv = lambda i, o, k: i * o * k * k
    gn = lambda c: 2 * c

    def res(i, o):
        n = conv(i, o, 3) + gn(o) + conv(o, o, 3) + gn(o)
        return n + (conv(i, o, 1) + gn(o) if i != o else 0)

    w = cfg.window_size
    sub_block = (gn(d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * w - 1) ** 2 * cfg.heads
                 + gn(d) + (d * 4 * d + 4 * d) + (4 * d * d + d))
    skips = {8: c2, 4: c1, 2: c0}
    dec_in = [d, *cfg.decoder_channels[:3]]
    decoder = 0
    for i, scale in enumerate((8, 4, 2, 1)):
        cin = dec_in[i] + (skips[scale] if scale in cfg.skip_scales else 0)
        decoder += conv(cin, cfg.decoder_channels[i], 3) + gn(cfg.decoder_channels[i])
    head = cfg.decoder_channels[3] * cfg.num_classes + cfg.num_classes
    return (conv(cfg.in_channels, c0, 7) + gn(c0) + res(c0, c1) + res(c1, c2) + res(c2, c3)
            + c3 * d + d + cfg.num_transformer_layers * sub_block + gn(d) + decoder + head)


def test_default_config_bottleneck_and_count():
    cfg = SwtrConfig()
    assert cfg.grid == (14, 14)
    model = build(cfg)
    assert parameter_count(model) == closed_form_count(cfg) == 1_593_215


@pytest.mark.parametrize("kw", [dict(num_skip_connections=0), dict(num_skip_connections=2),
                                dict(num_transformer_layers=4, heads=3, d_model=12)])
def test_count_is_function_of_config(kw):
    cfg = tiny_config(**kw)
    assert parameter_count(build(cfg)) == closed_form_count(cfg)


def test_default_forward_224():
    model = build(SwtrConfig())
    x = np.random.default_rng(0).normal(size=(1, 1, 224, 224)).astype(np.float32)
    with T.no_grad():
        feat, _ = model.encode(Tensor(x))
        assert model.bottleneck(feat).grid == (14, 14)
        out = forward(model, x)
    assert out.shape == (1, 3, 224, 224)
    assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("skips", [0, 1, 2, 3])
def test_output_shape_independent_of_skips(skips):
    model = build(tiny_config(num_skip_connections=skips))
    out = model(Tensor(np.ones((2, 1, 32, 32), np.float32)))
    assert out.shape == (2, 3, 32, 32)


def test_skip_configs_change_values():
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 32, 32)).astype(np.float32))
    a = build(tiny_config(num_skip_connections=0))(x).data
    b = build(tiny_config(num_skip_connections=3))(x).data
    assert not np.allclose(a, b)


def test_skips_removed_deepest_first():
    assert tiny_config(num_skip_connections=1).skip_scales == (8,)
    assert tiny_config(num_skip_connections=2).skip_scales == (8, 4)
    assert tiny_config(num_skip_connections=0).skip_scales == ()


def test_same_seed_bit_identical():
    assert parameter_checksum(build(tiny_config())) == parameter_checksum(build(tiny_config()))
    assert parameter_checksum(build(tiny_config())) != parameter_checksum(build(tiny_config(seed=1)))


def test_parameter_names_unique():
    names = [n for n, _ in build(SwtrConfig()).named_parameters()]
    assert len(names) == len(set(names))


@pytest.mark.parametrize("kw,field", [
    (dict(input_size=(30, 32)), "input_size"),
    (dict(num_transformer_layers=7), "num_transformer_layers"),
    (dict(num_skip_connections=4), "num_skip_connections"),
    (dict(heads=5), "heads"),
    (dict(window_size=2, shift=2), "shift"),
])
def test_config_errors_name_field(kw, field):
    with pytest.raises(ConfigError, match=field):
        tiny_config(**kw)


def test_spatial_mismatch():
    with pytest.raises(DimensionError):
        build(tiny_config())(Tensor(np.zeros((1, 1, 48, 48), np.float32)))


def test_zero_head_gives_uniform_softmax():
    model = build(tiny_config())
    model.head.weight.data[...] = 0
    model.head.bias.data[...] = 0
    probs = T.softmax(model(Tensor(np.random.default_rng(2).normal(size=(1, 1, 32, 32)).astype(np.float32))), 1)
    np.testing.assert_allclose(probs.data, 1 / 3, atol=1e-7)


def test_every_parameter_receives_gradient():
    # a 4x4 token grid; on 2x2 with shift 1 every token is its own masked region
    model = build(tiny_config(input_size=(64, 64)))
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 64, 64)).astype(np.float32)
    y = rng.integers(0, 3, size=(2, 64, 64))
    compute_loss("dice+ce", model(Tensor(x[:, None])), y).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


@pytest.mark.parametrize("dtype,eps,tol", [("f64", 1e-5, 1e-5), ("f32", 1e-3, 1e-3)])
def test_end_to_end_fd_spot_check(dtype, eps, tol):
    model = build(tiny_config(dtype=dtype))
    rng = np.random.default_rng(4)
    npdt = model.dtype
    x = Tensor(rng.normal(size=(2, 1, 32, 32)).astype(npdt))
    y = rng.integers(0, 3, size=(2, 32, 32))
    f = lambda _: compute_loss("dice+ce", model(x), y)
    params = list(model.named_parameters())
    worst = 0.0
    for k in rng.choice(len(params), 10, replace=False):
        _, p = params[k]
        worst = max(worst, grad_check(f, p, eps, [int(rng.integers(p.size))]))
    assert worst < tol


def test_argmax_ties_go_to_lowest_class():
    probs = np.full((1, 3, 2, 2), 1 / 3)
    np.testing.assert_array_equal(labels_from_probs(probs), 0)
    probs[0, 1:, 0, 0] = 0.5
    probs[0, 0, 0, 0] = 0.0
    assert labels_from_probs(probs)[0, 0, 0] == 1


def test_predict_mask_single_slice_and_uniform_logits():
    model = build(tiny_config())
    model.head.weight.data[...] = 0
    model.head.bias.data[...] = 0
    vol = VolumeImage(np.random.default_rng(5).normal(size=(32, 32, 1)), (2.0, 2.0, 5.0))
    mask = predict_mask(model, vol)
    assert mask.shape == (32, 32, 1) and mask.spacing == vol.spacing
    assert not mask.labels.any()
    with pytest.raises(DimensionError):
        predict_mask(model, VolumeImage(np.zeros((16, 16, 2))))


# -- weight files ---------------------------------------------------------------------------

def test_weights_roundtrip_bit_exact(tmp_path):
    model = build(tiny_config())
    for p in model.parameters():
        p.data += np.random.default_rng(6).normal(size=p.shape).astype(p.dtype)
    path = tmp_path / "m.swtr"
    save_weights(model, path)
    loaded = load_weights(path)
    assert parameter_checksum(loaded) == parameter_checksum(model)
    assert loaded.config == model.config


def test_weight_file_layout(tmp_path):
    import json
    import struct

    path = tmp_path / "m.swtr"
    model = build(tiny_config())
    save_weights(model, path)
    raw = path.read_bytes()
    magic, version, mlen = struct.unpack_from("<4sIQ", raw)
    assert magic == b"SWTR" and version == 1
    manifest = json.loads(raw[16:16 + mlen])
    entries = manifest["tensors"]
    assert [e["name"] for e in entries] == [n for n, _ in model.named_parameters()]
    payload = raw[16 + mlen:-8]
    assert sum(e["byte_len"] for e in entries) == len(payload)
    first = entries[0]
    arr = np.frombuffer(payload, "<f4", count=first["byte_len"] // 4, offset=first["byte_offset"])
    np.testing.assert_array_equal(arr.reshape(first["shape"]), model.stem.weight.data)


def _corrupt(path, fn):
    raw = bytearray(path.read_bytes())
    fn(raw)
    path.write_bytes(bytes(raw))


@pytest.mark.parametrize("mutate,error,code", [
    (lambda r: r.__setitem__(slice(0, 4), b"XXXX"), MagicError, 10),
    (lambda r: r.__setitem__(slice(4, 8), (7).to_bytes(4, "little")), VersionError, 11),
    (lambda r: r.__delitem__(slice(len(r) - 100, len(r) - 8)), LengthError, 12),
    (lambda r: r.__setitem__(len(r) - 20, r[len(r) - 20] ^ 0xFF), ChecksumError, 13),
])
def test_corrupted_files(tmp_path, mutate, error, code):
    path = tmp_path / "m.swtr"
    save_weights(build(tiny_config()), path)
    _corrupt(path, mutate)
    with pytest.raises(error) as info:
        load_weights(path)
    assert info.value.exit_code == code


def test_truncated_file_length_error(tmp_path):
    path = tmp_path / "m.swtr"
    save_weights(build(tiny_config()), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:10])
    with pytest.raises(LengthError, match="header"):
        read_tensor_file(path)
    path.write_bytes(raw[:-1000])
    with pytest.raises(LengthError):
        read_tensor_file(path)


def test_layer_count_mismatch_lists_names(tmp_path):
    path = tmp_path / "m.swtr"
    save_weights(build(tiny_config(num_transformer_layers=6)), path)
    with pytest.raises(TensorNameError) as info:
        load_weights(path, tiny_config(num_transformer_layers=4))
    assert "transformer.2.regular.attn.qkv.weight" in str(info.value)
    assert info.value.exit_code == 14


def test_distinct_format_exit_codes():
    codes = [e.exit_code for e in (MagicError, VersionError, LengthError, ChecksumError, TensorNameError)]
    assert len(set(codes)) == len(codes)
    assert all(issubclass(e, FormatError) for e in (MagicError, VersionError, LengthError))
