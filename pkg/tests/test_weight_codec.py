import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farcompress.network import ModelConfig, init_model
from farcompress.weight_codec import (
    DEFAULT_LEVELS,
    MAGIC,
    DecodeError,
    QuantizedModel,
    WeightBitstream,
    binarize,
    compress_state,
    decode_levels,
    dequantize,
    encode_levels,
    entropy_decode,
    entropy_encode,
    load_quantized,
    quantize,
    weight_bits,
)


def state_with(values, param="vanilla"):
    s = init_model(ModelConfig(1, parameterization=param), 0)
    params = {k: np.zeros_like(v) for k, v in s.params.items()}
    flat = np.concatenate([p.ravel() for p in params.values()])
    flat[: len(values)] = values
    pos = 0
    for k, p in params.items():
        params[k] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return s.with_params(params)


def qmodel(levels, step=0.01):
    levels = np.asarray(levels, dtype=np.int64)
    return QuantizedModel({"w": levels.reshape(1, 1, 1, -1)}, step, [("w", (1, 1, 1, levels.size))], "far")


# ---------------------------------------------------------------- quantize


def test_step_from_peak_weight():
    q = quantize(state_with([1.27, 0.0349, -0.005]))
    assert q.step == pytest.approx(0.01, rel=1e-15)
    flat = np.concatenate([q.levels[n].ravel() for n, _ in q.layout])
    assert flat[:3].tolist() == [127, 3, -1]


def test_default_max_level_is_127():
    assert DEFAULT_LEVELS == 127
    q = quantize(init_model(ModelConfig(4), 0))
    assert q.max_level == 127
    assert max(np.abs(l).max() for l in q.levels.values()) == 127


def test_all_zero_weights():
    q = quantize(state_with([]))
    assert q.step == 1.0
    assert all(not l.any() for l in q.levels.values())


@pytest.mark.parametrize("param", ["far", "vanilla"])
def test_dequantization_error_bound(param):
    s = init_model(ModelConfig(8, parameterization=param), 3)
    q = quantize(s)
    w = dequantize(q)
    for name, arr in s.params.items():
        assert np.abs(arr.reshape(w[name].shape) - w[name]).max() <= q.step / 2 + 1e-15


def test_dequantize_values():
    q = qmodel([0, -127, 5])
    np.testing.assert_array_equal(dequantize(q)["w"].ravel(), [0.0, -1.27, 0.05])


def test_requantize_idempotent():
    s = init_model(ModelConfig(8), 1)
    q1 = quantize(s)
    q2 = quantize(load_quantized(s, q1))
    for n in q1.levels:
        np.testing.assert_array_equal(q1.levels[n], q2.levels[n])


def test_layout_mismatch_rejected():
    q = qmodel([1, 2, 3])
    q.levels["w"] = q.levels["w"].reshape(1, 1, 3, 1)
    with pytest.raises(ValueError, match="layout"):
        dequantize(q)


def test_parameterization_mismatch_rejected():
    s = init_model(ModelConfig(2, parameterization="far"), 0)
    q = quantize(init_model(ModelConfig(2, parameterization="vanilla"), 0))
    with pytest.raises(ValueError, match="vanilla"):
        load_quantized(s, q)


# ------------------------------------------------------------- binarization


def test_binarization_example():
    bins = [b for lv in [0, 0, 3, -1] for b in binarize(lv)]
    assert bins == [
        ("sig", 0), ("sig", 0),
        ("sig", 1), ("sign", 0), ("unary0", 1), ("unary1", 1), ("unary2", 0),
        ("sig", 1), ("sign", 1), ("unary0", 0),
    ]
    assert decode_levels(encode_levels([0, 0, 3, -1]), 4).tolist() == [0, 0, 3, -1]


def test_binarization_escape_to_exp_golomb():
    # |level| = 5 -> remainder 4 hits the unary cap, Exp-Golomb(0) = "0"
    assert binarize(5)[-5:] == [("unary0", 1), ("unary1", 1), ("unary2", 1), ("unary3", 1), ("egp0", 0)]
    # |level| = 8 -> Exp-Golomb(3): prefix "110", suffix "00"
    assert binarize(8)[6:] == [("egp0", 1), ("egp1", 1), ("egp2", 0), ("egs1", 0), ("egs0", 0)]


def test_all_zero_payload_small():
    payload = encode_levels(np.zeros(1000, dtype=int))
    assert len(payload) < 1000 / 8 + 16


def test_random_levels_roundtrip_and_size(rng):
    lv = rng.integers(-127, 128, size=5000)
    lv[rng.random(5000) < 0.5] = 0
    payload = encode_levels(lv)
    assert decode_levels(payload, lv.size).tolist() == lv.tolist()
    assert len(payload) < lv.size  # below 8 bits per level


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-127, 127), min_size=0, max_size=64))
def test_levels_roundtrip_property(levels):
    assert decode_levels(encode_levels(levels), len(levels)).tolist() == levels


@pytest.mark.parametrize("seed", range(3))
def test_sparsity_never_grows_payload(seed):
    r = np.random.default_rng(seed)
    base = r.integers(1, 128, size=2000) * r.choice([-1, 1], size=2000)
    order = r.permutation(2000)
    sizes = []
    for frac in np.linspace(0, 0.95, 8):
        lv = base.copy()
        lv[order[: int(frac * 2000)]] = 0
        sizes.append(len(encode_levels(lv)))
    assert all(b <= a + 8 for a, b in zip(sizes, sizes[1:]))


# ---------------------------------------------------------------- container


def test_stream_roundtrip_and_determinism():
    s = init_model(ModelConfig(8, parameterization="far"), 2)
    q = quantize(s)
    stream = entropy_encode(q)
    back = entropy_decode(stream)
    assert back.parameterization == "far" and back.step == q.step and back.layout == q.layout
    for n in q.levels:
        np.testing.assert_array_equal(back.levels[n], q.levels[n])
    assert entropy_encode(back).data == stream.data


def test_header_layout():
    q = qmodel([1, 0, -2], step=0.5)
    data = entropy_encode(q).data
    assert data[:4] == MAGIC
    version, flag, count = struct.unpack_from("<BBH", data, 4)
    assert (version, flag, count) == (1, 1, 1)
    assert data[8] == 1 and data[9:10] == b"w"
    assert struct.unpack_from("<4I", data, 10) == (1, 1, 1, 3)
    step, bits = struct.unpack_from("<dQ", data, 26)
    assert step == 0.5 and bits == 8 * (len(data) - 42)


def test_weight_bits():
    assert weight_bits(WeightBitstream(bytes(100))) == 800
    empty = entropy_encode(QuantizedModel({}, 1.0, [], "vanilla"))
    assert weight_bits(empty) == 8 * len(empty.data)
    s = entropy_encode(quantize(init_model(ModelConfig(4), 0)))
    assert weight_bits(s) == 8 * len(s.data)


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: b"XXXX" + d[4:], "magic"),
        (lambda d: d[:4] + b"\x09" + d[5:], "version"),
        (lambda d: d[:-3], "payload"),
        (lambda d: d[:12], "tensor[0].shape"),
        (lambda d: d[:6], "version"),
    ],
)
def test_structured_decode_errors(mutate, field):
    data = entropy_encode(quantize(init_model(ModelConfig(2), 0))).data
    with pytest.raises(DecodeError) as err:
        entropy_decode(mutate(data))
    assert err.value.field == field


def test_fuzzed_payload_never_out_of_range(rng):
    q = quantize(init_model(ModelConfig(2), 0))
    data = entropy_encode(q).data
    header_len = len(data) - (struct.unpack_from("<Q", data, len(data) - len(data) + _payload_bits_offset(q))[0] // 8)
    for _ in range(300):
        payload = rng.integers(0, 256, size=len(data) - header_len, dtype=np.uint8).tobytes()
        try:
            out = entropy_decode(data[:header_len] + payload)
        except DecodeError:
            continue
        for lv in out.levels.values():
            assert np.abs(lv).max(initial=0) <= 127


def _payload_bits_offset(q):
    return 8 + sum(1 + len(n) + 16 for n, _ in q.layout) + 8


def test_compress_state_returns_decoder_view():
    s = init_model(ModelConfig(4), 0)
    stream, deq = compress_state(s)
    again = load_quantized(s, entropy_decode(stream))
    for n in s.params:
        np.testing.assert_array_equal(deq.params[n], again.params[n])
