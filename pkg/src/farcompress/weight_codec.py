"""Weight quantization and the FARW bitstream.

Levels are binarized as

    significance (level != 0)
    sign (0 = positive, 1 = negative)                  if significant
    unary(|level| - 1) capped at 4 ones               if significant
    order-0 Exp-Golomb(|level| - 5)                   if the unary cap was hit

and every bin is coded by an adaptive binary range coder (11-bit
probabilities, shift-5 adaptation, 32-bit range with carry propagation)
with one probability model per bin class and position.

File layout (little-endian)::

    "FARW" | version u8 | parameterization u8 | tensor count u16
    per tensor: name length u8, ASCII name, shape 4 x u32
    step f64 | payload bit count u64 | payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .network import PARAM_NAMES, ModelConfig, ModelState

MAGIC = b"FARW"
VERSION = 1
DEFAULT_LEVELS = 127
UNARY_CAP = 4
MAX_EG_PREFIX = 30

_PROB_BITS = 11
_PROB_ONE = 1 << _PROB_BITS
_MOVE_BITS = 5
_TOP = 1 << 24

_PARAM_FLAGS = {"vanilla": 0, "far": 1}
_PARAM_NAMES = {v: k for k, v in _PARAM_FLAGS.items()}


class DecodeError(ValueError):
    """Malformed bitstream. ``field`` names the part that failed."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class QuantizedModel:
    levels: dict[str, np.ndarray]  # int64 arrays, 4-D shapes from ``layout``
    step: float
    layout: list[tuple[str, tuple[int, int, int, int]]]
    parameterization: str = "far"
    max_level: int = DEFAULT_LEVELS


# --------------------------------------------------------------------- quantize


def _shape4(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise ValueError(f"tensor rank {len(shape)} exceeds 4")
    return (1,) * (4 - len(shape)) + shape


def quantize(state: ModelState, max_level: int = DEFAULT_LEVELS) -> QuantizedModel:
    """Uniform quantization with one global step ``max|w| / max_level``."""
    if max_level < 1:
        raise ValueError("max_level must be >= 1")
    names = [n for n in PARAM_NAMES if n in state.params]
    peak = max(float(np.abs(state.params[n]).max(initial=0.0)) for n in names)
    levels = {}
    layout = []
    for n in names:
        w = state.params[n]
        if peak == 0.0:
            q = np.zeros(w.shape, dtype=np.int64)
        else:
            # round half away from zero; scaling by max_level / peak keeps the peak at exactly L
            q = (np.sign(w) * np.floor(np.abs(w) * max_level / peak + 0.5)).astype(np.int64)
        np.clip(q, -max_level, max_level, out=q)
        layout.append((n, _shape4(w.shape)))
        levels[n] = q.reshape(layout[-1][1])
    step = peak / max_level if peak > 0 else 1.0
    return QuantizedModel(levels, step, layout, state.config.parameterization, max_level)


def dequantize(q: QuantizedModel) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in q.layout:
        lv = q.levels[name]
        if lv.shape != tuple(shape):
            raise ValueError(f"{name}: levels shape {lv.shape} disagrees with layout {shape}")
        out[name] = lv.astype(np.float64) * q.step
    return out


def load_quantized(template: ModelState, q: QuantizedModel) -> ModelState:
    """Replace the parameters of ``template`` with the dequantized weights of ``q``."""
    if q.parameterization != template.config.parameterization:
        raise ValueError(
            f"bitstream holds {q.parameterization} weights, model is {template.config.parameterization}"
        )
    return template.with_params(dequantize(q))


# ---------------------------------------------------------------- binarization


def binarize(level: int) -> list[tuple[str, int]]:
    """Bins of one level as (context class, bit) pairs; see the module docstring."""
    bins = [("sig", int(level != 0))]
    if level == 0:
        return bins
    bins.append(("sign", int(level < 0)))
    rem = abs(level) - 1
    for k in range(UNARY_CAP):
        if rem == k:
            bins.append((f"unary{k}", 0))
            return bins
        bins.append((f"unary{k}", 1))
    v = rem - UNARY_CAP
    nbits = (v + 1).bit_length() - 1
    for k in range(nbits):
        bins.append((f"egp{k}", 1))
    bins.append((f"egp{nbits}", 0))
    suffix = v + 1 - (1 << nbits)
    for k in range(nbits - 1, -1, -1):
        bins.append((f"egs{k}", (suffix >> k) & 1))
    return bins


class _Models(dict):
    def __missing__(self, key):
        self[key] = _PROB_ONE // 2
        return self[key]


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.models = _Models()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low >= 1 << 32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode_bit(self, ctx: str, bit: int):
        p = self.models[ctx]
        bound = (self.range >> _PROB_BITS) * p
        if bit:
            self.low += bound
            self.range -= bound
            self.models[ctx] = p - (p >> _MOVE_BITS)
        else:
            self.range = bound
            self.models[ctx] = p + ((_PROB_ONE - p) >> _MOVE_BITS)
        while self.range < _TOP:
            self.range = (self.range << 8) & 0xFFFFFFFF
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = 0xFFFFFFFF
        self.models = _Models()
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("payload", "truncated: coder ran past the end of the payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_bit(self, ctx: str) -> int:
        p = self.models[ctx]
        bound = (self.range >> _PROB_BITS) * p
        if self.code < bound:
            self.range = bound
            self.models[ctx] = p + ((_PROB_ONE - p) >> _MOVE_BITS)
            bit = 0
        else:
            self.code -= bound
            self.range -= bound
            self.models[ctx] = p - (p >> _MOVE_BITS)
            bit = 1
        while self.range < _TOP:
            self.range = (self.range << 8) & 0xFFFFFFFF
            self.code = ((self.code << 8) | self._next()) & 0xFFFFFFFF
        return bit


def encode_levels(levels) -> bytes:
    enc = RangeEncoder()
    for lv in levels:
        for ctx, bit in binarize(int(lv)):
            enc.encode_bit(ctx, bit)
    return enc.finish()


def _decode_level(dec: RangeDecoder) -> int:
    if not dec.decode_bit("sig"):
        return 0
    negative = dec.decode_bit("sign")
    rem = 0
    while rem < UNARY_CAP and dec.decode_bit(f"unary{rem}"):
        rem += 1
    if rem == UNARY_CAP:
        nbits = 0
        while dec.decode_bit(f"egp{nbits}"):
            nbits += 1
            if nbits > MAX_EG_PREFIX:
                raise DecodeError("payload", "Exp-Golomb prefix exceeds the supported length")
        suffix = 0
        for k in range(nbits - 1, -1, -1):
            suffix |= dec.decode_bit(f"egs{k}") << k
        rem += (1 << nbits) - 1 + suffix
    mag = rem + 1
    return -mag if negative else mag


def decode_levels(payload: bytes, count: int, max_level: int = DEFAULT_LEVELS) -> np.ndarray:
    dec = RangeDecoder(payload)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        lv = _decode_level(dec)
        if abs(lv) > max_level:
            raise DecodeError("payload", f"level {lv} at index {i} outside [-{max_level}, {max_level}]")
        out[i] = lv
    return out


# -------------------------------------------------------------------- container


@dataclass(frozen=True)
class WeightBitstream:
    data: bytes

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)


def _header(q: QuantizedModel, payload_bits: int) -> bytes:
    parts = [MAGIC, struct.pack("<BBH", VERSION, _PARAM_FLAGS[q.parameterization], len(q.layout))]
    for name, shape in q.layout:
        raw = name.encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw + struct.pack("<4I", *shape))
    parts.append(struct.pack("<dQ", q.step, payload_bits))
    return b"".join(parts)


def entropy_encode(q: QuantizedModel) -> WeightBitstream:
    flat = np.concatenate([q.levels[name].reshape(-1) for name, _ in q.layout]) if q.layout else []
    payload = encode_levels(flat)
    return WeightBitstream(_header(q, 8 * len(payload)) + payload)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str, field: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise DecodeError(field, f"truncated header (need {size} bytes at offset {self.pos})")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals


def entropy_decode(stream: WeightBitstream | bytes, max_level: int = DEFAULT_LEVELS) -> QuantizedModel:
    data = stream.data if isinstance(stream, WeightBitstream) else bytes(stream)
    r = _Reader(data)
    (magic,) = r.take("<4s", "magic")
    if magic != MAGIC:
        raise DecodeError("magic", f"expected {MAGIC!r}, found {magic!r}")
    version, flag, count = r.take("<BBH", "version")
    if version != VERSION:
        raise DecodeError("version", f"unsupported format version {version}")
    if flag not in _PARAM_NAMES:
        raise DecodeError("parameterization", f"unknown parameterization flag {flag}")
    layout = []
    for t in range(count):
        (nlen,) = r.take("<B", f"tensor[{t}].name")
        (raw,) = r.take(f"<{nlen}s", f"tensor[{t}].name")
        try:
            name = raw.decode("ascii")
        except UnicodeDecodeError:
            raise DecodeError(f"tensor[{t}].name", "name is not ASCII") from None
        shape = r.take("<4I", f"tensor[{t}].shape")
        layout.append((name, tuple(shape)))
    step, payload_bits = r.take("<dQ", "step")
    if not np.isfinite(step) or step <= 0:
        raise DecodeError("step", f"step must be positive and finite, got {step}")
    if payload_bits % 8:
        raise DecodeError("payload_bits", f"payload bit count {payload_bits} is not byte aligned")
    payload = data[r.pos:]
    if len(payload) != payload_bits // 8:
        raise DecodeError(
            "payload", f"header declares {payload_bits // 8} payload bytes, stream carries {len(payload)}"
        )
    total = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
    if total > 64 * (8 * len(payload) + 64):
        # a bin never costs less than ~1/45 bit with 11-bit probabilities
        raise DecodeError("shape", f"layout claims {total} weights for a {len(payload)}-byte payload")
    flat = decode_levels(payload, total, max_level)
    levels, pos = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        levels[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    return QuantizedModel(levels, float(step), layout, _PARAM_NAMES[flag], max_level)


def weight_bits(stream: WeightBitstream) -> int:
    return stream.total_bits


def compress_state(state: ModelState, max_level: int = DEFAULT_LEVELS) -> tuple[WeightBitstream, ModelState]:
    """Quantize + encode, returning the stream and the model the decoder will see."""
    q = quantize(state, max_level)
    stream = entropy_encode(q)
    return stream, load_quantized(state, q)
