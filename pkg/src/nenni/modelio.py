"""NENN binary model format.

Layout (little-endian): magic b"NENN", u16 format version, u64 total file
length, payload, trailing u32 CRC32 over everything before it. Layers are
tagged records; weights are float32; quantized payloads are signed bytes plus
a float32 scale. Projections are persisted as (k, d, s, seed) only and
regenerated deterministically on load.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .approx import ApproxParams
from .network import Conv2D, Dense, Flatten, Model, ReLU
from .projection import sample_projection
from .quant import QuantTensor

MAGIC = b"NENN"
VERSION = 1

_TAG_DENSE = 1
_TAG_CONV = 2
_TAG_RELU = 3
_TAG_FLATTEN = 4


class ModelFormatError(ValueError):
    """The file is not a well-formed NENN model."""


class VersionMismatchError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class UnknownLayerError(ModelFormatError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _pack_approx(ap: ApproxParams) -> bytes:
    out = bytearray()
    out += struct.pack("<IIQ", ap.k, ap.projection.s, ap.projection.seed)
    out += ap.w_tilde.codes.astype("<i1").tobytes()
    out += struct.pack("<f", ap.w_tilde.scale)
    out += ap.b_tilde.codes.astype("<i1").tobytes()
    out += struct.pack("<f", ap.b_tilde.scale)
    return bytes(out)


def model_bytes(model: Model) -> bytes:
    payload = bytearray()
    payload += struct.pack("<B", len(model.input_shape))
    for dim in model.input_shape:
        payload += struct.pack("<I", dim)
    payload += struct.pack("<I", model.n_classes)
    payload += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        if isinstance(layer, Dense):
            n, d = layer.W.shape
            payload += struct.pack("<B", _TAG_DENSE)
            payload += _pack_str(layer.layer_id)
            payload += struct.pack("<II", n, d)
            payload += _pack_f32(layer.W) + _pack_f32(layer.b)
            payload += _approx_block(layer.approx)
        elif isinstance(layer, Conv2D):
            c_out, c_in, kh, kw = layer.kernel.shape
            payload += struct.pack("<B", _TAG_CONV)
            payload += _pack_str(layer.layer_id)
            payload += struct.pack("<IIIIII", c_out, c_in, kh, kw, layer.stride, layer.padding)
            payload += _pack_f32(layer.kernel) + _pack_f32(layer.b)
            payload += _approx_block(layer.approx)
        elif isinstance(layer, ReLU):
            payload += struct.pack("<B", _TAG_RELU)
            payload += _pack_str(layer.layer_id)
        elif isinstance(layer, Flatten):
            payload += struct.pack("<B", _TAG_FLATTEN)
            payload += _pack_str(layer.layer_id)
        else:
            raise TypeError(f"cannot serialize layer type {type(layer).__name__}")
    head = MAGIC + struct.pack("<H", VERSION)
    total = len(head) + 8 + len(payload) + 4
    body = head + struct.pack("<Q", total) + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def _approx_block(ap: ApproxParams | None) -> bytes:
    if ap is None:
        return struct.pack("<B", 0)
    return struct.pack("<B", 1) + _pack_approx(ap)


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


class _Reader:
    def __init__(self, buf: bytes, offset: int):
        self.buf = buf
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("payload structure runs past the declared length")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (length,) = self.unpack("<H")
        return self.take(length).decode("utf-8")

    def read_f32(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)
        return arr.reshape(shape)

    def read_i8(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count), dtype="<i1").copy()


def _read_approx(reader: _Reader, layer_id: str, n: int, d: int) -> ApproxParams | None:
    (has,) = reader.unpack("<B")
    if not has:
        return None
    k, s, seed = reader.unpack("<IIQ")
    w_codes = reader.read_i8(n * k).reshape(n, k)
    (w_scale,) = reader.unpack("<f")
    b_codes = reader.read_i8(n)
    (b_scale,) = reader.unpack("<f")
    return ApproxParams(
        layer_id=layer_id,
        w_tilde=QuantTensor(w_codes, w_scale),
        b_tilde=QuantTensor(b_codes, b_scale),
        projection=sample_projection(k, d, s, seed),
    )


def model_from_bytes(buf: bytes) -> Model:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise ModelFormatError("not a NENN model file")
    if len(buf) < 14:
        raise TruncatedFileError("file too short for the NENN header")
    (version,) = struct.unpack("<H", buf[4:6])
    if version != VERSION:
        raise VersionMismatchError(f"unsupported format version {version} (expected {VERSION})")
    (declared,) = struct.unpack("<Q", buf[6:14])
    if len(buf) < declared:
        raise TruncatedFileError(f"file has {len(buf)} bytes but declares {declared}")
    if len(buf) > declared:
        raise ModelFormatError("trailing data after the declared file length")
    (crc_stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc_stored:
        raise ChecksumError("CRC32 mismatch: the file is corrupt")

    reader = _Reader(buf[:-4], 14)
    (ndim,) = reader.unpack("<B")
    input_shape = tuple(reader.unpack("<" + "I" * ndim)) if ndim else ()
    (n_classes,) = reader.unpack("<I")
    (n_layers,) = reader.unpack("<I")
    layers = []
    for _ in range(n_layers):
        (tag,) = reader.unpack("<B")
        layer_id = reader.read_str()
        if tag == _TAG_DENSE:
            n, d = reader.unpack("<II")
            W = reader.read_f32((n, d))
            b = reader.read_f32((n,))
            approx = _read_approx(reader, layer_id, n, d)
            layers.append(Dense(W=W, b=b, layer_id=layer_id, approx=approx))
        elif tag == _TAG_CONV:
            c_out, c_in, kh, kw, stride, padding = reader.unpack("<IIIIII")
            kernel = reader.read_f32((c_out, c_in, kh, kw))
            b = reader.read_f32((c_out,))
            approx = _read_approx(reader, layer_id, c_out, c_in * kh * kw)
            layers.append(
                Conv2D(
                    kernel=kernel,
                    b=b,
                    stride=stride,
                    padding=padding,
                    layer_id=layer_id,
                    approx=approx,
                )
            )
        elif tag == _TAG_RELU:
            layers.append(ReLU(layer_id=layer_id))
        elif tag == _TAG_FLATTEN:
            layers.append(Flatten(layer_id=layer_id))
        else:
            raise UnknownLayerError(f"unsupported layer tag {tag}")
    return Model(layers=layers, input_shape=input_shape, n_classes=n_classes)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
