"""Network graphs, the sim -> integer export pass, integer inference and the
binary model format.

A graph is an ordered list of layers. The *sim* flavor carries real-valued
latent weights and moving-average statistics and is trained by :mod:`sbnq.qat`;
the *integer* flavor carries only i4/i8 weights and SBNQ (bias, shift) buffers
and runs on :mod:`sbnq.itensor` kernels.
"""

from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import itensor
from .itensor import IntTensor, OpAudit
from .quantcore import QuantSpec, SbnqParams, fuse_sbnq, quantize_weight, sbnq_int

FORMAT_MAGIC = b"SBNQ"
FORMAT_VERSION = 1


class GraphError(ValueError):
    """Malformed graph or dtype-chain violation."""


class ExportError(ValueError):
    pass


class FormatError(ValueError):
    """Unreadable model file."""


@dataclass
class Conv2D:
    weight: np.ndarray  # (out, in, kh, kw); float64 (sim) or int64 (integer)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return tuple(self.weight.shape[2:])


@dataclass
class Linear:
    weight: np.ndarray  # (out, in)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class SimSBNQ:
    """Training-time SBNQ state: moving averages of the input mean and std.

    ``signed=False`` means ReLU is fused before the shift.
    """

    bits: int
    signed: bool
    running_mu: np.ndarray
    running_sigma: np.ndarray
    momentum: float = 0.1
    batches_seen: int = 0

    def __post_init__(self):
        self.running_mu = np.asarray(self.running_mu, dtype=np.float64)
        self.running_sigma = np.asarray(self.running_sigma, dtype=np.float64)
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must be in (0, 1)")

    @classmethod
    def fresh(cls, channels: int, bits: int, signed: bool, momentum: float = 0.1) -> "SimSBNQ":
        return cls(bits, signed, np.zeros(channels), np.ones(channels), momentum)

    @property
    def channels(self) -> int:
        return len(self.running_mu)

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits, self.signed)

    @property
    def fuse_relu(self) -> bool:
        return not self.signed


@dataclass
class IntSBNQ:
    params: SbnqParams

    @property
    def channels(self) -> int:
        return self.params.channels


@dataclass
class MaxPool:
    window: tuple[int, int] = (2, 2)
    stride: tuple[int, int] = (2, 2)


@dataclass
class Flatten:
    pass


Layer = Union[Conv2D, Linear, SimSBNQ, IntSBNQ, MaxPool, Flatten]


def act_dtype(bits: int, signed: bool) -> str:
    if bits <= 4:
        return "i4" if signed else "u4"
    if bits <= 8:
        return "i8" if signed else "u8"
    raise GraphError(f"{bits}-bit activations are not supported by the integer runtime")


def weight_dtype(bits: int) -> str:
    return act_dtype(bits, signed=True)


@dataclass
class ModelGraph:
    layers: list
    flavor: str  # "sim" or "integer"
    weight_bits: int = 4
    act_bits: int = 4
    input_shape: tuple[int, ...] = (1, 28, 28)
    name: str = ""
    # per-layer output shapes, filled by validate()
    shapes: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.flavor not in ("sim", "integer"):
            raise GraphError(f"unknown flavor {self.flavor!r}")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self):
        """Check layer types, shapes and the accumulate -> SBNQ pattern."""
        sbnq_type = SimSBNQ if self.flavor == "sim" else IntSBNQ
        shape = self.input_shape
        shapes = []
        weighted = [i for i, l in enumerate(self.layers) if isinstance(l, (Conv2D, Linear))]
        if not weighted:
            raise GraphError("graph has no conv/linear layer")
        head = weighted[-1]
        pending_acc = False  # an i32 accumulator waiting for an SBNQ
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({type(layer).__name__})"
            if isinstance(layer, (SimSBNQ, IntSBNQ)):
                if not isinstance(layer, sbnq_type):
                    raise GraphError(f"{where} does not belong in a {self.flavor} graph")
                if not pending_acc:
                    raise GraphError(f"{where} must directly follow a conv/linear layer")
                if layer.channels != shape[0]:
                    raise GraphError(f"{where} has {layer.channels} channels, input has {shape[0]}")
                pending_acc = False
            elif pending_acc:
                raise GraphError(f"{where}: 32-bit accumulator must be requantized by SBNQ first")
            if isinstance(layer, Conv2D):
                self._check_weight(layer.weight, where)
                if len(shape) != 3 or layer.in_channels != shape[0]:
                    raise GraphError(f"{where} expects {layer.in_channels} input channels, got shape {shape}")
                (kh, kw), (sh, sw), (ph, pw) = layer.kernel, layer.stride, layer.padding
                oh = (shape[1] + 2 * ph - kh) // sh + 1
                ow = (shape[2] + 2 * pw - kw) // sw + 1
                if oh < 1 or ow < 1:
                    raise GraphError(f"{where} kernel does not fit input {shape}")
                shape = (layer.out_channels, oh, ow)
                pending_acc = i != head
            elif isinstance(layer, Linear):
                self._check_weight(layer.weight, where)
                if len(shape) != 1 or layer.in_features != shape[0]:
                    raise GraphError(f"{where} expects {layer.in_features} features, got shape {shape}")
                shape = (layer.out_features,)
                pending_acc = i != head
            elif isinstance(layer, MaxPool):
                (kh, kw), (sh, sw) = layer.window, layer.stride
                if len(shape) != 3 or shape[1] < kh or shape[2] < kw or (shape[1] - kh) % sh or (shape[2] - kw) % sw:
                    raise GraphError(f"{where} window does not tile input {shape}")
                shape = (shape[0], (shape[1] - kh) // sh + 1, (shape[2] - kw) // sw + 1)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif not isinstance(layer, (SimSBNQ, IntSBNQ)):
                raise GraphError(f"{where}: unsupported layer type")
            if i > head:
                raise GraphError(f"{where} follows the classifier head")
            shapes.append(shape)
        self.shapes = shapes

    def _check_weight(self, w, where):
        if self.flavor == "integer":
            if w.dtype.kind != "i":
                raise GraphError(f"{where}: integer graph holds non-integer weights")
            IntTensor(w, weight_dtype(self.weight_bits))
        elif w.dtype.kind != "f":
            raise GraphError(f"{where}: sim graph needs real-valued weights")

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)


def export_integer(model: ModelGraph) -> ModelGraph:
    """Freeze a trained sim graph into an integer-only graph.

    Weights go through round-and-saturate; each SimSBNQ's moving averages
    become (bias, shift) buffers. Negative shifts are clamped to 0 with a
    ShiftClampWarning.
    """
    if model.flavor != "sim":
        raise ExportError("model is already integer-only")
    layers = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            _finite(layer.weight, i)
            layers.append(Conv2D(quantize_weight(layer.weight, model.weight_bits), layer.stride, layer.padding))
        elif isinstance(layer, Linear):
            _finite(layer.weight, i)
            layers.append(Linear(quantize_weight(layer.weight, model.weight_bits)))
        elif isinstance(layer, SimSBNQ):
            _finite(layer.running_mu, i)
            _finite(layer.running_sigma, i)
            if np.any(layer.running_sigma <= 0):
                raise ExportError(f"layer {i}: non-positive running sigma")
            layers.append(IntSBNQ(fuse_sbnq(layer.running_mu, layer.running_sigma, layer.spec)))
        else:
            layers.append(copy.deepcopy(layer))
    out = ModelGraph(layers, "integer", model.weight_bits, model.act_bits, model.input_shape, model.name)
    for layer in out.layers:
        for v in vars(layer).values():
            assert not (isinstance(v, np.ndarray) and v.dtype.kind == "f"), "real-valued parameter survived export"
    return out


def _finite(arr, i):
    if not np.all(np.isfinite(arr)):
        raise ExportError(f"layer {i}: NaN/inf in parameters or statistics")


def infer_int(model: ModelGraph, x: IntTensor, audit: OpAudit | None = None) -> IntTensor:
    """Integer-only forward pass: i32 logits of shape (N, classes).

    Uses only 4-bit x 4-bit multiplies, 32-bit accumulation and arithmetic
    right shifts (8-bit variants when the graph was built with N > 4).
    """
    if model.flavor != "integer":
        raise GraphError("infer_int needs an integer graph")
    if x.dtype != "u4":
        raise GraphError(f"input must be u4, got {x.dtype}")
    if x.shape[1:] != model.input_shape:
        raise GraphError(f"input shape {x.shape[1:]} does not match model {model.input_shape}")
    h = x
    for i, layer in enumerate(model.layers):
        name = f"{i}:{type(layer).__name__}"
        if isinstance(layer, Conv2D):
            h = itensor.conv2d_int(h, IntTensor(layer.weight, weight_dtype(model.weight_bits)),
                                   layer.stride, layer.padding, audit=audit, name=name)
        elif isinstance(layer, Linear):
            h = itensor.linear_int(h, IntTensor(layer.weight, weight_dtype(model.weight_bits)),
                                   audit=audit, name=name)
        elif isinstance(layer, IntSBNQ):
            if h.dtype != "i32":
                raise GraphError(f"{name}: SBNQ input must be i32, got {h.dtype}")
            p = layer.params
            h = IntTensor(sbnq_int(h.data, p), act_dtype(p.bits, p.signed_output))
        elif isinstance(layer, MaxPool):
            h = itensor.maxpool2d_int(h, layer.window, layer.stride)
        elif isinstance(layer, Flatten):
            h = itensor.flatten_int(h)
        if audit is not None:
            audit.record_output(name, h)
    return h


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

_TAG = {Conv2D: 1, Linear: 2, SimSBNQ: 3, IntSBNQ: 4, MaxPool: 5, Flatten: 6}
_ARR_CODE = {1: "<f8", 2: "<i1", 3: "<i4", 4: "<u1"}
_ARR_LOOKUP = {"f8": 1, "i1": 2, "i4": 3, "u1": 4}


def _pack_array(arr: np.ndarray, code: int) -> bytes:
    dt = np.dtype(_ARR_CODE[code])
    cast = arr.astype(dt)
    if not np.array_equal(cast, arr):
        raise FormatError(f"array does not fit {dt}")
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + cast.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("truncated model file")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def array(self) -> np.ndarray:
        code, ndim = self.take("<BB")
        if code not in _ARR_CODE:
            raise FormatError(f"unknown array dtype code {code}")
        dims = self.take(f"<{ndim}I")
        dt = np.dtype(_ARR_CODE[code])
        n = int(np.prod(dims)) * dt.itemsize
        if self.pos + n > len(self.buf):
            raise FormatError("truncated array payload")
        arr = np.frombuffer(self.buf, dt, int(np.prod(dims)), self.pos).reshape(dims)
        self.pos += n
        return arr.astype(np.float64 if dt.kind == "f" else np.int64)


def _encode_layer(layer, flavor: str) -> bytes:
    wcode = 1 if flavor == "sim" else 2
    if isinstance(layer, Conv2D):
        return struct.pack("<4I", *layer.stride, *layer.padding) + _pack_array(layer.weight, wcode)
    if isinstance(layer, Linear):
        return _pack_array(layer.weight, wcode)
    if isinstance(layer, SimSBNQ):
        return (struct.pack("<BBdQ", layer.bits, layer.signed, layer.momentum, layer.batches_seen)
                + _pack_array(layer.running_mu, 1) + _pack_array(layer.running_sigma, 1))
    if isinstance(layer, IntSBNQ):
        p = layer.params
        return struct.pack("<BB", p.bits, p.signed_output) + _pack_array(p.bias, 3) + _pack_array(p.shift, 4)
    if isinstance(layer, MaxPool):
        return struct.pack("<4I", *layer.window, *layer.stride)
    if isinstance(layer, Flatten):
        return b""
    raise FormatError(f"cannot serialize {type(layer).__name__}")


def _decode_layer(tag: int, r: _Reader):
    if tag == 1:
        sh, sw, ph, pw = r.take("<4I")
        return Conv2D(r.array(), (sh, sw), (ph, pw))
    if tag == 2:
        return Linear(r.array())
    if tag == 3:
        bits, signed, momentum, seen = r.take("<BBdQ")
        return SimSBNQ(bits, bool(signed), r.array(), r.array(), momentum, seen)
    if tag == 4:
        bits, signed = r.take("<BB")
        bias, shift = r.array(), r.array()
        return IntSBNQ(SbnqParams(bias, shift, bool(signed), bits))
    if tag == 5:
        kh, kw, sh, sw = r.take("<4I")
        return MaxPool((kh, kw), (sh, sw))
    if tag == 6:
        return Flatten()
    raise FormatError(f"unknown layer tag {tag}")


def to_bytes(model: ModelGraph) -> bytes:
    name = model.name.encode()
    out = [FORMAT_MAGIC, struct.pack("<HBBBB", FORMAT_VERSION, model.flavor == "integer",
                                     model.weight_bits, model.act_bits, len(model.input_shape))]
    out.append(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    out.append(struct.pack("<H", len(name)) + name)
    out.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        payload = _encode_layer(layer, model.flavor)
        out.append(struct.pack("<BI", _TAG[type(layer)], len(payload)) + payload)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes) -> ModelGraph:
    if len(buf) < 4 + 2 + 4 or buf[:4] != FORMAT_MAGIC:
        raise FormatError("not an SBNQ model file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch: model file is corrupted")
    r = _Reader(body)
    r.pos = 4
    version, is_int, wbits, abits, ndim = r.take("<HBBBB")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    input_shape = r.take(f"<{ndim}I")
    (name_len,) = r.take("<H")
    name = bytes(r.take(f"<{name_len}s")[0]).decode()
    (n_layers,) = r.take("<I")
    layers = []
    for _ in range(n_layers):
        tag, size = r.take("<BI")
        end = r.pos + size
        layers.append(_decode_layer(tag, r))
        if r.pos != end:
            raise FormatError(f"layer payload size mismatch for tag {tag}")
    if r.pos != len(body):
        raise FormatError("trailing bytes after layer table")
    try:
        return ModelGraph(layers, "integer" if is_int else "sim", wbits, abits, input_shape, name)
    except (GraphError, ValueError) as exc:
        raise FormatError(f"file decodes to an invalid graph: {exc}") from exc


def save(model: ModelGraph, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> ModelGraph:
    return from_bytes(Path(path).read_bytes())


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Structural and bit-exact numeric equality."""
    if (a.flavor, a.weight_bits, a.act_bits, a.input_shape, a.name, len(a.layers)) != (
        b.flavor, b.weight_bits, b.act_bits, b.input_shape, b.name, len(b.layers)
    ):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        va = vars(la.params) if isinstance(la, IntSBNQ) else vars(la)
        vb = vars(lb.params) if isinstance(lb, IntSBNQ) else vars(lb)
        for k in va:
            x, y = va[k], vb[k]
            if isinstance(x, np.ndarray):
                if not isinstance(y, np.ndarray) or x.dtype != y.dtype or x.shape != y.shape \
                        or x.tobytes() != y.tobytes():
                    return False
            elif x != y:
                return False
    return True
