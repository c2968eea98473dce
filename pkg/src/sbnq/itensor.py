"""Integer tensors and the integer-only compute kernels.

Kernels take 4-bit operands, form products that fit 8 bits and accumulate into
32 bits (8-bit operands and 16-bit products for N=8 graphs). Arithmetic runs on
int64 numpy arrays; the narrower widths are enforced by range checks, and
overflow raises instead of wrapping.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE_RANGES = {
    "u4": (0, 15),
    "i4": (-7, 7),
    "u8": (0, 255),
    "i8": (-128, 127),
    "i32": (-(2**31), 2**31 - 1),
}
ACT_OPERANDS = ("u4", "i4", "u8", "i8")
WEIGHT_OPERANDS = ("i4", "i8")


class BitwidthError(ArithmeticError):
    """A value escaped the bitwidth its operation class allows."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class IntTensor:
    """N-d integer array tagged with the bitwidth it must respect."""

    data: np.ndarray
    dtype: str

    def __post_init__(self):
        if self.dtype not in DTYPE_RANGES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        arr = np.asarray(self.data)
        if arr.dtype.kind not in "iu":
            raise TypeError(f"IntTensor needs integer storage, got {arr.dtype}")
        arr = arr.astype(np.int64, copy=False)
        lo, hi = DTYPE_RANGES[self.dtype]
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise BitwidthError(
                f"{self.dtype} tensor holds values in [{arr.min()}, {arr.max()}], "
                f"allowed [{lo}, {hi}]"
            )
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __eq__(self, other):
        if not isinstance(other, IntTensor):
            return NotImplemented
        return self.dtype == other.dtype and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass
class LayerAudit:
    name: str
    multiplies: int = 0
    max_abs_product: int = 0
    max_abs_partial_sum: int = 0
    out_min: int = 0
    out_max: int = 0
    out_dtype: str = ""


@dataclass
class OpAudit:
    """Records bitwidth evidence for every kernel call.

    ``max_abs_product`` is max|x| * max|w| over the operands of a call, an upper
    bound on every product formed. ``max_abs_partial_sum`` is the largest entry
    of sum(|x| * |w|), which bounds every partial sum regardless of summation
    order.
    """

    layers: list[LayerAudit] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    def record_products(self, name, x: IntTensor, w: IntTensor, partial_bound, multiplies):
        entry = LayerAudit(name)
        entry.multiplies = int(multiplies)
        entry.max_abs_product = int(np.abs(x.data).max(initial=0) * np.abs(w.data).max(initial=0))
        entry.max_abs_partial_sum = int(partial_bound.max(initial=0))
        limit = product_limit(x.dtype, w.dtype)
        if entry.max_abs_product > limit:
            self.violations.append(f"{name}: product bound {entry.max_abs_product} exceeds {limit}")
        if entry.max_abs_partial_sum > DTYPE_RANGES["i32"][1]:
            self.violations.append(f"{name}: partial sum bound {entry.max_abs_partial_sum} exceeds 32 bits")
        self.layers.append(entry)

    def record_output(self, name, t: IntTensor):
        entry = LayerAudit(name, out_dtype=t.dtype)
        if t.data.size:
            entry.out_min, entry.out_max = int(t.data.min()), int(t.data.max())
        lo, hi = DTYPE_RANGES[t.dtype]
        if entry.out_min < lo or entry.out_max > hi:
            self.violations.append(f"{name}: output escaped {t.dtype}")
        self.layers.append(entry)

    def merge(self, other: "OpAudit"):
        self.layers.extend(other.layers)
        self.violations.extend(other.violations)

    def summary(self) -> dict:
        by_name: dict[str, dict] = {}
        for e in self.layers:
            s = by_name.setdefault(
                e.name,
                {"multiplies": 0, "max_abs_product": 0, "max_abs_partial_sum": 0,
                 "out_min": None, "out_max": None, "out_dtype": e.out_dtype},
            )
            s["multiplies"] += e.multiplies
            s["max_abs_product"] = max(s["max_abs_product"], e.max_abs_product)
            s["max_abs_partial_sum"] = max(s["max_abs_partial_sum"], e.max_abs_partial_sum)
            if e.out_dtype:
                s["out_min"] = e.out_min if s["out_min"] is None else min(s["out_min"], e.out_min)
                s["out_max"] = e.out_max if s["out_max"] is None else max(s["out_max"], e.out_max)
        return by_name


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("SBNQ_NUM_THREADS", "1")))
    except ValueError:
        return 1


def width(dtype: str) -> int:
    return int(dtype[1:])


def product_limit(x_dtype: str, w_dtype: str) -> int:
    """Largest |product| allowed: 4b x 4b must fit a signed 8-bit value."""
    return 2 ** (width(x_dtype) + width(w_dtype) - 1) - 1


def _check_operands(x: IntTensor, w: IntTensor):
    if x.dtype not in ACT_OPERANDS:
        raise BitwidthError(f"activation operand must be 4- or 8-bit, got {x.dtype}")
    if w.dtype not in WEIGHT_OPERANDS:
        raise BitwidthError(f"weight operand must be i4 or i8, got {w.dtype}")


def _to_i32(acc: np.ndarray) -> IntTensor:
    lo, hi = DTYPE_RANGES["i32"]
    if acc.size and (acc.min() < lo or acc.max() > hi):
        raise BitwidthError("32-bit accumulator overflow")
    return IntTensor(acc, "i32")


ROW_BLOCK = 128  # bounds the size of im2col buffers


def _parallel_rows(fn, n_rows: int, *arrays):
    """Apply ``fn`` to contiguous row blocks and concatenate.

    Blocks are disjoint and results are exact integers, so the output does not
    depend on the thread count.
    """
    starts = list(range(0, n_rows, ROW_BLOCK)) or [0]

    def block(s):
        return fn(*(a[s:s + ROW_BLOCK] for a in arrays))

    threads = min(num_threads(), len(starts))
    if threads == 1:
        parts = [block(s) for s in starts]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(block, starts))
    return np.concatenate(parts, axis=0)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _patches(x: np.ndarray, kh: int, kw: int, stride, padding) -> np.ndarray:
    """(N, C, H, W) -> (N, OH, OW, C*kh*kw) with zero padding."""
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)


def conv2d_int(
    x: IntTensor, w: IntTensor, stride=1, padding=0, audit: OpAudit | None = None, name: str = "conv"
) -> IntTensor:
    """Exact 2-D convolution (cross-correlation) of 4-bit tensors into i32.

    x is (N, C, H, W), w is (O, C, kh, kw). No bias term.
    """
    _check_operands(x, w)
    stride, padding = _pair(stride), _pair(padding)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d_int expects 4-D input and weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    o, _, kh, kw = w.shape
    if x.shape[2] + 2 * padding[0] < kh or x.shape[3] + 2 * padding[1] < kw:
        raise ShapeError("kernel larger than padded input")
    wmat = w.data.reshape(o, -1).T

    def run(xs):
        p = _patches(xs, kh, kw, stride, padding)
        return p @ wmat

    acc = _parallel_rows(run, x.shape[0], x.data)  # (N, OH, OW, O)
    if audit is not None:
        absw = np.abs(wmat)
        bound = _parallel_rows(lambda xs: np.abs(_patches(xs, kh, kw, stride, padding)) @ absw,
                               x.shape[0], x.data)
        audit.record_products(name, x, w, bound, acc.size * wmat.shape[0])
    return _to_i32(np.ascontiguousarray(acc.transpose(0, 3, 1, 2)))


def linear_int(x: IntTensor, w: IntTensor, audit: OpAudit | None = None, name: str = "linear") -> IntTensor:
    """Exact x @ w.T for 4-bit x (N, in) or (in,) and i4 w (out, in), into i32."""
    _check_operands(x, w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear_int: input {x.shape} incompatible with weight {w.shape}")
    wt = w.data.T
    xs = x.data if x.data.ndim == 2 else x.data[None]
    acc = _parallel_rows(lambda a: a @ wt, xs.shape[0], xs)
    if audit is not None:
        bound = np.abs(xs) @ np.abs(wt)
        audit.record_products(name, x, w, bound, acc.size * wt.shape[0])
    if x.data.ndim == 1:
        acc = acc[0]
    return _to_i32(acc)


def maxpool2d_int(x: IntTensor, window=2, stride=None) -> IntTensor:
    """Max over (kh, kw) windows of an (N, C, H, W) tensor; dtype preserved."""
    kh, kw = _pair(window)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d_int expects a 4-D tensor")
    h, wd = x.shape[2:]
    if h < kh or wd < kw or (h - kh) % sh or (wd - kw) % sw:
        raise ShapeError(f"window {kh}x{kw}/stride {sh}x{sw} does not tile {h}x{wd}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return IntTensor(win.max(axis=(-2, -1)), x.dtype)


def flatten_int(x: IntTensor) -> IntTensor:
    return IntTensor(x.data.reshape(x.shape[0], -1), x.dtype)
