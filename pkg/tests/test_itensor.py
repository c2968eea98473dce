import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from sbnq import itensor
from sbnq.itensor import (
    BitwidthError,
    IntTensor,
    OpAudit,
    ShapeError,
    conv2d_int,
    flatten_int,
    linear_int,
    maxpool2d_int,
    product_limit,
)


def rand(rng, shape, dtype):
    lo, hi = itensor.DTYPE_RANGES[dtype]
    return IntTensor(rng.integers(lo, hi + 1, shape), dtype)


def conv_oracle(x, w, stride, padding):
    # float64 conv of small integers is exact
    out = F.conv2d(torch.as_tensor(x, dtype=torch.float64), torch.as_tensor(w, dtype=torch.float64),
                   stride=stride, padding=padding)
    return out.numpy().astype(np.int64)


def conv_brute(x, w, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=object)
    for b in range(n):
        for k in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, k, i, j] = sum(int(a) * int(q) for a, q in zip(patch.ravel(), w[k].ravel()))
    return out


class TestIntTensor:
    @pytest.mark.parametrize("dtype,bad", [("u4", 16), ("u4", -1), ("i4", -8), ("i4", 8), ("i8", 128)])
    def test_range_checked(self, dtype, bad):
        with pytest.raises(BitwidthError):
            IntTensor(np.array([bad]), dtype)

    def test_rejects_float_storage_and_unknown_dtype(self):
        with pytest.raises(TypeError):
            IntTensor(np.array([1.0]), "i4")
        with pytest.raises(ValueError):
            IntTensor(np.array([1]), "i16")

    def test_dims_and_equality(self):
        t = IntTensor(np.arange(6).reshape(2, 3), "u4")
        assert t.dims == (2, 3) and t.data.size == 6
        assert t == IntTensor(np.arange(6).reshape(2, 3), "u4")
        assert t != IntTensor(np.arange(6).reshape(2, 3), "i32")

    def test_product_limits(self):
        assert product_limit("u4", "i4") == 127
        assert 15 * 7 <= 127 and 7 * 7 <= 127


class TestConv:
    def test_scalar(self):
        out = conv2d_int(IntTensor(np.full((1, 1, 1, 1), 3), "u4"), IntTensor(np.full((1, 1, 1, 1), 2), "i4"))
        assert out.dtype == "i32" and out.data.ravel().tolist() == [6]

    def test_sum(self):
        x = IntTensor(np.array([1, 2, 3, 4]).reshape(1, 1, 2, 2), "u4")
        w = IntTensor(np.ones((1, 1, 2, 2), dtype=np.int64), "i4")
        assert conv2d_int(x, w).data.ravel().tolist() == [10]

    def test_random_matches_float_conv(self):
        rng = np.random.default_rng(0)
        x, w = rand(rng, (1, 2, 5, 5), "u4"), rand(rng, (3, 2, 3, 3), "i4")
        np.testing.assert_array_equal(conv2d_int(x, w).data, conv_oracle(x.data, w.data, 1, 0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(3, 9), st.integers(1, 3),
           st.integers(1, 2), st.integers(0, 1), st.sampled_from(["u4", "i4"]), st.integers(0, 2**32 - 1))
    def test_matches_arbitrary_precision(self, n, c, o, hw, k, stride, pad, xdt, seed):
        rng = np.random.default_rng(seed)
        x, w = rand(rng, (n, c, hw, hw), xdt), rand(rng, (o, c, k, k), "i4")
        got = conv2d_int(x, w, stride, pad).data
        assert got.tolist() == conv_brute(x.data, w.data, stride, pad).tolist()

    def test_batch_larger_than_row_block(self):
        rng = np.random.default_rng(1)
        x, w = rand(rng, (itensor.ROW_BLOCK * 2 + 3, 1, 6, 6), "u4"), rand(rng, (2, 1, 3, 3), "i4")
        np.testing.assert_array_equal(conv2d_int(x, w, 1, 1).data, conv_oracle(x.data, w.data, 1, 1))

    def test_independent_of_thread_count(self, monkeypatch):
        rng = np.random.default_rng(2)
        x, w = rand(rng, (300, 2, 8, 8), "u4"), rand(rng, (4, 2, 3, 3), "i4")
        monkeypatch.setenv("SBNQ_NUM_THREADS", "1")
        one = conv2d_int(x, w, 1, 1)
        monkeypatch.setenv("SBNQ_NUM_THREADS", "4")
        assert conv2d_int(x, w, 1, 1) == one

    def test_shape_errors(self):
        x = IntTensor(np.zeros((1, 2, 4, 4), dtype=np.int64), "u4")
        with pytest.raises(ShapeError):
            conv2d_int(x, IntTensor(np.zeros((1, 3, 3, 3), dtype=np.int64), "i4"))
        with pytest.raises(ShapeError):
            conv2d_int(x, IntTensor(np.zeros((1, 2, 5, 5), dtype=np.int64), "i4"))

    def test_rejects_wide_operands(self):
        x = IntTensor(np.zeros((1, 1, 2, 2), dtype=np.int64), "i32")
        with pytest.raises(BitwidthError):
            conv2d_int(x, IntTensor(np.zeros((1, 1, 1, 1), dtype=np.int64), "i4"))


class TestLinear:
    def test_examples(self):
        one = linear_int(IntTensor(np.array([1]), "u4"), IntTensor(np.array([[1]]), "i4"))
        assert one.data.tolist() == [1]
        x, w = IntTensor(np.array([7, 7]), "i4"), IntTensor(np.array([[7, 7]]), "i4")
        assert linear_int(x, w).data.tolist() == [98]

    def test_random_matches_float_matmul(self):
        rng = np.random.default_rng(3)
        x, w = rand(rng, (16,), "u4"), rand(rng, (10, 16), "i4")
        want = (x.data.astype(np.float64) @ w.data.T.astype(np.float64)).astype(np.int64)
        np.testing.assert_array_equal(linear_int(x, w).data, want)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_matches_python_ints(self, n, fin, fout, seed):
        rng = np.random.default_rng(seed)
        x, w = rand(rng, (n, fin), "u4"), rand(rng, (fout, fin), "i4")
        want = [[sum(int(a) * int(b) for a, b in zip(row, wr)) for wr in w.data] for row in x.data]
        assert linear_int(x, w).data.tolist() == want

    def test_accumulator_overflow_is_an_error(self):
        # 8-bit operands reach 2^31 after ~66k products
        n = 70000
        x = IntTensor(np.full((1, n), 255), "u8")
        w = IntTensor(np.full((1, n), 127), "i8")
        with pytest.raises(BitwidthError):
            linear_int(x, w)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            linear_int(IntTensor(np.zeros((2, 3), dtype=np.int64), "u4"),
                       IntTensor(np.zeros((4, 5), dtype=np.int64), "i4"))


class TestMaxPool:
    def test_examples(self):
        x = IntTensor(np.array([[1, 2], [3, 4]]).reshape(1, 1, 2, 2), "u4")
        assert maxpool2d_int(x, 2).data.ravel().tolist() == [4]
        c = IntTensor(np.full((2, 3, 4, 4), 5), "i4")
        out = maxpool2d_int(c, 2)
        assert out.dtype == "i4" and np.all(out.data == 5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_matches_nested_loops(self, k, s, seed):
        rng = np.random.default_rng(seed)
        h = k + s * int(rng.integers(0, 4))
        x = rand(rng, (2, 3, h, h), "i4")
        got = maxpool2d_int(x, k, s).data
        oh = (h - k) // s + 1
        for b in range(2):
            for c in range(3):
                for i in range(oh):
                    for j in range(oh):
                        assert got[b, c, i, j] == x.data[b, c, i * s:i * s + k, j * s:j * s + k].max()

    def test_window_must_tile(self):
        with pytest.raises(ShapeError):
            maxpool2d_int(IntTensor(np.zeros((1, 1, 5, 5), dtype=np.int64), "u4"), 2)

    def test_flatten(self):
        x = IntTensor(np.arange(16).reshape(1, 1, 4, 4), "u4")
        assert flatten_int(x).shape == (1, 16)


class TestAudit:
    def test_records_bounds(self):
        rng = np.random.default_rng(4)
        audit = OpAudit()
        x, w = rand(rng, (3, 2, 6, 6), "u4"), rand(rng, (4, 2, 3, 3), "i4")
        conv2d_int(x, w, 1, 1, audit=audit, name="c")
        entry = audit.summary()["c"]
        assert entry["multiplies"] == 3 * 4 * 6 * 6 * 18
        assert entry["max_abs_product"] == np.abs(x.data).max() * np.abs(w.data).max() <= 127
        brute = conv_brute(np.abs(x.data), np.abs(w.data), 1, 1)
        assert entry["max_abs_partial_sum"] == max(brute.ravel())
        assert audit.violations == []

    def test_flags_violations(self):
        audit = OpAudit()
        x = IntTensor(np.array([[1]]), "u4")
        w = IntTensor(np.array([[1]]), "i4")
        audit.record_products("fake", x, w, np.array([2**31]), 1)
        assert len(audit.violations) == 1 and "32 bits" in audit.violations[0]

    def test_output_ranges(self):
        audit = OpAudit()
        audit.record_output("o", IntTensor(np.array([-3, 9]), "i32"))
        s = audit.summary()["o"]
        assert (s["out_min"], s["out_max"], s["out_dtype"]) == (-3, 9, "i32")
