"""Tests for the reverse-mode autodiff engine.

Gradient correctness is established against central finite differences in
64-bit mode; forward values are checked against independent numpy
reimplementations computed inside the tests.
"""

import os
import struct

import numpy as np
import pytest

from cmtbench import autodiff as ad


def test_quadratic_gradient_exact():
    # f(x) = x.x at (1,2,3) has gradient (2,4,6); integer arithmetic, so exact
    with ad.precision("float64"):
        x = ad.tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = ad.sum_t(ad.mul(x, x))
        y.backward()
        assert y.item() == 14.0
        expect = np.array([2.0, 4.0, 6.0])
        rel = np.abs(x.grad - expect) / np.abs(expect)
        assert rel.max() < 1e-9


def test_grad_check_every_op():
    with ad.precision("float64"):
        rng = np.random.default_rng(7)

        def t(*shape, scale=1.0, shift=0.0):
            return ad.tensor(rng.normal(size=shape) * scale + shift, requires_grad=True)

        cases = {}
        a, b = t(3, 4), t(3, 4)
        cases["add_mul_div"] = (lambda: ad.sum_t(ad.div(ad.mul(a, b) + a, ad.mul(b, b) + 2.0)), {"a": a, "b": b})
        c, d = t(2, 3, 4), t(4, 5)
        cases["matmul_batched"] = (lambda: ad.sum_t(ad.tanh(c @ d)), {"c": c, "d": d})
        e = t(4, 6, shift=3.0, scale=0.3)
        cases["exp_log_sqrt"] = (lambda: ad.sum_t(ad.log(ad.sqrt(e)) + ad.exp(-e)), {"e": e})
        f = t(5, 5, shift=0.5)  # keep entries away from the relu kink
        cases["relu_sigmoid"] = (lambda: ad.sum_t(ad.sigmoid(ad.relu(f))), {"f": f})
        g = t(3, 7)
        cases["softmax"] = (lambda: ad.sum_t(ad.mul(ad.softmax(g), ad.softmax(g))), {"g": g})
        gw = ad.tensor(rng.normal(size=(3, 7)))  # fixed weights keep the functional non-constant
        cases["log_softmax"] = (lambda: ad.sum_t(ad.mul(ad.log_softmax(g), gw)), {"g": g})
        h, hg, hb = t(4, 8), t(8, scale=0.2, shift=1.0), t(8, scale=0.2)
        cases["layer_norm"] = (lambda: ad.sum_t(ad.tanh(ad.layer_norm(h, hg, hb))), {"h": h, "hg": hg, "hb": hb})
        i = t(3, 6)
        cases["l2_normalize"] = (lambda: ad.sum_t(ad.exp(ad.l2_normalize(i))), {"i": i})
        j = t(2, 5, keepdims := 4)  # noqa: F841 - shape literal
        cases["reductions"] = (
            lambda: ad.sum_t(ad.mul(ad.mean_t(j, axis=1, keepdims=True), ad.sum_t(j, axis=2, keepdims=True))),
            {"j": j},
        )
        k1, k2 = t(2, 3), t(2, 2)
        cases["concat_slice"] = (
            lambda: ad.sum_t(ad.mul(ad.concat([k1, k2], axis=1)[:, 1:4], 2.0)),
            {"k1": k1, "k2": k2},
        )
        m = t(4, 9)
        midx = rng.integers(0, 9, size=(4, 3))
        cases["gather"] = (lambda: ad.sum_t(ad.tanh(ad.gather(m, midx))), {"m": m})
        n = t(3, 5)
        nmask = rng.random((3, 5)) > 0.6
        nw = ad.tensor(rng.normal(size=(3, 5)))
        cases["masked_fill"] = (
            lambda: ad.sum_t(ad.mul(ad.softmax(ad.masked_fill(n, nmask, ad.NEG_LARGE)), nw)),
            {"n": n},
        )
        o, p = t(4, 4), t(4, 4, shift=0.3)  # shift keeps ties measure-zero
        cases["min_max"] = (lambda: ad.sum_t(ad.maximum(o, p) + ad.minimum(o, ad.mul(p, 0.5))), {"o": o, "p": p})
        q = t(6, 3)
        qt = ad.tensor((rng.random((6, 3)) > 0.5).astype(float))
        cases["bce_with_logits"] = (lambda: ad.bce_with_logits(q, qt), {"q": q})
        r = t(5, 4, scale=2.0)
        rt = ad.tensor(rng.normal(size=(5, 4)))
        cases["smooth_l1"] = (lambda: ad.smooth_l1(r, rt), {"r": r})
        s, sw, sb = t(2, 3, 9, 9), t(4, 3, 3, 3, scale=0.4), t(4, scale=0.2)
        cases["conv2d_s1"] = (lambda: ad.sum_t(ad.relu(ad.conv2d(s, sw, sb, stride=1, padding=1))), {"s": s, "sw": sw, "sb": sb})
        cases["conv2d_s2"] = (lambda: ad.sum_t(ad.conv2d(s, sw, None, stride=2, padding=1)), {"s": s, "sw": sw})
        u = t(2, 3, 4)
        cases["reshape_transpose"] = (
            lambda: ad.sum_t(ad.mul(ad.transpose(u, (2, 0, 1)).reshape(4, 6), 3.0)),
            {"u": u},
        )

        for name, (fn, params) in cases.items():
            err = ad.grad_check(fn, params, n_samples=200)
            assert err < 1e-5, f"{name}: max rel grad error {err}"


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = ad.tensor(rng.normal(size=(10, 16)) * 5)
    s = ad.softmax(x)
    assert np.abs(s.data.sum(axis=-1) - 1.0).max() < 1e-6


def test_softmax_masked_entry_exact_zero():
    # both precisions: a NEG_LARGE logit must carry exactly zero weight
    for mode in ("float32", "float64"):
        with ad.precision(mode):
            x = ad.tensor(np.array([[2.0, -1.0, ad.NEG_LARGE, 0.5]]), requires_grad=True)
            s = ad.softmax(x)
            assert s.data[0, 2] == 0.0
            assert np.abs(s.data.sum() - 1.0) < 1e-6
            ad.sum_t(ad.mul(s, s)).backward()
            assert x.grad[0, 2] == 0.0


def test_layer_norm_statistics():
    rng = np.random.default_rng(11)
    x = ad.tensor(rng.normal(size=(8, 32)) * 4 + 2)
    out = ad.layer_norm(x, ad.tensor(np.ones(32)), ad.tensor(np.zeros(32)))
    assert np.abs(out.data.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.data.var(axis=-1) - 1.0).max() < 1e-4


def test_l2_normalize_unit_norm():
    rng = np.random.default_rng(4)
    x = ad.tensor(rng.normal(size=(6, 12)))
    out = ad.l2_normalize(x, axis=-1)
    assert np.abs(np.linalg.norm(out.data, axis=-1) - 1.0).max() < 1e-5


def test_conv2d_against_direct_loop():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 7, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=(4,)).astype(np.float32)
    stride, pad = 2, 1
    out = ad.conv2d(ad.tensor(x), ad.tensor(w), ad.tensor(b), stride=stride, padding=pad).data

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (7 + 2 * pad - 3) // stride + 1
    Wo = (6 + 2 * pad - 3) // stride + 1
    ref = np.zeros((2, 4, Ho, Wo), dtype=np.float64)
    for bi in range(2):
        for oi in range(4):
            for yi in range(Ho):
                for xi in range(Wo):
                    patch = xp[bi, :, yi * stride : yi * stride + 3, xi * stride : xi * stride + 3]
                    ref[bi, oi, yi, xi] = (patch * w[oi]).sum() + b[oi]
    assert out.shape == ref.shape
    assert np.abs(out - ref).max() < 1e-4


def test_matmul_gradient_analytic():
    # d(sum(AB))/dA = ones @ B^T, computed by hand
    with ad.precision("float64"):
        A = ad.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        B = ad.tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
        ad.sum_t(A @ B).backward()
        ones = np.ones((2, 2))
        assert np.array_equal(A.grad, ones @ B.data.T)
        assert np.array_equal(B.grad, A.data.T @ ones)


def test_broadcasting_gradient_shapes():
    with ad.precision("float64"):
        a = ad.tensor(np.random.default_rng(0).normal(size=(4, 5)), requires_grad=True)
        row = ad.tensor(np.random.default_rng(1).normal(size=(1, 5)), requires_grad=True)
        err = ad.grad_check(lambda: ad.sum_t(ad.tanh(a + row) * row), {"a": a, "row": row})
        assert err < 1e-5
        assert row.grad.shape == (1, 5)


def test_bce_matches_direct_formula():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(9, 2)) * 2
    t = (rng.random((9, 2)) > 0.5).astype(float)
    with ad.precision("float64"):
        got = ad.bce_with_logits(ad.tensor(z), ad.tensor(t)).item()
    sig = 1.0 / (1.0 + np.exp(-z))
    ref = -(t * np.log(sig) + (1 - t) * np.log(1 - sig)).mean()
    assert abs(got - ref) < 1e-9


def test_smooth_l1_piecewise_values():
    with ad.precision("float64"):
        pred = ad.tensor([0.0, 0.0, 3.0])
        targ = ad.tensor([0.5, 0.0, 0.0])  # |d| = 0.5 (quadratic), 0, 3 (linear)
        got = ad.smooth_l1(pred, targ, beta=1.0).item()
    ref = (0.5 * 0.25 + 0.0 + (3.0 - 0.5)) / 3.0
    assert abs(got - ref) < 1e-12


def test_topk_lowest_index_tie_break():
    v = np.array([[1.0, 3.0, 3.0, 2.0, 3.0]])
    assert ad.topk_indices(v, 1).tolist() == [[1]]
    assert ad.topk_indices(v, 2).tolist() == [[1, 2]]
    assert ad.topk_indices(v, 3).tolist() == [[1, 2, 4]]
    with pytest.raises(ad.ShapeError):
        ad.topk_indices(v, 6)


def test_topk_selection_constant_in_backward():
    # gradient lands only on the selected entries; selection itself carries none
    with ad.precision("float64"):
        rng = np.random.default_rng(2)
        x = ad.tensor(rng.normal(size=(3, 8)), requires_grad=True)
        idx = ad.topk_indices(x, 3)
        y = ad.gather(x, idx)
        ad.sum_t(ad.mul(y, y)).backward()
        nz = x.grad != 0
        expect = np.zeros((3, 8), dtype=bool)
        for r in range(3):
            expect[r, idx[r]] = True
        assert np.array_equal(nz, expect)
        err = ad.grad_check(lambda: ad.sum_t(ad.mul(ad.gather(x, ad.topk_indices(x, 3)), ad.gather(x, ad.topk_indices(x, 3)))), {"x": x})
        assert err < 1e-5


def test_take_accumulates_duplicate_indices():
    with ad.precision("float64"):
        x = ad.tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = ad.take(x, np.array([0, 0, 2]))
        ad.sum_t(y).backward()
        assert x.grad.tolist() == [2.0, 0.0, 1.0]


def test_maximum_tie_routes_to_first():
    with ad.precision("float64"):
        a = ad.tensor([1.0, 5.0], requires_grad=True)
        b = ad.tensor([1.0, 2.0], requires_grad=True)
        ad.sum_t(ad.maximum(a, b)).backward()
        assert a.grad.tolist() == [1.0, 1.0]
        assert b.grad.tolist() == [0.0, 0.0]


def test_shape_errors_name_op_and_shapes():
    a = ad.tensor(np.zeros((3, 4)))
    b = ad.tensor(np.zeros((5, 6)))
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(3, 4\).*\(5, 6\)"):
        ad.matmul(a, b)
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((3, 3)))], axis=1)
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(ad.tensor(np.zeros((1, 3, 8, 8))), ad.tensor(np.zeros((4, 2, 3, 3))))
    with pytest.raises(ad.ShapeError, match="gather"):
        ad.gather(ad.tensor(np.zeros((3, 4))), np.zeros(3, dtype=int))


def test_grad_check_samples_enough_coordinates():
    with ad.precision("float64"):
        x = ad.tensor(np.random.default_rng(0).normal(size=(25, 40)), requires_grad=True)
        calls = {"n": 0}

        def f():
            calls["n"] += 1
            return ad.sum_t(ad.mul(x, x))

        ad.grad_check(f, {"x": x}, n_samples=200)
        # one forward+backward pass plus two evaluations per sampled coordinate
        assert calls["n"] >= 1 + 2 * 200


def test_forward_backward_bit_identical():
    def run():
        with ad.precision("float32"):
            rng = np.random.default_rng(42)
            x = ad.tensor(rng.normal(size=(3, 4, 16)), requires_grad=True)
            w = ad.tensor(rng.normal(size=(16, 16)) * 0.3, requires_grad=True)
            h = ad.softmax(ad.layer_norm(x @ w, ad.tensor(np.ones(16)), ad.tensor(np.zeros(16))))
            loss = ad.sum_t(ad.mul(h, h))
            loss.backward()
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

    l1, g1, g2 = run()
    l2, g3, g4 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g3)
    assert np.array_equal(g2, g4)


def test_default_dtype_is_float32():
    x = ad.tensor([1.0, 2.0])
    assert x.data.dtype == np.float32
    y = ad.exp(x)
    assert y.data.dtype == np.float32


def test_neg_large_constant():
    assert ad.NEG_LARGE == -1e9
    assert np.isfinite(np.float32(ad.NEG_LARGE))


def test_checkpoint_roundtrip_and_layout(tmp_path):
    path = tmp_path / "model.cmt"
    named = {
        "b": np.array([[1.0, -2.0], [0.5, 4.0]], dtype=np.float32),
        "a": np.arange(3, dtype=np.float32),
    }
    ad.save_tensors(path, named)
    back = ad.load_tensors(path)
    assert set(back) == {"a", "b"}
    assert np.array_equal(back["a"], named["a"])
    assert np.array_equal(back["b"], named["b"])

    raw = path.read_bytes()
    assert raw[:4] == b"CMT1"
    (count,) = struct.unpack("<I", raw[4:8])
    assert count == 2
    # records are name-sorted; first is "a": u32 len, name, u32 rank, dims, payload
    off = 8
    (nlen,) = struct.unpack("<I", raw[off : off + 4])
    assert nlen == 1
    assert raw[off + 4 : off + 5] == b"a"
    (rank,) = struct.unpack("<I", raw[off + 5 : off + 9])
    assert rank == 1
    (dim0,) = struct.unpack("<I", raw[off + 9 : off + 13])
    assert dim0 == 3
    payload = np.frombuffer(raw[off + 13 : off + 25], dtype="<f4")
    assert np.array_equal(payload, named["a"])


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    bad = tmp_path / "bad.cmt"
    bad.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        ad.load_tensors(bad)

    good = tmp_path / "good.cmt"
    ad.save_tensors(good, {"w": np.ones((4, 4), dtype=np.float32)})
    cut = tmp_path / "cut.cmt"
    cut.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        ad.load_tensors(cut)


def test_no_grad_blocks_tape():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        y = ad.sum_t(ad.mul(x, x))
    assert y._parents == ()
    assert not y.requires_grad
