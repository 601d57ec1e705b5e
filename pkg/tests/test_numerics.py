import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardioguard import numerics as nx
from cardioguard.errors import ChecksumMismatch, FormatVersionMismatch, NonFiniteError, NotScalarLoss, ShapeMismatch


def loop_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for k in range(o):
            for y in range(ho):
                for xx in range(wo):
                    patch = xp[i, :, y * stride:y * stride + kh, xx * stride:xx * stride + kw]
                    out[i, k, y, xx] = (patch * w[k]).sum() + (b[k] if b is not None else 0)
    return out


def numeric_grad(f, arr, idx, eps):
    a = arr.copy()
    a[idx] += eps
    fp = f(a)
    a[idx] -= 2 * eps
    fm = f(a)
    return (fp - fm) / (2 * eps)


# ---------------------------------------------------------------- conv


def test_identity_kernel_leaves_input_unchanged():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1
    out = nx.conv2d(nx.Tensor(x), nx.Tensor(w)).data
    np.testing.assert_array_equal(out, x)


def test_all_ones_kernel_valid_padding():
    out = nx.conv2d(nx.Tensor(np.ones((1, 1, 4, 4))), nx.Tensor(np.ones((1, 1, 3, 3))), padding="valid").data
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out == 9)


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = nx.conv2d(nx.Tensor(x), nx.Tensor(w), nx.Tensor(b), stride, padding).data
    want = loop_conv(x, w, b, stride, 1 if padding == "same" else 0)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_stride_two_same_halves():
    out = nx.conv2d(nx.Tensor(np.zeros((1, 2, 16, 16))), nx.Tensor(np.zeros((5, 2, 3, 3))), stride=2)
    assert out.shape == (1, 5, 8, 8)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        nx.conv2d(nx.Tensor(np.zeros((1, 2, 4, 4))), nx.Tensor(np.zeros((1, 3, 3, 3))))


def test_transposed_shape_and_single_pixel():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((1, 2, 2, 2))
    out = nx.conv2d_transposed(nx.Tensor(np.full((1, 1, 1, 1), 3.0)), nx.Tensor(w)).data
    np.testing.assert_allclose(out[0], 3.0 * w[0], rtol=1e-12)
    big = nx.conv2d_transposed(nx.Tensor(np.zeros((1, 4, 8, 8))), nx.Tensor(np.zeros((4, 2, 2, 2))))
    assert big.shape == (1, 2, 16, 16)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_transposed_is_adjoint_of_strided_conv(n, c, o, hw, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, o, 2 * hw, 2 * hw))
    y = rng.standard_normal((n, c, hw, hw))
    w = rng.standard_normal((c, o, 2, 2))
    conv = nx.conv2d(nx.Tensor(x), nx.Tensor(w), stride=2, padding="valid").data
    convt = nx.conv2d_transposed(nx.Tensor(y), nx.Tensor(w)).data
    lhs, rhs = (conv * y).sum(), (x * convt).sum()
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


# ---------------------------------------------------------------- dense / activations


def test_dense_loop_oracle():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)
    want = np.array([[sum(x[i, k] * w[k, j] for k in range(5)) + b[j] for j in range(4)] for i in range(3)])
    np.testing.assert_allclose(nx.dense(nx.Tensor(x), nx.Tensor(w), nx.Tensor(b)).data, want, atol=1e-5)


def test_dense_shape_error():
    with pytest.raises(ShapeMismatch):
        nx.dense(nx.Tensor(np.zeros((2, 3))), nx.Tensor(np.zeros((4, 2))), nx.Tensor(np.zeros(2)))


def test_elu_values():
    out = nx.elu(nx.Tensor(np.array([0.0, 1.5, -1.0]))).data
    np.testing.assert_allclose(out, [0.0, 1.5, np.expm1(-1.0)])


def test_softmax_equal_scores_uniform():
    p = nx.softmax_channels(nx.Tensor(np.zeros((1, 4, 3, 3)))).data
    np.testing.assert_allclose(p, 0.25)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5))
def test_softmax_sums_to_one_and_positive(seed, spread):
    x = np.random.default_rng(seed).standard_normal((2, 4, 5, 5)) * spread
    p = nx.softmax_channels(nx.Tensor(x.astype(np.float32))).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


# ---------------------------------------------------------------- losses


def test_kl_closed_forms():
    z = np.zeros((1, 6))
    assert float(nx.kl_diag_vs_standard(nx.Tensor(z), nx.Tensor(z)).data) == 0.0
    kl = float(nx.kl_diag_vs_standard(nx.Tensor(np.ones((1, 6))), nx.Tensor(z)).data)
    assert kl == pytest.approx(0.5 * 6)
    rng = np.random.default_rng(3)
    m, lv = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    assert float(nx.kl_diag_vs_diag(nx.Tensor(m), nx.Tensor(lv), nx.Tensor(m), nx.Tensor(lv)).data) == pytest.approx(0, abs=1e-12)


def test_kl_diag_matches_monte_carlo():
    rng = np.random.default_rng(4)
    m1, l1, m2, l2 = (rng.standard_normal(3) * 0.5 for _ in range(4))
    kl = float(nx.kl_diag_vs_diag(*(nx.Tensor(a[None]) for a in (m1, l1, m2, l2))).data)
    s = m1 + np.exp(0.5 * l1) * rng.standard_normal((400_000, 3))

    def logpdf(x, m, lv):
        return -0.5 * (((x - m) ** 2) / np.exp(lv) + lv + np.log(2 * np.pi)).sum(1)

    mc = (logpdf(s, m1, l1) - logpdf(s, m2, l2)).mean()
    assert kl == pytest.approx(mc, abs=0.02)
    assert kl >= 0


def test_l2_and_nll_pixelwise():
    assert float(nx.l2(nx.Tensor(np.array([[1.0], [3.0]])), np.array([[0.0], [1.0]])).data) == pytest.approx(2.5)
    probs = np.full((1, 4, 2, 2), 0.25)
    val = float(nx.nll_pixelwise(nx.Tensor(probs), np.zeros((1, 2, 2), int)).data)
    assert val == pytest.approx(4 * np.log(4))
    with pytest.raises(ShapeMismatch):
        nx.l2(nx.Tensor(np.zeros((2, 1))), np.zeros((3, 1)))


def test_softmax_nll_gradient_is_probs_minus_onehot():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((1, 4, 3, 3))
    target = rng.integers(0, 4, (1, 3, 3))
    x = nx.Tensor(logits, requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.softmax_nll(x, target)
    nx.backward(tape, loss)
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    np.testing.assert_allclose(x.grad, p - nx.one_hot(target, 4), atol=1e-5)


# ---------------------------------------------------------------- backward


def test_square_gradient():
    x = nx.Tensor(np.array(3.0), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.square(x)
    nx.backward(tape, y)
    assert float(x.grad) == 6.0


def test_not_scalar_loss():
    x = nx.Tensor(np.ones(3), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.square(x)
    with pytest.raises(NotScalarLoss):
        nx.backward(tape, y)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        nx.exp(nx.Tensor(np.array([1e5])))


def _chain_loss(p):
    h = nx.elu(nx.conv2d(nx.Tensor(p["x"]), p["w1"], p["b1"], stride=2))
    h = nx.conv2d_transposed(h, p["wt"], p["bt"])
    flat = nx.reshape(h, (h.shape[0], -1))
    out = nx.dense(flat, p["wd"], p["bd"])
    lg = nx.reshape(out, (out.shape[0], 4, 2, 2))
    nll = nx.softmax_nll(lg, p["target"])
    mu, lv = nx.reshape(nx.scale(out, 0.3), (out.shape[0], 16)), nx.reshape(nx.scale(out, 0.1), (out.shape[0], 16))
    return nx.add(nx.add(nll, nx.kl_diag_vs_standard(mu, lv)), nx.total(nx.square(nx.sub(mu, nx.exp(nx.scale(lv, 0.5))))))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_chain_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    fixed = {"x": rng.standard_normal((2, 3, 6, 6)), "target": rng.integers(0, 4, (2, 2, 2))}
    params = {
        "w1": rng.standard_normal((4, 3, 3, 3)) * 0.3, "b1": rng.standard_normal(4) * 0.1,
        "wt": rng.standard_normal((4, 2, 2, 2)) * 0.3, "bt": rng.standard_normal(2) * 0.1,
        "wd": rng.standard_normal((72, 16)) * 0.1, "bd": rng.standard_normal(16) * 0.1,
    }

    def f(tensors):
        return _chain_loss({**fixed, **tensors})

    _, grads = nx.grad_of(f, params)
    for name, arr in params.items():
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in arr.shape)

            def scalar(a, name=name):
                return float(f({**{k: nx.Tensor(v) for k, v in params.items()}, name: nx.Tensor(a)}).data)

            num = numeric_grad(scalar, arr, idx, 1e-6)
            assert grads[name][idx] == pytest.approx(num, rel=1e-4, abs=1e-6), name


def test_float32_finite_difference_budget():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    w = (rng.standard_normal((3, 2, 3, 3)) * 0.5).astype(np.float32)
    wd = (rng.standard_normal((48, 2)) * 0.3).astype(np.float32)

    def f(wv):
        h = nx.elu(nx.conv2d(nx.Tensor(x), wv if isinstance(wv, nx.Tensor) else nx.Tensor(wv)))
        return nx.total(nx.square(nx.dense(nx.reshape(h, (1, 48)), nx.Tensor(wd), nx.Tensor(np.zeros(2, np.float32)))))

    _, g = nx.grad_of(lambda t: f(t["w"]), {"w": w})
    scale = np.abs(w).mean()
    for idx in [(0, 0, 1, 1), (2, 1, 0, 2), (1, 0, 2, 0)]:
        num = numeric_grad(lambda a: float(f(a).data), w.astype(np.float64).astype(np.float32), idx, 1e-2 * scale)
        assert abs(g["w"][idx] - num) <= 1e-3 * max(abs(num), 1.0) + 5e-3 * abs(num)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_only_shrinks():
    p = {"a": np.array([1.0, -2.0], np.float32)}
    st_ = nx.AdamState(lr=0.1, weight_decay=0.01)
    out = nx.adam_step(st_, p, {"a": np.zeros(2, np.float32)})
    np.testing.assert_allclose(out["a"], p["a"] * (1 - 0.1 * 0.01), rtol=1e-6)
    assert st_.step == 1


def test_adam_first_step_is_lr_sign():
    p = {"a": np.zeros(3, np.float32)}
    g = {"a": np.array([0.5, -3.0, 100.0], np.float32)}
    out = nx.adam_step(nx.AdamState(lr=0.01, weight_decay=0.0), p, g)
    np.testing.assert_allclose(out["a"], -0.01 * np.sign(g["a"]), rtol=1e-5)


def test_adam_converges_on_quadratic_bowl():
    target = np.array([1.5, -0.7, 3.0])
    p = {"x": np.zeros(3)}
    state = nx.AdamState(lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        p = nx.adam_step(state, p, {"x": 2 * (p["x"] - target)})
    assert np.max(np.abs(p["x"] - target)) < 1e-3


def test_adam_frozen_and_shape_check():
    p = {"a": np.ones(2, np.float32), "b": np.ones(2, np.float32)}
    out = nx.adam_step(nx.AdamState(), p, {"a": np.ones(2, np.float32), "b": np.ones(2, np.float32)}, frozenset({"b"}))
    assert out["b"] is p["b"]
    with pytest.raises(ShapeMismatch):
        nx.adam_step(nx.AdamState(), p, {"a": np.ones(3, np.float32), "b": np.ones(2, np.float32)})


# ---------------------------------------------------------------- serialization


def test_params_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(8)
    params = {"w": rng.standard_normal((3, 4)).astype(np.float32), "b": rng.standard_normal(4).astype(np.float32)}
    nx.save_params(tmp_path / "m.json", params, {"epochs": 3})
    loaded, meta = nx.load_params(tmp_path / "m.json")
    assert meta == {"epochs": 3}
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()


def test_params_checksum_and_version(tmp_path):
    nx.save_params(tmp_path / "m.json", {"w": np.ones(4, np.float32)})
    blob = tmp_path / "m.bin"
    data = bytearray(blob.read_bytes())
    data[0] ^= 1
    blob.write_bytes(bytes(data))
    with pytest.raises(ChecksumMismatch):
        nx.load_params(tmp_path / "m.json")
    man = (tmp_path / "m.json").read_text().replace('"format_version": 1', '"format_version": 99')
    (tmp_path / "m.json").write_text(man)
    with pytest.raises(FormatVersionMismatch):
        nx.load_params(tmp_path / "m.json")
