import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gran.autodiff import (AdamState, GruParams, MlpParams, ShapeError, Tensor, adam_step,
                           apply_adam, backward, clip, clip_grad_norm, concat, exp,
                           finite_diff_grad, gather, grad, gru_cell, load_arrays, log,
                           log_softmax, logsumexp, matmul, mlp_forward, reduce_sum, relu,
                           reshape, save_arrays, segment_sum, sigmoid, softmax, tanh)


def rel_err(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8)


def check_unary(fn, x0, rng):
    """Compare backward() with central differences of sum(w * fn(x))."""
    out_shape = fn(Tensor(x0)).shape
    w = rng.normal(size=out_shape)

    def scalar(x):
        return float(np.sum(w * fn(Tensor(x)).data))

    x = Tensor(x0.copy(), requires_grad=True)
    loss = reduce_sum(fn(x) * Tensor(w))
    backward(loss)
    num = finite_diff_grad(scalar, x0)
    assert rel_err(x.grad, num) < 1e-4


def away_from_zero(rng, shape, lo=1e-3):
    x = rng.normal(size=shape)
    while np.any(np.abs(x) < lo):
        bad = np.abs(x) < lo
        x[bad] = rng.normal(size=bad.sum())
    return x


def shapes(rng):
    return (int(rng.integers(1, 5)), int(rng.integers(1, 5)))


UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": lambda t: log(t * t + 0.5),
    "softmax": softmax,
    "log_softmax": log_softmax,
    "logsumexp": lambda t: logsumexp(t, axis=-1),
    "logsumexp0": lambda t: logsumexp(t, axis=0, keepdims=True),
    "sum_axis0": lambda t: reduce_sum(t, axis=0),
    "sum_all": reduce_sum,
    "reshape": lambda t: reshape(t, (-1,)),
    "gather": lambda t: gather(t, [0, 0, t.shape[0] - 1]),
    "segment_sum": lambda t: segment_sum(t, np.arange(t.shape[0]) % 2, 2),
    "clip": lambda t: clip(t, -0.5, 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(50):
        x = away_from_zero(rng, shapes(rng))
        if name == "clip":
            # keep clear of the clamp boundaries
            x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, x + 0.01, x)
        check_unary(UNARY[name], x, rng)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "concat0", "concat1", "bcast"])
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(7)
    for _ in range(50):
        r, c = shapes(rng)
        a0 = rng.normal(size=(r, c))
        if name == "matmul":
            b0 = rng.normal(size=(c, int(rng.integers(1, 4))))
        elif name == "concat0":
            b0 = rng.normal(size=(int(rng.integers(1, 3)), c))
        elif name == "concat1":
            b0 = rng.normal(size=(r, int(rng.integers(1, 3))))
        elif name == "bcast":
            b0 = rng.normal(size=(c,))
        else:
            b0 = rng.normal(size=(r, c))
        fn = {
            "add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b,
            "matmul": matmul, "concat0": lambda a, b: concat([a, b], axis=0),
            "concat1": lambda a, b: concat([a, b], axis=1), "bcast": lambda a, b: a * b + b,
        }[name]
        check_unary(lambda t: fn(t, Tensor(b0)), a0, rng)
        check_unary(lambda t: fn(Tensor(a0), t), b0, rng)


def test_random_three_layer_composition():
    rng = np.random.default_rng(0)
    w1, w2, w3 = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=(4, 2))
    fn = lambda x: logsumexp(matmul(tanh(matmul(relu(matmul(x, Tensor(w1))), Tensor(w2))),  # noqa: E731
                                    Tensor(w3)), axis=-1)
    check_unary(fn, away_from_zero(rng, (6, 3)), rng)


def test_trivial_values():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    for a in (-3.0, 0.0, 7.5, 1e4):
        assert logsumexp(Tensor([a])).item() == a


def test_trivial_gradients():
    x = Tensor(0.0, requires_grad=True)
    backward(sigmoid(x))
    assert x.grad == 0.25
    x = Tensor(3.0, requires_grad=True)
    backward(relu(x * 2.0))
    assert x.grad == 2.0
    x = Tensor(0.0, requires_grad=True)
    backward(relu(x))
    assert x.grad == 0.0


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_logsumexp_bounds(values):
    v = np.array(values)
    out = logsumexp(Tensor(v)).item()
    assert math.isfinite(out)
    assert out >= v.max() - 1e-9
    assert out <= v.max() + math.log(len(v)) + 1e-9


def test_logsumexp_extremes():
    out = logsumexp(Tensor([1e4, 1e4])).item()
    assert out == pytest.approx(1e4 + math.log(2))
    out = logsumexp(Tensor([-1e4, -1e4 - 1])).item()
    assert out == pytest.approx(-1e4 + math.log(1 + math.exp(-1)))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_softmax_rows_normalized(r, c, seed):
    x = np.random.default_rng(seed).normal(scale=50, size=(r, c))
    s = softmax(Tensor(x)).data
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-9)


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError, match="concat"):
        concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)
    with pytest.raises(ShapeError, match="segment_sum"):
        segment_sum(Tensor(np.ones((3, 2))), [0, 1], 2)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_shared_subexpression_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    backward(y * y + y)  # x^4 + x^2
    assert x.grad == pytest.approx(4 * 8 + 2 * 2)


def test_grad_helper_resets():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    unused = Tensor(np.zeros(2), requires_grad=True)
    g1 = grad(reduce_sum(x * x), [x, unused])
    g2 = grad(reduce_sum(x * x), [x, unused])
    assert np.array_equal(g1[0], [2.0, 4.0]) and np.array_equal(g2[0], [2.0, 4.0])
    assert np.array_equal(g1[1], [0.0, 0.0])


def test_forward_bit_identical():
    rng = np.random.default_rng(3)
    p = MlpParams.init(rng, 4, 8, 3)
    x = Tensor(rng.normal(size=(5, 4)))
    assert mlp_forward(p, x).data.tobytes() == mlp_forward(p, x).data.tobytes()


# --- layers -------------------------------------------------------------------

def test_mlp_contract():
    p = MlpParams.zeros(4, 6, 3)
    x = Tensor(np.random.default_rng(0).normal(size=(5, 4)))
    assert np.array_equal(mlp_forward(p, x).data, np.zeros((5, 3)))
    p.b3.data = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(mlp_forward(p, x).data, np.tile([1.0, -2.0, 3.0], (5, 1)))
    with pytest.raises(ShapeError):
        mlp_forward(p, Tensor(np.ones((2, 5))))


def test_mlp_gradients():
    rng = np.random.default_rng(1)
    p = MlpParams.init(rng, 3, 5, 2)
    x = Tensor(rng.normal(size=(4, 3)))
    for name, t in p.named_tensors().items():
        base = t.data.copy()

        def f(v, t=t):
            t.data = v
            out = float(np.sum(mlp_forward(p, x).data ** 2))
            return out

        num = finite_diff_grad(f, base)
        t.data = base
        (g,) = grad(reduce_sum(mlp_forward(p, x) * mlp_forward(p, x)), [t])
        assert rel_err(g, num) < 1e-4, name


def zero_gru(d_in, h):
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
    return GruParams(z(d_in, h), z(h, h), z(h), z(d_in, h), z(h, h), z(h), z(d_in, h), z(h, h), z(h))


def test_gru_zero_params_halves_state():
    h = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    m = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    out = gru_cell(zero_gru(4, 4), h, m).data
    assert np.allclose(out, 0.5 * h.data)
    rng = np.random.default_rng(2)
    p = GruParams.init(rng, 4, 4)
    for t in (p.b_z, p.b_r, p.b_h):
        t.data = np.zeros(4)
    assert np.array_equal(gru_cell(p, Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4)))).data,
                          np.zeros((2, 4)))


def test_gru_scalar_oracle():
    rng = np.random.default_rng(11)
    p = GruParams.init(rng, 1, 1)
    v = {k: float(t.data.ravel()[0]) for k, t in p.named_tensors().items()}
    h, m = 0.37, -1.2
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))  # noqa: E731
    z = sig(v["w_z"] * m + v["u_z"] * h + v["b_z"])
    r = sig(v["w_r"] * m + v["u_r"] * h + v["b_r"])
    cand = math.tanh(v["w_h"] * m + v["u_h"] * (r * h) + v["b_h"])
    expected = z * h + (1 - z) * cand
    got = gru_cell(p, Tensor([[h]]), Tensor([[m]])).item()
    assert got == pytest.approx(expected, abs=1e-14)


def test_gru_gradients():
    rng = np.random.default_rng(5)
    p = GruParams.init(rng, 3, 2)
    h0, m0 = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    check_unary(lambda t: gru_cell(p, t, Tensor(m0)), h0, rng)
    check_unary(lambda t: gru_cell(p, Tensor(h0), t), m0, rng)


# --- optimizer ----------------------------------------------------------------

def test_adam_zero_grad_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState(lr=0.1)
    for _ in range(5):
        params, state = adam_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(params["w"], [1.0, -2.0])
    assert state.t == 5


def test_adam_first_step_magnitude_is_lr():
    for g in (1e-3, 0.5, -7.0, 1e3):
        new, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([g])}, AdamState(lr=0.01))
        assert abs(new["w"][0]) == pytest.approx(0.01, rel=1e-4)
        assert np.sign(new["w"][0]) == -np.sign(g)


def test_adam_scalar_trace():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    g = 0.5
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    params, state = {"w": np.array([1.0])}, AdamState(lr=lr)
    for _ in range(2):
        params, state = adam_step(params, {"w": np.array([g])}, state)
    assert params["w"][0] == pytest.approx(x, abs=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_apply_adam_zero_lr_keeps_params():
    t = Tensor(np.array([0.3, 0.4]), requires_grad=True)
    t.grad = np.array([1.0, -1.0])
    apply_adam({"t": t}, AdamState(lr=0.0))
    assert np.array_equal(t.data, [0.3, 0.4])


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6, 0.0]) and np.allclose(b.grad, [0.8])
    assert clip_grad_norm({"a": a, "b": b}, 10.0) == pytest.approx(1.0)
    assert np.allclose(a.grad, [0.6, 0.0])


def test_finite_diff_examples():
    assert finite_diff_grad(lambda x: float(x[0] ** 2), np.array([1.0]), 1e-5)[0] == pytest.approx(2.0, abs=1e-8)
    assert np.array_equal(finite_diff_grad(lambda x: 3.0, np.ones(4)), np.zeros(4))


# --- checkpoint ---------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 2)), "b": np.array(1.5), "c": np.zeros((0, 4))}
    save_arrays(tmp_path / "x.ckpt", arrays, {"step": 7})
    back, meta = load_arrays(tmp_path / "x.ckpt")
    assert meta == {"step": 7}
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert np.array_equal(back[k], arrays[k])
    save_arrays(tmp_path / "y.ckpt", arrays, {"step": 7})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_arrays(tmp_path / "bad")
