import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aedit import tensor as tn
from aedit.tensor import NonFiniteError, Tape

from .oracles import central_diff, rel_err


def test_forward_examples():
    out = tn.matmul(np.eye(2), np.array([[2.0, 3.0], [4.0, 5.0]]))
    assert np.array_equal(out.data, [[2, 3], [4, 5]])
    assert np.array_equal(tn.row_softmax(np.zeros((1, 2))).data, [[0.5, 0.5]])
    assert tn.squared_frobenius_norm(np.array([[3.0, 4.0]])).item() == 25.0


def test_square_derivative():
    tape = Tape()
    x = tape.watch(np.array(3.0))
    (g,) = tn.backward(tn.mul(x, x), [x])
    assert g == 6.0


def test_sum_matmul_identity_gives_ones():
    tape = Tape()
    A = tape.watch(np.random.default_rng(0).standard_normal((3, 3)))
    (g,) = tn.backward(tn.sum(tn.matmul(A, np.eye(3))), [A])
    assert np.array_equal(g, np.ones((3, 3)))


def test_untouched_leaf_gets_zero_gradient():
    tape = Tape()
    a = tape.watch(np.ones(3))
    b = tape.watch(np.ones((2, 2)))
    grads = tn.backward(tn.sum(tn.scale(a, 2.0)))
    assert np.array_equal(grads[a], 2 * np.ones(3))
    assert np.array_equal(grads[b], np.zeros((2, 2)))


def test_tape_is_single_use():
    tape = Tape()
    x = tape.watch(np.ones(2))
    loss = tn.sum(x)
    tn.backward(loss)
    with pytest.raises(RuntimeError):
        tn.backward(loss)
    with pytest.raises(RuntimeError):
        tn.add(x, x)


def test_backward_errors():
    tape = Tape()
    x = tape.watch(np.ones(2))
    with pytest.raises(ValueError, match="scalar"):
        tn.backward(tn.scale(x, 2.0))
    with pytest.raises(ValueError, match="tape"):
        tn.backward(tn.sum(np.ones(2)))


def test_mixing_tapes_rejected():
    a = Tape().watch(np.ones(2))
    b = Tape().watch(np.ones(2))
    with pytest.raises(ValueError, match="different tapes"):
        tn.add(a, b)


@pytest.mark.parametrize("make", [
    lambda: tn.exp(np.array([1000.0])),
    lambda: tn.mul(np.array([1e200]), np.array([1e200])),
    lambda: tn.sqrt(np.array([-1.0])),
    lambda: tn.matmul(np.array([[1e200, 1e200]]), np.array([[1e200], [1e200]])),
    lambda: tn.add(np.array([np.nan]), np.array([1.0])),
    lambda: tn.scale(np.array([1.0]), np.inf),
    lambda: tn.sum(np.array([1e308, 1e308])),
])
def test_non_finite_results_raise(make):
    with pytest.raises(NonFiniteError):
        make()


def test_gradient_overflow_raises():
    # finite forward (A @ B is all 4s), but dL/dB sums four 1e308 entries
    tape = Tape()
    A, B = np.full((4, 4), 1e308), np.full((4, 4), 1e-308)
    la, lb = tape.watch(A), tape.watch(B)
    loss = tn.sum(tn.matmul(la, lb))
    assert loss.item() == pytest.approx(64.0)
    before = np.geterr()
    with pytest.raises(NonFiniteError):
        tn.backward(loss, [lb])
    assert np.geterr() == before


def test_numpy_error_state_restored():
    before = np.geterr()
    with pytest.raises(NonFiniteError):
        tn.exp(np.array([1000.0]))
    assert np.geterr() == before


def test_shape_errors():
    with pytest.raises(ValueError):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        tn.add(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        tn.reshape(np.ones(6), (4,))
    with pytest.raises(TypeError):
        tn.slice(np.ones(4), [0, 1])


# -- gradients against central differences ------------------------------------

UNARY = {
    "exp": lambda x: tn.exp(x),
    "sqrt": lambda x: tn.sqrt(tn.add(tn.mul(x, x), 1.0)),
    "relu": lambda x: tn.relu(x),
    "sigmoid": lambda x: tn.sigmoid(tn.scale(x, 3.0)),
    "row_softmax": lambda x: tn.row_softmax(x),
    "transpose": lambda x: tn.transpose(x),
    "reshape": lambda x: tn.reshape(x, (-1,)),
    "slice": lambda x: tn.slice(x, (slice(0, 2), 1)),
    "sum_axis": lambda x: tn.sum(x, axis=0),
    "mean": lambda x: tn.mean(x, axis=1, keepdims=True),
    "scale": lambda x: tn.scale(x, -1.7),
    "frobenius": lambda x: tn.squared_frobenius_norm(x),
    "concat": lambda x: tn.concat([x, tn.scale(x, 2.0)], axis=1),
}


def _weighted(out, w):
    return tn.sum(tn.mul(out, w))


def _check_unary(name, x, w):
    f = UNARY[name]
    tape = Tape()
    leaf = tape.watch(x)
    (g,) = tn.backward(_weighted(f(leaf), w), [leaf])
    num = central_diff(lambda v: float(np.sum(f(tn.Tensor(v)).data * w)), x)
    return rel_err(g, num)


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(10):
        x = rng.uniform(-2, 2, (3, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
        w = rng.standard_normal(UNARY[name](tn.Tensor(x)).shape)
        assert _check_unary(name, x, w) <= 1e-5


BINARY = {
    "add": lambda a, b: tn.add(a, b),
    "sub": lambda a, b: tn.sub(a, b),
    "mul": lambda a, b: tn.mul(a, b),
    "matmul": lambda a, b: tn.matmul(a, tn.transpose(b)),
    "broadcast_add": lambda a, b: tn.add(a, tn.slice(b, 0)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    f = BINARY[name]
    rng = np.random.default_rng(len(name))
    for _ in range(10):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        w = rng.standard_normal(f(tn.Tensor(a), tn.Tensor(b)).shape)
        tape = Tape()
        la, lb = tape.watch(a), tape.watch(b)
        ga, gb = tn.backward(_weighted(f(la, lb), w), [la, lb])
        na = central_diff(lambda v: float(np.sum(f(tn.Tensor(v), tn.Tensor(b)).data * w)), a)
        nb = central_diff(lambda v: float(np.sum(f(tn.Tensor(a), tn.Tensor(v)).data * w)), b)
        assert rel_err(ga, na) <= 1e-5
        assert rel_err(gb, nb) <= 1e-5


def random_graph(rng, x, n_ops=5):
    """Chain of ``n_ops`` random ops ending in a scalar; returns the loss builder."""
    ops = rng.choice(["add", "mul", "exp", "softmax", "matmul", "relu", "sqrt", "sub", "sigmoid"],
                     size=n_ops)
    M = rng.standard_normal((x.shape[1], x.shape[1])) * 0.5
    c = rng.standard_normal(x.shape) * 0.5

    def build(v):
        h = v
        for op in ops:
            if op == "add":
                h = tn.add(h, c)
            elif op == "sub":
                h = tn.sub(c, h)
            elif op == "mul":
                h = tn.mul(h, tn.add(v, 0.5))
            elif op == "exp":
                h = tn.exp(tn.scale(h, 0.3))
            elif op == "softmax":
                h = tn.row_softmax(h)
            elif op == "matmul":
                h = tn.matmul(h, M)
            elif op == "relu":
                h = tn.add(tn.relu(h), tn.scale(h, 0.1))
            elif op == "sigmoid":
                h = tn.sigmoid(h)
            elif op == "sqrt":
                h = tn.sqrt(tn.add(tn.mul(h, h), 1.0))
        return tn.squared_frobenius_norm(h)
    return build


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_graph_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (3, 4))
    build = random_graph(rng, x)
    tape = Tape()
    leaf = tape.watch(x)
    (g,) = tn.backward(build(leaf), [leaf])
    num = central_diff(lambda v: build(tn.Tensor(v)).item(), x)
    assert rel_err(g, num) <= 1e-5


def test_ops_are_deterministic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5))
    build = random_graph(rng, x, 8)
    a = build(tn.Tensor(x)).data.tobytes()
    b = build(tn.Tensor(x.copy())).data.tobytes()
    assert a == b


# -- serialization -------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 1000))
def test_tensor_roundtrip(shape, seed):
    x = np.random.default_rng(seed).standard_normal(shape)
    buf = io.BytesIO()
    tn.write_tensor(buf, x)
    raw = buf.getvalue()
    assert raw[:4] == b"TNSR"
    assert int.from_bytes(raw[4:8], "little") == len(shape)
    buf.seek(0)
    y = tn.read_tensor(buf)
    assert y.shape == x.shape and np.array_equal(x, y)


def test_tensor_layout_is_little_endian():
    buf = io.BytesIO()
    tn.write_tensor(buf, np.array([[1.0, 2.0]]))
    raw = buf.getvalue()
    assert raw == (b"TNSR" + (2).to_bytes(4, "little") + (1).to_bytes(8, "little")
                   + (2).to_bytes(8, "little") + np.array([1.0, 2.0], "<f8").tobytes())


def test_bad_magic_and_truncation(tmp_path):
    with pytest.raises(ValueError):
        tn.read_tensor(io.BytesIO(b"XXXX" + bytes(12)))
    buf = io.BytesIO()
    tn.write_tensor(buf, np.ones(4))
    with pytest.raises(ValueError):
        tn.read_tensor(io.BytesIO(buf.getvalue()[:-3]))
    path = tmp_path / "many.bin"
    tn.write_tensors(path, [np.ones(2), np.zeros((1, 3))])
    a, b = tn.read_tensors(path)
    assert a.shape == (2,) and b.shape == (1, 3)
