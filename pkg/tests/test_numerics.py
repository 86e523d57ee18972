import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lstr import numerics as nx
from lstr.numerics import Tape, Tensor
from lstr.gradcheck import primitive_cases

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_fixture():
    out = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.value, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero(rng):
    a = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(nx.matmul(Tensor(a), Tensor(np.eye(5))).value, a)
    np.testing.assert_array_equal(nx.matmul(Tensor(a), Tensor(np.zeros((5, 2)))).value, 0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_only_two_dimensional():
    assert Tensor([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(nx.ShapeError):
        Tensor(np.ones((2, 2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_associative(m, k, l, n, seed):
    r = np.random.default_rng(seed)
    a, b, c = (Tensor(r.standard_normal(s)) for s in ((m, k), (k, l), (l, n)))
    left = nx.matmul(nx.matmul(a, b), c).value
    right = nx.matmul(a, nx.matmul(b, c)).value
    np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-12)


def test_softmax_extreme_pair_against_high_precision():
    got = nx.softmax_rows(Tensor([[0.0, 20.0]])).value[0]
    mpmath.mp.dps = 40
    e = mpmath.exp(20)
    want = [float(1 / (1 + e)), float(e / (1 + e))]
    assert got[0] == pytest.approx(want[0], rel=1e-12)
    assert got[0] == pytest.approx(2.06e-9, rel=1e-2)
    assert got[1] == pytest.approx(want[1], rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(x, c):
    a = nx.softmax_rows(Tensor(x)).value
    b = nx.softmax_rows(Tensor(x + c)).value
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax_rows(Tensor(x)).value
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_mask_and_fully_masked_row():
    mask = np.array([[True, False], [True, True]])
    p = nx.softmax_rows(Tensor(np.zeros((2, 2))), mask).value
    np.testing.assert_array_equal(p[0], [1.0, 0.0])
    with pytest.raises(ValueError):
        nx.softmax_rows(Tensor(np.zeros((1, 2))), np.array([[False, False]]))


def test_layer_norm_fixture_against_direct_formula():
    x = np.array([[1.0, 2.0, 3.0]])
    out = nx.layer_norm(Tensor(x), Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3))), eps=0.0).value
    mu = x.mean()
    sd = np.sqrt(((x - mu) ** 2).mean())
    np.testing.assert_allclose(out, (x - mu) / sd, rtol=1e-14)
    np.testing.assert_allclose(out[0], [-1.2247448713915890, 0.0, 1.2247448713915890], rtol=1e-12)


def test_pick_and_log_floor():
    a = Tensor([[0.1, 0.9], [0.0, 1.0]])
    np.testing.assert_array_equal(nx.pick(a, [1, 0]).value, [[0.9], [0.0]])
    assert nx.log(Tensor([[0.0]]), 1e-12).value[0, 0] == pytest.approx(np.log(1e-12))


def test_no_recording_outside_tape():
    x = Tensor(np.ones((2, 2)))
    y = nx.sum_all(nx.matmul(x, x))
    assert y.value[0, 0] == 8
    with Tape() as tape:
        nx.sum_all(nx.matmul(x, x))
    assert [n.op for n in tape.nodes] == ["matmul", "sum_all"]


def test_tape_gradient_of_quadratic():
    x = Tensor(np.array([[1.0, -2.0]]))
    with Tape() as tape:
        y = nx.sum_all(nx.mul(x, x))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_allclose(g, 2 * x.value)


def test_constant_graph_gives_zero_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3)))
    c = Tensor(rng.standard_normal((2, 3)))
    with Tape() as tape:
        y = nx.sum_all(nx.scale(c, 3.0))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_array_equal(g, 0)


@pytest.mark.parametrize("seed", range(10))
def test_every_primitive_passes_gradient_check(seed):
    cases = primitive_cases(np.random.default_rng(seed))
    assert set(cases) == set(nx.PRIMITIVES)
    for name, (fn, inputs) in cases.items():
        rep = nx.gradient_check(fn, inputs, seed=seed)
        assert rep.max_error < 1e-4, (name, rep)


def test_gradient_check_catches_corrupted_rule(rng):
    fn, inputs = primitive_cases(rng)["matmul"]
    assert nx.gradient_check(fn, inputs).max_error < 1e-6
    with nx.corrupt_backward("matmul"):
        assert nx.gradient_check(fn, inputs).max_error > 1e-2
    assert nx.gradient_check(fn, inputs).max_error < 1e-6


def test_relu_kink_is_skipped_not_failed():
    rep = nx.gradient_check(lambda a: nx.relu(a), [np.array([[0.0, 1.0, -1.0]])])
    assert rep.max_error < 1e-4
    assert rep.skipped == [(0, 0)]
