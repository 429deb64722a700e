import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from shifteq.tensor import (
    NumericError,
    Rng,
    ShapeError,
    Shift2D,
    circular_shift,
    lp_norm,
    matmul,
    power_sum_rows,
    rng_lattice,
    rng_normal,
    softmax_rows,
)

from _oracles import lp_norm_sorted, matmul_loop, softmax_decimal

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
T = np.array([[1.0, 2.0], [3.0, 4.0]])


# ---------------------------------------------------------------- shifts

@pytest.mark.parametrize("s, expected", [
    ((0, 0), [[1, 2], [3, 4]]),
    ((2, 2), [[1, 2], [3, 4]]),
    ((1, 0), [[3, 4], [1, 2]]),
])
def test_circular_shift_examples(s, expected):
    np.testing.assert_array_equal(circular_shift(T, s), expected)


def test_circular_shift_index_formula():
    x = np.arange(24.0).reshape(2, 3, 4)
    y = circular_shift(x, (2, -3))
    for c in range(2):
        for i in range(3):
            for j in range(4):
                assert y[c, i, j] == x[c, (i - 2) % 3, (j + 3) % 4]


@given(arrays(np.float64, (2, 3, 5), elements=finite),
       st.tuples(st.integers(-9, 9), st.integers(-9, 9)),
       st.tuples(st.integers(-9, 9), st.integers(-9, 9)))
def test_circular_shift_is_a_group_action(x, a, b):
    lhs = circular_shift(circular_shift(x, a), b)
    rhs = circular_shift(x, (a[0] + b[0], a[1] + b[1]))
    np.testing.assert_array_equal(lhs, rhs)
    np.testing.assert_array_equal(circular_shift(circular_shift(x, a), (-a[0], -a[1])), x)


def test_circular_shift_rejects_vectors():
    with pytest.raises(ShapeError):
        circular_shift(np.arange(4.0), (1, 0))


def test_shift2d_arithmetic():
    g = Shift2D(3, -1) + Shift2D(2, 5)
    assert g == (5, 4)
    assert -g == (-5, -4)
    assert Shift2D(9, -1).mod(4, 4) == (1, 3)


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_projector():
    A = np.array([[2.0, 3.0], [5.0, 7.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), A), A)
    np.testing.assert_array_equal(matmul([[1.0, 0.0], [0.0, 0.0]], A), [[2, 3], [0, 0]])


def test_matmul_matches_triple_loop_bitwise():
    r = np.random.default_rng(0)
    a, b = r.normal(size=(3, 3)), r.normal(size=(3, 3))
    assert np.array_equal(matmul(a, b), matmul_loop(a, b))


@given(st.integers(1, 5), st.integers(1, 7), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_bitwise_on_random_shapes(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, k)) * 10, r.normal(size=(k, m))
    assert np.array_equal(matmul(a, b), matmul_loop(a, b))


def test_matmul_broadcasts_leading_axes():
    r = np.random.default_rng(1)
    a = r.normal(size=(2, 3, 4, 5))
    b = r.normal(size=(3, 5, 2))
    out = matmul(a, b)
    assert out.shape == (2, 3, 4, 2)
    for i in range(2):
        for j in range(3):
            assert np.array_equal(out[i, j], matmul_loop(a[i, j], b[j]))
    shared = matmul(a, b[0])
    assert np.array_equal(shared[1, 2], matmul_loop(a[1, 2], b[0]))


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], rtol=0, atol=1e-16)


@pytest.mark.parametrize("c", [-700.0, -3.5, 0.0, 2.0, 500.0])
def test_softmax_closed_form(c):
    np.testing.assert_allclose(softmax_rows([c, c + math.log(2.0)]), [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_against_extended_precision():
    r = np.random.default_rng(7)
    for _ in range(20):
        row = r.normal(scale=5.0, size=9)
        assert np.max(np.abs(softmax_rows(row) - softmax_decimal(row))) <= 1e-12


@given(arrays(np.float64, (3, 6), elements=finite))
def test_softmax_rows_are_distributions(t):
    p = softmax_rows(t)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax_rows([1.0, float("nan")])


# ---------------------------------------------------------------- norms

def test_lp_norm_examples():
    assert lp_norm(np.zeros((3, 3))) == 0.0
    assert lp_norm([3.0, 4.0], 2) == 5.0
    assert lp_norm([3.0, -4.0], 1) == 7.0


def test_lp_norm_against_sorted_sum():
    r = np.random.default_rng(3)
    for p in (1, 2):
        for _ in range(20):
            v = r.normal(size=r.integers(1, 500)) * 10.0 ** r.integers(-3, 4)
            assert abs(lp_norm(v, p) - lp_norm_sorted(v, p)) <= 1e-13 * max(1.0, lp_norm_sorted(v, p))


@given(arrays(np.float64, 17, elements=finite), st.randoms(use_true_random=False))
def test_power_sum_is_order_independent(v, rnd):
    perm = list(range(v.size))
    rnd.shuffle(perm)
    assert power_sum_rows(v) == power_sum_rows(v[perm])


def test_power_sum_rejects_other_orders():
    with pytest.raises(ValueError):
        power_sum_rows(np.ones(3), 3)


# ---------------------------------------------------------------- rng

def test_lattice_k0_values():
    vals = rng_lattice(Rng(5), (1000,), k=0)
    assert set(np.unique(vals)) <= {-1.0, 0.0, 1.0}
    assert len(np.unique(vals)) == 3


def test_lattice_is_dyadic():
    vals = rng_lattice(Rng(5), (4, 8, 8), k=4)
    assert np.all(vals * 16 == np.round(vals * 16))
    assert vals.min() >= -1.0 and vals.max() <= 1.0


def test_same_seed_same_tensors():
    assert np.array_equal(rng_normal(Rng(11), (3, 4, 5)), rng_normal(Rng(11), (3, 4, 5)))
    assert np.array_equal(rng_lattice(Rng(11), (7,)), rng_lattice(Rng(11), (7,)))
    assert not np.array_equal(rng_normal(Rng(11), (9,)), rng_normal(Rng(12), (9,)))


def test_child_streams_are_stable_and_distinct():
    a, b = Rng(1).child("a"), Rng(1).child("b")
    assert a.seed == Rng(1).child("a").seed
    assert not np.array_equal(a.raw(4), b.raw(4))


def test_normal_mean_within_clt_bound():
    z = rng_normal(Rng(2024), (100_000,))
    assert -0.02 < z.mean() < 0.02
    assert abs(z.std() - 1.0) < 0.02


def test_uniform_and_integer_ranges():
    u = Rng(3).uniform(10_000)
    assert u.min() > 0.0 and u.max() <= 1.0
    k = Rng(3).integers(-2, 5, 10_000)
    assert k.min() == -2 and k.max() == 5


def test_rng_rejects_empty_axes():
    with pytest.raises(ShapeError):
        rng_normal(Rng(0), (3, 0))
