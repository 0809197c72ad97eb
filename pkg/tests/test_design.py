import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pikrig import design
from pikrig.design import (
    ExtendedPoint,
    ObservationSet,
    OperatorSystem,
    cov,
    cov_eval_count,
    encode_average,
    encode_pointwise,
    extend_atoms,
    gram,
    reset_cov_eval_count,
)
from pikrig.kernel import SqExpKernel, deriv

from util import well_spaced


def test_extended_point_coercion_and_validation():
    a = ExtendedPoint((1, 2), (0, 1))
    assert a.x == (1.0, 2.0) and a.m == (0, 1)
    assert a.order == 1
    with pytest.raises(ValueError):
        ExtendedPoint((1.0,), (0, 0))
    with pytest.raises(ValueError):
        ExtendedPoint((np.inf,), (0,))
    with pytest.raises(ValueError):
        ExtendedPoint((1.0,), (-1,))


def test_observation_set_rejects_duplicates():
    pts = [ExtendedPoint((0.0,), (0,)), ExtendedPoint((1e-13,), (0,))]
    with pytest.raises(ValueError, match="duplicate"):
        ObservationSet(pts, np.zeros(2))
    # same location, different derivative order: a distinct atom
    ok = ObservationSet(
        [ExtendedPoint((0.0,), (0,)), ExtendedPoint((0.0,), (1,))], np.zeros(2)
    )
    assert ok.n == 2


def test_observation_set_length_mismatch():
    with pytest.raises(ValueError):
        ObservationSet([ExtendedPoint((0.0,), (0,))], np.zeros(2))
    with pytest.raises(ValueError):
        ObservationSet(
            [ExtendedPoint((0.0,), (0,))], np.zeros(1), mean=np.zeros(3)
        )


def test_operator_system_validation():
    atoms = [ExtendedPoint((0.0,), (0,)), ExtendedPoint((1.0,), (0,))]
    with pytest.raises(ValueError):
        OperatorSystem(atoms, np.ones((3, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        OperatorSystem(atoms, np.ones((2, 2)), np.zeros(1))
    with pytest.raises(ValueError, match="all-zero"):
        OperatorSystem(atoms, np.array([[1.0, 0.0], [1.0, 0.0]]), np.zeros(2))


def test_encode_pointwise_frozen_example():
    rows = [
        ((1.0,), [(2.0, (0,)), (1.0, (2,))]),
        ((0.0,), [(1.0, (0,))]),
    ]
    ops = encode_pointwise(rows, [5.0, 6.0])
    # atoms sorted lexicographically by (x, m)
    assert [(a.x, a.m) for a in ops.colloc_points] == [
        ((0.0,), (0,)),
        ((1.0,), (0,)),
        ((1.0,), (2,)),
    ]
    assert np.array_equal(ops.U, np.array([[0.0, 1.0], [2.0, 0.0], [1.0, 0.0]]))
    assert np.array_equal(ops.rhs, [5.0, 6.0])
    assert ops.c == 3 and ops.p == 2


def test_encode_pointwise_accumulates_repeated_terms():
    ops = encode_pointwise([((0.0,), [(1.0, (1,)), (2.0, (1,))])], [0.0])
    assert ops.U.shape == (1, 1)
    assert ops.U[0, 0] == 3.0


def test_encode_pointwise_row_order_invariance():
    rows = [
        ((1.0,), [(1.0, (0,)), (1.0, (2,))]),
        ((2.0,), [(1.0, (0,)), (1.0, (2,))]),
    ]
    a = encode_pointwise(rows, [1.0, 2.0])
    b = encode_pointwise(rows[::-1], [2.0, 1.0])
    assert [(p.x, p.m) for p in a.colloc_points] == [(p.x, p.m) for p in b.colloc_points]
    # column permutation only
    assert np.array_equal(a.U, b.U[:, ::-1])


def test_encode_pointwise_errors():
    with pytest.raises(ValueError):
        encode_pointwise([], [])
    with pytest.raises(ValueError):
        encode_pointwise([((0.0,), [])], [0.0])
    with pytest.raises(ValueError, match="nonzero"):
        encode_pointwise([((0.0,), [(0.0, (0,))])], [0.0])
    with pytest.raises(ValueError):
        encode_pointwise([((0.0,), [(1.0, (0,))])], [0.0, 1.0])


def test_encode_average_frozen_example():
    ops = encode_average([(0.0,), (2.0,)], [(1.0, (1,))], rhs=3.0)
    assert ops.p == 1
    assert [(a.x, a.m) for a in ops.colloc_points] == [((0.0,), (1,)), ((2.0,), (1,))]
    assert np.allclose(ops.U[:, 0], [0.5, 0.5])
    assert ops.rhs[0] == 3.0


def test_encode_average_requires_locations():
    with pytest.raises(ValueError):
        encode_average([], [(1.0, (0,))], 0.0)


def test_extend_atoms_appends_zero_rows():
    ops = encode_pointwise([((1.0,), [(1.0, (2,))])], [0.0])
    extra = [ExtendedPoint((0.5,), (0,)), ExtendedPoint((1.0,), (2,))]
    out = extend_atoms(ops, extra)
    # the second atom already exists, only the first is appended
    assert len(out.colloc_points) == 2
    assert out.colloc_points[-1].m == (0,)
    assert np.array_equal(out.U[-1], np.zeros(1))
    assert np.array_equal(out.U[0], ops.U[0])
    # no-op extension returns an independent copy
    same = extend_atoms(ops, [ExtendedPoint((1.0,), (2,))])
    same.U[0, 0] = 99.0
    assert ops.U[0, 0] == 1.0


def test_cov_matches_kernel_deriv():
    k = SqExpKernel(sigma2=1.5, theta=0.8, dim=2)
    s = ExtendedPoint((0.1, 0.4), (1, 0))
    s2 = ExtendedPoint((0.9, -0.2), (0, 2))
    assert cov(k, s, s2) == deriv(k, s.x, s2.x, s.m, s2.m)


def test_gram_counts_symmetric_and_cross():
    k = SqExpKernel(sigma2=1.0, theta=1.0, dim=1)
    A = [ExtendedPoint((float(i),), (0,)) for i in range(5)]
    B = [ExtendedPoint((float(i) + 0.5,), (1,)) for i in range(3)]
    reset_cov_eval_count()
    gram(k, A)
    assert cov_eval_count() == 15  # 5 * 6 / 2
    gram(k, A, B)
    assert cov_eval_count() == 15 + 15  # + 5 * 3
    before = reset_cov_eval_count()
    assert before == 30
    assert cov_eval_count() == 0


def test_gram_same_object_uses_symmetric_fill():
    k = SqExpKernel(sigma2=1.0, theta=1.0, dim=1)
    A = [ExtendedPoint((float(i),), (0,)) for i in range(4)]
    reset_cov_eval_count()
    gram(k, A, A)
    assert cov_eval_count() == 10


def test_gram_exact_symmetry(rng):
    k = SqExpKernel(sigma2=2.0, theta=0.7, dim=1)
    xs = well_spaced(rng, 6)
    atoms = [ExtendedPoint((float(x),), (int(i) % 3,)) for i, x in enumerate(xs)]
    G = gram(k, atoms)
    assert np.array_equal(G, G.T)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    n=st.integers(2, 7),
    theta=st.floats(0.5, 2.0),
)
def test_gram_positive_semidefinite(seed, n, theta):
    rng = np.random.default_rng(seed)
    xs = well_spaced(rng, n, min_gap=0.3)
    orders = rng.integers(0, 3, n)
    atoms = [ExtendedPoint((float(x),), (int(o),)) for x, o in zip(xs, orders)]
    k = SqExpKernel(sigma2=1.0, theta=float(theta), dim=1)
    G = gram(k, atoms)
    w = np.linalg.eigvalsh(G)
    scale = max(1.0, float(np.max(np.abs(G))))
    assert w.min() >= -1e-9 * scale
