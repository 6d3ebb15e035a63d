import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import eval_jacobi

from spechp.basis import (
    BasisError,
    BasisKey,
    BasisType,
    PointsKey,
    basis_table,
    boundary_first_permutation,
    duffy_collapse,
    duffy_expand,
    eval_modified_A,
    eval_modified_B,
)
from spechp.quadrature import PointsType, make_rule


def gll_points(q):
    return make_rule(PointsKey(q, PointsType.GAUSS_LOBATTO_LEGENDRE)).points


def test_modified_a_boundary_values():
    for P in [1, 2, 5]:
        t = eval_modified_A(P, np.array([-1.0, 1.0]))
        assert t.values[0] == pytest.approx([1.0, 0.0])
        assert t.values[P] == pytest.approx([0.0, 1.0])
        for p in range(1, P):
            assert t.values[p] == pytest.approx([0.0, 0.0], abs=1e-15)


def test_modified_a_partition_at_p1():
    z = np.linspace(-1, 1, 11)
    t = eval_modified_A(1, z)
    assert t.values.sum(axis=0) == pytest.approx(np.ones(11))


def test_modified_a_first_bubble_at_zero():
    t = eval_modified_A(2, np.array([0.0]))
    assert t.values[1, 0] == pytest.approx(0.25)


def test_modified_a_against_independent_jacobi():
    # Bubble rows checked against scipy's Jacobi evaluation.
    z = gll_points(5)
    t = eval_modified_A(3, z)
    for p in [1, 2]:
        expected = 0.25 * (1 - z) * (1 + z) * eval_jacobi(p - 1, 1, 1, z)
        assert t.values[p] == pytest.approx(expected, abs=1e-14)


def test_modified_a_derivatives_fd():
    z = np.linspace(-0.9, 0.9, 7)
    h = 1e-6
    t = eval_modified_A(4, z)
    tp = eval_modified_A(4, z + h)
    tm = eval_modified_A(4, z - h)
    fd = (tp.values - tm.values) / (2 * h)
    assert np.max(np.abs(fd - t.derivs)) < 1e-8


def test_modified_a_rejects_p0():
    with pytest.raises(BasisError):
        eval_modified_A(0, np.array([0.0]))


def test_modified_b_top_vertex_row():
    # (0,1) row is the (1+z)/2 mode: equals 1 at z=1.
    z = np.array([-1.0, 0.0, 1.0])
    t = eval_modified_B(3, 3, z)
    row = t.values[t.index.index((0, 1))]
    assert row == pytest.approx(0.5 * (1 + z))
    assert row[-1] == pytest.approx(1.0)


def test_modified_b_interior_rows_vanish_at_minus_one():
    z = np.array([-1.0])
    t = eval_modified_B(4, 4, z)
    for row, (p, q) in zip(t.values, t.index):
        if q > 0 and (p, q) != (0, 1):
            assert abs(row[0]) < 1e-15, (p, q)


def test_modified_b_block_structure():
    t = eval_modified_B(3, 3, np.array([0.0]))
    assert t.index == ((0, 0), (0, 1), (0, 2), (0, 3),
                       (1, 0), (1, 1), (1, 2),
                       (2, 0), (2, 1),
                       (3, 0))
    assert len(t.values) == 10


def test_modified_b_formula_rows():
    z = gll_points(6)
    t = eval_modified_B(3, 3, z)
    lo, hi = 0.5 * (1 - z), 0.5 * (1 + z)
    got = t.values[t.index.index((2, 1))]
    assert got == pytest.approx(lo**2 * hi * eval_jacobi(0, 3, 1, z), abs=1e-14)
    got = t.values[t.index.index((3, 0))]
    assert got == pytest.approx(lo**3, abs=1e-14)


def test_modified_b_requires_pb_ge_pa():
    with pytest.raises(BasisError):
        eval_modified_B(4, 3, np.array([0.0]))


def test_boundary_first_permutation():
    assert boundary_first_permutation(4) == [0, 4, 1, 2, 3]


def test_tables_bitwise_reproducible():
    key = BasisKey(BasisType.MODIFIED_A, 5,
                   PointsKey(6, PointsType.GAUSS_LOBATTO_LEGENDRE))
    a = basis_table(key)
    b = basis_table(BasisKey(BasisType.MODIFIED_A, 5,
                             PointsKey(6, PointsType.GAUSS_LOBATTO_LEGENDRE)))
    assert a is b
    assert a.values.tobytes() == b.values.tobytes()


def test_lagrange_gll_is_nodal():
    key = BasisKey(BasisType.LAGRANGE_GLL, 5,
                   PointsKey(5, PointsType.GAUSS_LOBATTO_LEGENDRE))
    t = basis_table(key)
    assert np.max(np.abs(t.values - np.eye(5))) < 1e-13


def test_low_quadrature_warns():
    with pytest.warns(UserWarning):
        BasisKey(BasisType.MODIFIED_A, 6,
                 PointsKey(4, PointsType.GAUSS_LOBATTO_LEGENDRE))


def test_duffy_point_examples():
    assert duffy_collapse(np.array([0.0, 0.0])) == pytest.approx([-0.5, 0.0])
    # whole collapsed line maps to the top vertex
    for e1 in [-1.0, -0.3, 0.8, 1.0]:
        assert duffy_collapse(np.array([e1, 1.0])) == pytest.approx([-1.0, 1.0])
    assert duffy_expand(np.array([-1.0, -1.0])) == pytest.approx([-1.0, -1.0])
    assert duffy_expand(np.array([-1.0, 1.0])) == pytest.approx([-1.0, 1.0])


def test_duffy_preserves_triangle_inequality():
    rng = np.random.default_rng(5)
    eta = rng.uniform(-1, 1, size=(200, 2))
    xi = duffy_collapse(eta)
    assert np.all(xi[:, 0] + xi[:, 1] <= 1e-14)


@settings(max_examples=200)
@given(st.floats(-1, 1), st.floats(-1, 1 - 1e-3))
def test_duffy_round_trip(e1, e2):
    # Recovering eta_1 divides by (1 - eta_2), so the representable accuracy
    # of the round trip degrades like eps/(1 - eta_2); stay in the regime
    # where 1e-12 is meaningful.
    eta = np.array([e1, e2])
    back = duffy_expand(duffy_collapse(eta))
    assert np.max(np.abs(back - eta)) < 1e-12


def test_duffy_round_trip_random_batch():
    rng = np.random.default_rng(17)
    eta = rng.uniform(-1, 1, size=(1000, 2))
    eta = eta[eta[:, 1] <= 1 - 1e-8]
    back = duffy_expand(duffy_collapse(eta))
    assert np.max(np.abs(back - eta)) < 1e-12


def test_triangle_mass_spd_p4():
    # Eigenvalue oracle on the dense mass assembled from these modes.
    from spechp.quadrature import PointsType as PT

    q = 7
    gll = make_rule(PointsKey(q, PT.GAUSS_LOBATTO_LEGENDRE))
    radau = make_rule(PointsKey(q, PT.GAUSS_RADAU_M_LEGENDRE))
    A = eval_modified_A(4, gll.points)
    B = eval_modified_B(4, 4, radau.points)
    perm = boundary_first_permutation(4)
    rows = []
    for (p, qq), brow in zip(B.index, B.values):
        arow = A.values[perm[p]]
        mode = np.outer(arow, brow)
        if (p, qq) == (0, 1):
            mode = mode + np.outer(A.values[perm[1]], brow)
        rows.append(mode.ravel())
    Bmat = np.array(rows)
    w2 = radau.weights * 0.5 * (1.0 - radau.points)
    wts = np.outer(gll.weights, w2).ravel()
    mass = Bmat @ (wts[None, :] * Bmat).T
    eigs = np.linalg.eigvalsh(mass)
    assert eigs.min() > 0
    assert np.max(np.abs(mass - mass.T)) < 1e-15
