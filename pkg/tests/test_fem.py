import numpy as np
import pytest

from adaptnet import fem, marking
from adaptnet import mesh as m
from adaptnet.errors import ContractError


def dense_stiffness_oracle(msh):
    """Independent assembly: per-element gradients from a 3x3 vandermonde solve."""
    n = msh.n_vertices
    K = np.zeros((n, n))
    for t in range(msh.n_elements):
        ids = msh.triangles[t]
        p = msh.vertices[ids]
        V = np.column_stack([np.ones(3), p])
        area = 0.5 * abs(np.linalg.det(V))
        grads = np.linalg.solve(V, np.eye(3))[1:, :]  # (2, 3)
        K[np.ix_(ids, ids)] += area * grads.T @ grads
    return K


def crisscross():
    return m.uniform_refine(m.make_initial_mesh("unit_square"))


def test_zero_source_zero_load():
    msh = crisscross()
    sys_ = fem.assemble(msh, 0.0)
    assert np.all(sys_.rhs == 0.0)


def test_crisscross_diagonal_entry():
    msh = crisscross()
    sys_ = fem.assemble(msh, 1.0)
    # exactly one interior vertex, the center; hand assembly gives 4
    assert len(sys_.interior) == 1
    A = sys_.matrix().toarray()
    assert np.isclose(A[0, 0], 4.0)
    K = dense_stiffness_oracle(msh)
    i = sys_.interior[0]
    assert np.isclose(K[i, i], 4.0)


def test_full_matrix_row_sums_vanish():
    msh = m.refine_nvb(m.make_initial_mesh("l_shape"), {0, 2, 4})
    K = fem.full_stiffness(msh).toarray()
    assert np.allclose(K.sum(axis=1), 0.0, atol=1e-13)
    assert np.allclose(K, K.T)
    oracle = dense_stiffness_oracle(msh)
    assert np.allclose(K, oracle, atol=1e-12)


def test_solve_matches_dense_oracle():
    msh = crisscross()
    sys_ = fem.assemble(msh, 1.0)
    U = fem.solve(sys_, rel_tol=1e-13)
    A = sys_.matrix().toarray()
    x = np.linalg.solve(A, sys_.rhs)
    assert np.max(np.abs(U.coefficients[sys_.interior] - x)) <= 1e-12
    # boundary values are exactly zero
    bdry = fem.boundary_vertices(msh)
    assert np.all(U.coefficients[bdry] == 0.0)


def test_solve_larger_mesh_against_dense():
    msh = m.make_initial_mesh("l_shape")
    for _ in range(3):
        msh = m.uniform_refine(msh)
    sys_ = fem.assemble(msh, 1.0)
    U = fem.solve(sys_)
    A = sys_.matrix().toarray()
    x = np.linalg.solve(A, sys_.rhs)
    assert np.max(np.abs(U.coefficients[sys_.interior] - x)) <= 1e-8


def test_single_unknown_system():
    msh = crisscross()
    sys_ = fem.assemble(msh, 2.0)
    U = fem.solve(sys_)
    assert np.isclose(
        U.coefficients[sys_.interior[0]], sys_.rhs[0] / sys_.matrix().toarray()[0, 0]
    )


def test_energy_zero_and_hat():
    msh = crisscross()
    zero = fem.DiscreteSolution(np.zeros(msh.n_vertices), msh.generation)
    assert fem.energy_norm_sq(msh, zero) == 0.0
    center = fem.assemble(msh, 1.0).interior[0]
    hat = np.zeros(msh.n_vertices)
    hat[center] = 1.0
    assert np.isclose(
        fem.energy_norm_sq(msh, fem.DiscreteSolution(hat, msh.generation)), 4.0
    )


def test_energy_monotone_under_refinement():
    msh = m.make_initial_mesh("l_shape")
    prev = -1.0
    for _ in range(4):
        U = fem.solve(fem.assemble(msh, 1.0))
        e = fem.energy_norm_sq(msh, U)
        assert e >= prev - 1e-10
        prev = e
        est = fem.residual_estimator(msh, U, 1.0)
        marked = marking.doerfler_mark(est, 0.5)
        msh = m.refine_nvb(msh, marked.indices)


def test_generation_mismatch_raises():
    msh = crisscross()
    stale = fem.DiscreteSolution(np.zeros(msh.n_vertices), msh.generation + 5)
    with pytest.raises(ContractError):
        fem.energy_norm_sq(msh, stale)
    with pytest.raises(ContractError):
        fem.residual_estimator(msh, stale, 1.0)


def test_estimator_zero_data():
    msh = crisscross()
    U = fem.DiscreteSolution(np.zeros(msh.n_vertices), msh.generation)
    est = fem.residual_estimator(msh, U, 0.0)
    assert np.all(est.values == 0.0)


def test_estimator_pure_source():
    msh = m.make_initial_mesh("l_shape")
    U = fem.DiscreteSolution(np.zeros(msh.n_vertices), msh.generation)
    est = fem.residual_estimator(msh, U, 1.0, form="euclid")
    diam = fem.euclid_diameters(msh)
    area = m.areas(msh)
    assert np.allclose(est.values, diam ** 2 * area)


def test_estimator_hat_jump():
    msh = m.make_initial_mesh("unit_square")
    # hat at vertex (1, 0): gradient (1, -1) on the lower triangle, 0 above
    u = np.zeros(msh.n_vertices)
    idx = np.nonzero((msh.vertices[:, 0] == 1.0) & (msh.vertices[:, 1] == 0.0))[0]
    u[idx] = 1.0
    U = fem.DiscreteSolution(u, msh.generation)
    est = fem.residual_estimator(msh, U, 0.0, form="euclid")
    expected = np.sqrt(2.0) * 2.0 * np.sqrt(2.0)  # diam * ||[dn U]||^2 = sqrt2 * 2 sqrt2
    assert np.allclose(est.values, expected)


def test_estimator_additivity():
    msh = m.refine_nvb(m.make_initial_mesh("l_shape"), {1, 3})
    U = fem.solve(fem.assemble(msh, 1.0))
    est = fem.residual_estimator(msh, U, 1.0)
    assert est.total() == float(np.sum(est.values))


def test_form_equivalence_bounded_ratio():
    msh = m.make_initial_mesh("l_shape")
    for _ in range(3):
        U = fem.solve(fem.assemble(msh, 1.0))
        a = fem.residual_estimator(msh, U, 1.0, form="euclid").values
        b = fem.residual_estimator(msh, U, 1.0, form="inf").values
        mask = (a > 0) & (b > 0)
        ratio = a[mask] / b[mask]
        assert np.all(ratio >= 0.1) and np.all(ratio <= 10.0)
        marked = marking.doerfler_mark(fem.EstimatorField(a, msh.generation), 0.5)
        msh = m.refine_nvb(msh, marked.indices)


def test_reliability_trend_l_shape():
    msh = m.make_initial_mesh("l_shape")
    totals = []
    while msh.n_elements < 2500:
        U = fem.solve(fem.assemble(msh, 1.0))
        est = fem.residual_estimator(msh, U, 1.0)
        totals.append(np.sqrt(est.total()))
        marked = marking.doerfler_mark(est, 0.5)
        msh = m.refine_nvb(msh, marked.indices)
    for a, b in zip(totals, totals[1:]):
        assert b <= 1.05 * a
