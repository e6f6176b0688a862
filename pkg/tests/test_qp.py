import numpy as np
import pytest

from smpc.errors import DimensionMismatchError, NotSPDError
from smpc.qp import AdmmBackend, QpProblem, QpStatus, solve

from reference_qp import dual_pgd, eq_kkt, random_strictly_convex


def test_min_x_squared_above_one():
    p = QpProblem(H=[[2.0]], f=[0.0], A_in=[[-1.0]], b_in=[-1.0])
    s = solve(p)
    assert s.status is QpStatus.OPTIMAL
    assert s.x == pytest.approx([1.0], abs=1e-9)
    assert s.objective == pytest.approx(1.0, abs=1e-9)


def test_clamped_unconstrained_optimum():
    # min (x-3)^2 on [-2, 2]: at x=2 the expanded quadratic is -8, plus the
    # dropped constant 9 gives the original objective value 1
    p = QpProblem(H=[[2.0]], f=[-6.0], A_in=[[1.0], [-1.0]], b_in=[2.0, 2.0])
    s = solve(p)
    assert s.x == pytest.approx([2.0], abs=1e-9)
    assert s.objective + 9.0 == pytest.approx(1.0, abs=1e-9)


def test_contradictory_box_is_infeasible():
    p = QpProblem(H=[[2.0]], f=[0.0], A_in=[[1.0], [-1.0]], b_in=[-1.0, -1.0])
    assert solve(p).status is QpStatus.INFEASIBLE


def test_infeasible_never_optimal_randomized():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        i = int(rng.integers(0, n))
        lo = rng.uniform(0.5, 2.0)
        a = np.zeros((2, n))
        a[0, i], a[1, i] = 1.0, -1.0
        b = np.array([-lo, -lo])  # x_i <= -lo and x_i >= lo
        m_mat = rng.standard_normal((n, n))
        p = QpProblem(H=m_mat.T @ m_mat + np.eye(n), f=rng.standard_normal(n),
                      A_in=a, b_in=b)
        assert solve(p).status is QpStatus.INFEASIBLE


def test_matches_dual_ascent_reference_n20():
    rng = np.random.default_rng(20)
    H, f, A, b = random_strictly_convex(rng, 20, 40)
    x_ref, obj_ref = dual_pgd(H, f, A, b)
    s = solve(QpProblem(H=H, f=f, A_in=A, b_in=b))
    assert s.status is QpStatus.OPTIMAL
    assert abs(s.objective - obj_ref) <= 1e-5 * (1.0 + abs(obj_ref))


def test_matches_reference_on_random_batch():
    rng = np.random.default_rng(8)
    for _ in range(40):
        n = int(rng.integers(2, 25))
        m = int(rng.integers(1, 3 * n))
        H, f, A, b = random_strictly_convex(rng, n, m)
        x_ref, obj_ref = dual_pgd(H, f, A, b)
        s = solve(QpProblem(H=H, f=f, A_in=A, b_in=b))
        assert s.status is QpStatus.OPTIMAL
        assert s.objective <= obj_ref + 1e-5 * (1.0 + abs(obj_ref))
        assert (A @ s.x - b).max() <= 1e-8


def test_equality_only_matches_kkt_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        p_rows = int(rng.integers(1, n))
        m_mat = rng.standard_normal((n, n))
        H = m_mat.T @ m_mat + np.eye(n)
        f = rng.standard_normal(n)
        A_eq = rng.standard_normal((p_rows, n))
        b_eq = rng.standard_normal(p_rows)
        x_ref, obj_ref = eq_kkt(H, f, A_eq, b_eq)
        s = solve(QpProblem(H=H, f=f, A_eq=A_eq, b_eq=b_eq))
        assert s.status is QpStatus.OPTIMAL
        assert s.x == pytest.approx(x_ref, abs=1e-7)
        assert np.abs(A_eq @ s.x - b_eq).max() <= 1e-8


def test_mixed_equality_inequality_against_reference():
    # eliminate the equalities by hand, then compare against the dual oracle
    rng = np.random.default_rng(9)
    for _ in range(10):
        n, p_rows, m = 12, 4, 20
        H, f, A_eq, b_eq, A_in, b_in = random_strictly_convex(rng, n, m, m_eq=p_rows)
        s = solve(QpProblem(H=H, f=f, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in))
        assert s.status is QpStatus.OPTIMAL
        # reduce: x = x_p + Z y
        u, sv, vt = np.linalg.svd(A_eq)
        x_p = vt[:p_rows].T @ (np.diag(1 / sv) @ (u.T @ b_eq))
        z_basis = vt[p_rows:].T
        H_r = z_basis.T @ H @ z_basis
        f_r = z_basis.T @ (H @ x_p + f)
        _, obj_red = dual_pgd(H_r, f_r, A_in @ z_basis, b_in - A_in @ x_p)
        obj_ref = obj_red + 0.5 * x_p @ H @ x_p + f @ x_p
        assert abs(s.objective - obj_ref) <= 1e-5 * (1.0 + abs(obj_ref))


def test_inconsistent_equalities_infeasible():
    p = QpProblem(H=2 * np.eye(2), f=[0, 0],
                  A_eq=[[1.0, 0.0], [1.0, 0.0]], b_eq=[0.0, 1.0])
    assert solve(p).status is QpStatus.INFEASIBLE


def test_equality_pinned_inequality_infeasible():
    # equalities force x = 2, inequality demands x <= 1
    p = QpProblem(H=[[2.0]], f=[0.0], A_eq=[[1.0]], b_eq=[2.0],
                  A_in=[[1.0]], b_in=[1.0])
    assert solve(p).status is QpStatus.INFEASIBLE


def test_unbounded_detection():
    # zero curvature along x2 with a pulling linear term and no constraints
    p = QpProblem(H=[[2.0, 0.0], [0.0, 0.0]], f=[0.0, -1.0])
    assert solve(p).status is QpStatus.UNBOUNDED


def test_optimal_residual_contract():
    rng = np.random.default_rng(33)
    H, f, A_eq, b_eq, A_in, b_in = random_strictly_convex(rng, 10, 18, m_eq=3)
    s = solve(QpProblem(H=H, f=f, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in),
              tol=1e-8)
    assert s.status is QpStatus.OPTIMAL
    assert np.abs(A_eq @ s.x - b_eq).max() <= 1e-8
    assert (A_in @ s.x - b_in).max() <= 1e-8


def test_backend_reuse_and_hints_reproduce_solution():
    rng = np.random.default_rng(4)
    H, f, A, b = random_strictly_convex(rng, 15, 30)
    be = AdmmBackend(H, None, A)
    s1 = be.solve(f, np.zeros(0), b)
    s2 = be.solve(f, np.zeros(0), b, active_hints=[s1.active_set])
    assert s2.iterations == 0
    assert s2.x == pytest.approx(s1.x, abs=1e-9)
    # a shifted problem solved from the same hints still verifies
    b_shift = b + 0.01
    s3 = be.solve(f, np.zeros(0), b_shift, active_hints=[s1.active_set])
    assert s3.status is QpStatus.OPTIMAL
    assert (A @ s3.x - b_shift).max() <= 1e-8


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionMismatchError):
        QpProblem(H=np.eye(2), f=[0.0])
    with pytest.raises(DimensionMismatchError):
        QpProblem(H=np.eye(2), f=[0.0, 0.0], A_in=[[1.0, 0.0]], b_in=[1.0, 2.0])
    be = AdmmBackend(np.eye(2))
    with pytest.raises(DimensionMismatchError):
        be.solve(np.zeros(3))


def test_h_must_be_psd():
    with pytest.raises(NotSPDError):
        QpProblem(H=[[-1.0]], f=[0.0])
    with pytest.raises(NotSPDError):
        QpProblem(H=[[1.0, 2.0], [2.0, 1.0]], f=[0.0, 0.0])


def test_psd_but_singular_h_is_accepted():
    # flat direction constrained away: still solvable
    p = QpProblem(H=[[2.0, 0.0], [0.0, 0.0]], f=[0.0, 1.0],
                  A_in=[[0.0, -1.0]], b_in=[0.5])
    s = solve(p)
    assert s.status is QpStatus.OPTIMAL
    assert s.x == pytest.approx([0.0, -0.5], abs=1e-7)
