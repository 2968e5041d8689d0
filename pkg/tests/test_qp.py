import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from dersim.qp import QPError, solve_qp


def brute_force_qp(P, q, A, l, u, tol=1e-9):
    """Active-set enumeration oracle for tiny strictly convex QPs."""
    m, n = A.shape
    best = (np.inf, None)
    for subset in itertools.chain.from_iterable(
        itertools.combinations(range(m), k) for k in range(m + 1)
    ):
        sides_options = []
        for i in subset:
            if u[i] - l[i] <= 1e-12:
                sides_options.append(("eq",))
            else:
                sides_options.append(("lo", "hi"))
        for sides in itertools.product(*sides_options):
            A_s = A[list(subset)]
            b = np.array(
                [l[i] if s in ("eq", "lo") else u[i] for i, s in zip(subset, sides)]
            )
            k = len(subset)
            kkt = np.block([[P, A_s.T], [A_s, np.zeros((k, k))]])
            rhs = np.concatenate([-q, b])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, nu = sol[:n], sol[n:]
            ax = A @ x
            if np.any(ax < l - 1e-8) or np.any(ax > u + 1e-8):
                continue
            ok = True
            for j, (i, s) in enumerate(zip(subset, sides)):
                if s == "lo" and nu[j] > tol:
                    ok = False
                if s == "hi" and nu[j] < -tol:
                    ok = False
            if not ok:
                continue
            obj = 0.5 * x @ P @ x + q @ x
            if obj < best[0]:
                best = (obj, x)
    assert best[1] is not None, "oracle found no KKT point"
    return best


def random_qp(rng, n, m):
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.5 * np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    # Center the slabs on a common point so the set is nonempty.
    mid = A @ rng.normal(size=n)
    half = np.abs(rng.normal(size=m)) + 0.2
    return P, q, A, mid - half, mid + half


def test_matches_active_set_oracle_on_small_random_qps():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(1, 6))
        P, q, A, l, u = random_qp(rng, n, m)
        obj_ref, x_ref = brute_force_qp(P, q, A, l, u)
        res = solve_qp(P, q, A, l, u)
        assert res.status == "solved"
        assert res.objective == pytest.approx(obj_ref, abs=1e-6, rel=1e-6)
        assert np.allclose(res.x, x_ref, atol=1e-5)


def test_equality_constraints():
    # min (x0-1)^2 + (x1-2)^2 s.t. x0 + x1 = 1
    P = 2 * np.eye(2)
    q = np.array([-2.0, -4.0])
    A = np.array([[1.0, 1.0]])
    res = solve_qp(P, q, A, np.array([1.0]), np.array([1.0]))
    assert res.status == "solved"
    assert res.x == pytest.approx([0.0, 1.0], abs=1e-6)


def test_hinge_lifting_recovers_positive_part():
    # minimize sum mu_t * y_t with y >= a_t, y >= 0  ->  y = max(a, 0)
    a = np.array([-1.0, 0.5, 2.0, -0.2])
    n = len(a)
    P = sp.csc_matrix((n, n))
    q = np.ones(n)
    A = sp.vstack([sp.eye(n), sp.eye(n)]).tocsc()
    l = np.concatenate([a, np.zeros(n)])
    u = np.full(2 * n, np.inf)
    res = solve_qp(P, q, A, l, u)
    assert res.status == "solved"
    assert np.allclose(res.x, np.maximum(a, 0.0), atol=1e-6)


def test_kkt_residuals_on_medium_sparse_qp():
    rng = np.random.default_rng(3)
    n, m = 300, 450
    P = sp.random(n, n, density=0.02, random_state=3)
    P = (P @ P.T + sp.eye(n)).tocsc()
    q = rng.normal(size=n)
    A = sp.random(m, n, density=0.03, random_state=4).tocsc()
    A = sp.vstack([A, sp.eye(n)]).tocsc()
    mid = A @ rng.normal(size=n)
    half = np.abs(rng.normal(size=A.shape[0])) + 0.5
    res = solve_qp(P, q, A, mid - half, mid + half)
    assert res.status == "solved"
    assert res.primal_residual < 1e-5
    assert res.dual_residual < 1e-5
    assert res.gap_estimate < 1e-4 * max(1.0, abs(res.objective))


def test_dimension_mismatch_raises():
    with pytest.raises(QPError):
        solve_qp(np.eye(2), np.zeros(3), np.eye(2), np.zeros(2), np.ones(2))


def test_crossed_bounds_raise():
    with pytest.raises(QPError):
        solve_qp(np.eye(1), np.zeros(1), np.eye(1), np.array([1.0]), np.array([0.0]))
