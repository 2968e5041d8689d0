"""Sparse convex QP solver: operator splitting (ADMM) with polishing.

Solves    minimize    0.5 x'Px + q'x
          subject to  l <= Ax <= u

using the standard splitting with a quasi-definite KKT factorization,
Ruiz diagonal preconditioning, vectorized step size rho (stiffer on
equality rows), residual-based adaptive rho, and an active-set polish
step for high-accuracy solutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OSQP_ALPHA = 1.6
SIGMA = 1e-6
EQ_TOL = 1e-12
RHO_EQ_SCALE = 1e3
RHO_MIN, RHO_MAX = 1e-6, 1e6


class QPError(RuntimeError):
    pass


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray  # constraint multipliers
    z: np.ndarray  # constraint values (clipped Ax)
    objective: float
    iterations: int
    status: str  # "solved" | "max_iter"
    primal_residual: float
    dual_residual: float
    gap_estimate: float
    polished: bool


def _ruiz(P, A, q, iters=10):
    """Modified Ruiz equilibration of the stacked KKT data.

    Returns diagonal scalings (d over variables, e over constraints) and
    the cost scaling c.
    """
    n, m = P.shape[0], A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        col_norms_p = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        col_norms_a = np.abs(As).max(axis=0).toarray().ravel() if As.nnz else np.zeros(n)
        col = np.maximum(col_norms_p, col_norms_a)
        col[col == 0] = 1.0
        d_step = 1.0 / np.sqrt(col)
        row = np.abs(As).max(axis=1).toarray().ravel() if As.nnz else np.zeros(m)
        row[row == 0] = 1.0
        e_step = 1.0 / np.sqrt(row)
        D = sp.diags(d_step)
        E = sp.diags(e_step)
        Ps = (D @ Ps @ D).tocsc()
        As = (E @ As @ D).tocsc()
        qs = d_step * qs
        d *= d_step
        e *= e_step
        # Cost scaling keeps the objective terms balanced.
        p_norm = np.abs(Ps).max(axis=0).toarray().ravel()
        mean_p = p_norm[p_norm > 0].mean() if (p_norm > 0).any() else 0.0
        q_norm = np.max(np.abs(qs)) if qs.size else 0.0
        gamma = 1.0 / max(mean_p, q_norm, 1e-8)
        gamma = min(max(gamma, 1e-6), 1e6)
        Ps = Ps * gamma
        qs = qs * gamma
        c *= gamma
    return Ps.tocsc(), As.tocsc(), qs, d, e, c


def _rho_vector(l, u, rho_bar):
    rho = np.full(l.shape[0], rho_bar)
    rho[(u - l) <= EQ_TOL] = rho_bar * RHO_EQ_SCALE
    return np.clip(rho, RHO_MIN, RHO_MAX)


def _factor(P, A, sigma, rho):
    m = A.shape[0]
    kkt = sp.bmat(
        [[P + sigma * sp.eye(P.shape[0]), A.T], [A, -sp.diags(1.0 / rho)]],
        format="csc",
    )
    return spla.splu(kkt)


def solve_qp(
    P,
    q,
    A,
    l,
    u,
    eps_abs: float = 1e-6,
    eps_rel: float = 1e-6,
    max_iter: int = 50000,
    rho_bar: float = 0.1,
    polish: bool = True,
    check_every: int = 25,
) -> QPResult:
    """Solve the box-constrained QP; raises QPError on malformed input."""
    P = sp.csc_matrix(P)
    A = sp.csc_matrix(A)
    q = np.asarray(q, dtype=float)
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = P.shape[0], A.shape[0]
    if P.shape != (n, n) or A.shape[1] != n or q.shape[0] != n:
        raise QPError("inconsistent problem dimensions")
    if l.shape[0] != m or u.shape[0] != m:
        raise QPError("inconsistent constraint dimensions")
    if np.any(l > u + 1e-12):
        raise QPError("lower bound exceeds upper bound")
    if m == 0:
        x = spla.spsolve(sp.csc_matrix(P + SIGMA * sp.eye(n)), -q)
        obj = float(0.5 * x @ (P @ x) + q @ x)
        return QPResult(x, np.zeros(0), np.zeros(0), obj, 0, "solved", 0.0, 0.0, 0.0, False)

    Ps, As, qs, d, e, c = _ruiz(P, A, q)
    ls = e * l
    us = e * u
    rho = _rho_vector(ls, us, rho_bar)
    lu = _factor(Ps, As, SIGMA, rho)

    x = np.zeros(n)
    z = np.clip(np.zeros(m), ls, us)
    y = np.zeros(m)
    rhs = np.empty(n + m)

    status = "max_iter"
    pri_res = dua_res = np.inf
    it = 0
    rho_scale = 1.0
    refactors = 0
    polished = False
    x_u = np.zeros(n)
    y_u = np.zeros(m)
    next_polish_at = check_every * 4
    for it in range(1, max_iter + 1):
        rhs[:n] = SIGMA * x - qs
        rhs[n:] = z - y / rho
        sol = lu.solve(rhs)
        x_tilde = sol[:n]
        z_tilde = z + (sol[n:] - y) / rho
        x = OSQP_ALPHA * x_tilde + (1 - OSQP_ALPHA) * x
        z_mix = OSQP_ALPHA * z_tilde + (1 - OSQP_ALPHA) * z
        z_new = np.clip(z_mix + y / rho, ls, us)
        y = y + rho * (z_mix - z_new)
        z = z_new

        if it % check_every == 0 or it == max_iter:
            x_u = d * x
            y_u = (e / c) * y
            z_u = z / e
            ax = A @ x_u
            px = P @ x_u
            aty = A.T @ y_u
            pri_res = float(np.max(np.abs(ax - z_u)))
            dua_res = float(np.max(np.abs(px + q + aty)))
            eps_pri = eps_abs + eps_rel * max(
                np.max(np.abs(ax)), np.max(np.abs(z_u)), 1e-12
            )
            eps_dua = eps_abs + eps_rel * max(
                np.max(np.abs(px)), np.max(np.abs(aty)), np.max(np.abs(q)), 1e-12
            )
            if pri_res < eps_pri and dua_res < eps_dua:
                status = "solved"
                break
            # Once the iterate is roughly converged, try to jump to the
            # exact solution via an active-set polish.
            if polish and max(pri_res, dua_res) < 1e-3 and it >= next_polish_at:
                next_polish_at = it + 10 * check_every
                res = _polish(P, q, A, l, u, x_u, y_u)
                if res is not None and res[2] < eps_pri and res[3] < eps_dua:
                    x_u, y_u = res[0], res[1]
                    pri_res, dua_res = res[2], res[3]
                    status = "solved"
                    polished = True
                    break
            # Residual-balancing rho update (OSQP normalization), with a
            # refactorization guard.
            pri_rel = pri_res / max(np.max(np.abs(ax)), np.max(np.abs(z_u)), 1e-10)
            dua_rel = dua_res / max(
                np.max(np.abs(px)), np.max(np.abs(aty)), np.max(np.abs(q)), 1e-10
            )
            ratio = float(np.sqrt(pri_rel / max(dua_rel, 1e-16)))
            ratio = min(max(ratio, 0.2), 5.0)
            new_scale = rho_scale * ratio
            if (new_scale > 2 * rho_scale or new_scale < rho_scale / 2) and refactors < 25:
                rho = np.clip(rho * (new_scale / rho_scale), RHO_MIN, RHO_MAX)
                lu = _factor(Ps, As, SIGMA, rho)
                rho_scale = new_scale
                refactors += 1

    if not polished:
        x_u = d * x
        y_u = (e / c) * y
    z_u = np.clip(A @ x_u, l, u)

    if polish and not polished:
        res = _polish(P, q, A, l, u, x_u, y_u)
        if res is not None:
            xp, yp, pri_p, dua_p = res
            if max(pri_p, dua_p) <= max(pri_res, dua_res, 1e-12):
                x_u, y_u = xp, yp
                z_u = np.clip(A @ x_u, l, u)
                pri_res, dua_res = pri_p, dua_p
                polished = True
                if status == "max_iter" and pri_res < eps_abs * 10 and dua_res < eps_abs * 10:
                    status = "solved"

    obj = float(0.5 * x_u @ (P @ x_u) + q @ x_u)
    gap = float(abs(y_u @ (A @ x_u) - y_u @ z_u))
    return QPResult(
        x=x_u,
        y=y_u,
        z=z_u,
        objective=obj,
        iterations=it,
        status=status,
        primal_residual=pri_res,
        dual_residual=dua_res,
        gap_estimate=gap,
        polished=polished,
    )


def _solve_pinned(P, q, A, l, u, low_mask, upp_mask, delta=1e-9, refine_steps=4):
    """Solve the KKT system with the given rows pinned at their bounds."""
    n = P.shape[0]
    active = low_mask | upp_mask
    idx = np.where(active)[0]
    bounds = np.where(low_mask[idx], l[idx], u[idx])
    k = idx.shape[0]
    A_act = A[idx]
    kkt = sp.bmat(
        [[P + delta * sp.eye(n), A_act.T], [A_act, -delta * sp.eye(k)]], format="csc"
    )
    rhs = np.concatenate([-q, bounds])
    try:
        lu = spla.splu(kkt)
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    kkt_true = sp.bmat([[P, A_act.T], [A_act, None]], format="csc")
    best = sol
    best_res = float(np.max(np.abs(rhs - kkt_true @ sol)))
    for _ in range(refine_steps):
        resid = rhs - kkt_true @ sol
        sol = sol + lu.solve(resid)
        r = float(np.max(np.abs(rhs - kkt_true @ sol)))
        if r < best_res:
            best, best_res = sol, r
        else:
            break
    xp = best[:n]
    yp = np.zeros(A.shape[0])
    yp[idx] = best[n:]
    return xp, yp


def _polish(P, q, A, l, u, x, y, max_rounds=12):
    """Primal-dual active-set polish seeded by the ADMM solution.

    The ADMM active-set guess can be rank-deficient on LP-like problems
    (zero-curvature directions), so the pinned solve is iterated: rows the
    trial point violates are pinned, pinned rows with wrong-sign
    multipliers are released, until the point is primal and dual feasible
    or the round budget runs out.  Returns the best (x, y, pri, dua) found.
    """
    m = A.shape[0]
    y_tol = 1e-8 * max(1.0, float(np.max(np.abs(y))) if y.size else 0.0)
    eq_rows = (u - l) <= EQ_TOL
    low = ((y < -y_tol) & ~eq_rows) | eq_rows
    upp = (y > y_tol) & ~eq_rows
    best = None
    for _ in range(max_rounds):
        out = _solve_pinned(P, q, A, l, u, low, upp)
        if out is None:
            return best
        xp, yp = out
        axp = A @ xp
        viol_low = np.maximum(l - axp, 0)
        viol_upp = np.maximum(axp - u, 0)
        pri = float(np.max(viol_low + viol_upp))
        dua = float(np.max(np.abs(P @ xp + q + A.T @ yp)))
        if best is None or max(pri, dua) < max(best[2], best[3]):
            best = (xp, yp, pri, dua)
        # Release pinned inequality rows whose multiplier sign is wrong,
        # then pin rows the trial point violates.
        wrong_low = low & ~eq_rows & (yp > y_tol)
        wrong_upp = upp & (yp < -y_tol)
        new_low = low & ~wrong_low
        new_upp = upp & ~wrong_upp
        add_low = (viol_low > 1e-9) & ~new_low & ~new_upp
        add_upp = (viol_upp > 1e-9) & ~new_low & ~new_upp
        if pri <= 1e-9 and not (wrong_low.any() or wrong_upp.any()):
            break
        if not (add_low.any() or add_upp.any() or wrong_low.any() or wrong_upp.any()):
            break
        new_low |= add_low
        new_upp |= add_upp
        if (new_low == low).all() and (new_upp == upp).all():
            break
        low, upp = new_low, new_upp
    return best
