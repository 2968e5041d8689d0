"""Perfect-foresight centralized controller.

Solves a network-wide convex program over overlapping 2-day windows
(committing the first day) that minimizes total consumer energy cost plus
battery wear plus soft penalties on predicted voltage-band and transformer
overload excursions, subject to every device constraint, with the
data-driven linear power-flow surrogate supplying the predictions.

Transformer loading enters the optimizer in the apparent-power magnitude
domain: the magnitude is lower-bounded by polygonal cuts on the predicted
(P, Q) flow, and the squared hinge above the tightened limit is penalized.
The reported L4 term is evaluated in the squared domain exactly as the
surrogate defines it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .control_local import (
    LAMBDA2_DEFAULT,
    ForesightError,
    NodeProblem,
    _repair_daily_balance,
    _repair_ev_target,
    node_problem,
    run_heuristic,
    window_ev_tasks,
)
from .dispatch import DispatchSchedule, storage_trajectory
from .qp import solve_qp
from .scenario import Scenario

LAMBDA34_DEFAULT = 125.0
TIGHTEN_DEFAULT = 0.05
VOLTAGE_LIMIT = 0.05  # +/- band around 1.0 pu used by the reliability metric
OVERLOAD_LIMIT = 1.2  # transformer metric limit as a fraction of rating
N_CUTS_DEFAULT = 16


class CentralError(RuntimeError):
    pass


_LAST_ROW_TAGS: list | None = None  # build diagnostics for the last window


@dataclass
class WindowProblem:
    """One 2-day slice of the centralized program."""

    day: int
    t_lo: int
    t_hi: int
    commit_hi: int
    node_problems: dict[str, NodeProblem]
    v_max: float
    v_min: float
    tau_max: np.ndarray  # per transformer, tightened, kVA^2
    m_limit: np.ndarray  # sqrt(tau_max), kVA


@dataclass
class CentralSolution:
    window: WindowProblem
    u: dict[str, np.ndarray]
    storage_c: dict[str, np.ndarray]
    storage_d: dict[str, np.ndarray]
    ev: dict[int, tuple[object, np.ndarray]]
    v_hat: np.ndarray  # (W, N)
    tau_hat: np.ndarray  # (W, n_tr)
    objective: float
    breakdown: dict
    status: str
    iterations: int


def tightened_limits(network, tighten: float = TIGHTEN_DEFAULT):
    """Voltage band and squared-flow limits tightened relative to the metric."""
    v_max = 1.0 + VOLTAGE_LIMIT * (1.0 - tighten)
    v_min = 1.0 - VOLTAGE_LIMIT * (1.0 - tighten)
    ratings = np.array([tr.rated_kva for tr in network.transformers], dtype=float)
    if np.any(ratings <= 0) or np.any(np.isnan(ratings)):
        raise CentralError("all transformers need ratings for central control")
    tau_max = (1.0 - tighten) * (OVERLOAD_LIMIT * ratings) ** 2
    return v_min, v_max, tau_max


def build_window(
    scenario: Scenario,
    day: int,
    carry_q: dict[str, float],
    delivered: dict[int, float],
    window_days: int = 2,
    tighten: float = TIGHTEN_DEFAULT,
) -> WindowProblem:
    """Slice the scenario into the window starting at ``day``."""
    cfg = scenario.cfg
    spd = cfg.steps_per_day
    n_days = cfg.horizon_days
    t_lo = day * spd
    t_hi = min((day + window_days) * spd, scenario.T)
    commit_days = (t_hi // spd - day) if t_hi >= scenario.T else 1
    commit_hi = min(t_lo + commit_days * spd, t_hi)
    node_problems = {}
    for nid in scenario.network.consumer_nodes:
        prob = node_problem(
            scenario, nid, t_lo, t_hi, carry_q.get(nid), delivered
        )
        node_problems[nid] = prob
    v_min, v_max, tau_max = tightened_limits(scenario.network, tighten)
    return WindowProblem(
        day=day,
        t_lo=t_lo,
        t_hi=t_hi,
        commit_hi=commit_hi,
        node_problems=node_problems,
        v_max=v_max,
        v_min=v_min,
        tau_max=tau_max,
        m_limit=np.sqrt(tau_max),
    )


def solve_window(
    scenario: Scenario,
    window: WindowProblem,
    model,
    lambda2: float = LAMBDA2_DEFAULT,
    lambda3: float = LAMBDA34_DEFAULT,
    lambda4: float = LAMBDA34_DEFAULT,
    n_cuts: int = N_CUTS_DEFAULT,
) -> CentralSolution:
    """Assemble and solve the window's sparse convex QP."""
    cfg = scenario.cfg
    net = scenario.network
    dt = cfg.dt_hours
    eta_c = cfg.charge_efficiency
    eta_d = eta_c
    spd = cfg.steps_per_day
    W = window.t_hi - window.t_lo
    arrays = scenario.arrays()
    N = net.n_nodes
    n_tr = len(net.transformers)

    # Controllable nodes and fixed-injection background.
    ctrl = [
        nid for nid, prob in window.node_problems.items()
        if prob.storage is not None or prob.u_base is not None or prob.ev_tasks
    ]
    ctrl_pos = {nid: k for k, nid in enumerate(ctrl)}
    n_ctrl = len(ctrl)

    # Fixed part of every node's real injection (loads, PV, inflexible
    # thermal; controllable-node device actions excluded).
    p_fixed = arrays.p_base[window.t_lo:window.t_hi].copy()
    p_fixed += arrays.u_base[window.t_lo:window.t_hi]
    p_fixed -= arrays.pv[window.t_lo:window.t_hi]
    q_fixed = arrays.q[window.t_lo:window.t_hi]
    for nid in ctrl:
        j = net.node_index[nid]
        prob = window.node_problems[nid]
        # Controllable delta rides on top of base_net (which already
        # contains u_base for inflexible nodes and excludes it otherwise).
        p_fixed[:, j] = prob.base_net

    # Surrogate constants: prediction with all controllable deltas at zero.
    s_fixed = np.concatenate([p_fixed, q_fixed], axis=1)  # (W, 2N)
    v_const = s_fixed @ model.A.T + model.a  # (W, N)
    zp_const = s_fixed @ model.F.T + model.f  # (W, n_tr)
    zq_const = s_fixed @ model.G.T + model.g
    # Sensitivities to controllable nodes' real-power deltas.
    ctrl_cols = np.array([net.node_index[nid] for nid in ctrl], dtype=int)
    Av = model.A[:, ctrl_cols]  # (N, n_ctrl)
    Fv = model.F[:, ctrl_cols]
    Gv = model.G[:, ctrl_cols]

    # Interval presolve: per controllable node, bounds on its delta.
    lo_delta = np.zeros(n_ctrl)
    hi_delta = np.zeros(n_ctrl)
    for k, nid in enumerate(ctrl):
        prob = window.node_problems[nid]
        hi = 0.0
        lo = 0.0
        if prob.storage is not None:
            hi += prob.storage.power_kw
            lo -= prob.storage.power_kw
        if prob.u_base is not None:
            hi += prob.u_max  # u in [0, u_max]; base_net excludes u_base
        for task in prob.ev_tasks:
            hi += task.charger_kw
        lo_delta[k] = lo
        hi_delta[k] = hi

    # ------------------------------------------------------------------
    # Variable allocation
    # ------------------------------------------------------------------
    idx: dict = {}
    n = 0

    def alloc(name, count):
        nonlocal n
        idx[name] = (n, n + count)
        n += count

    for nid in ctrl:
        prob = window.node_problems[nid]
        if prob.storage is not None:
            alloc(("c", nid), W)
            alloc(("d", nid), W)
            alloc(("Q", nid), W)
        for k, task in enumerate(prob.ev_tasks):
            alloc(("ev", nid, k), task.hi - task.lo)
        if prob.u_base is not None:
            alloc(("u", nid), W)
            alloc(("e", nid), W)
        alloc(("y", nid), W)
        alloc(("sp", nid), W)  # node real-injection delta (kW)

    def col(name, t=0):
        return idx[name][0] + t

    # Penalty variables only where the interval bound says a violation is
    # reachable.
    dv_hi = np.maximum(Av, 0.0) @ hi_delta + np.minimum(Av, 0.0) @ lo_delta
    dv_lo = np.maximum(Av, 0.0) @ lo_delta + np.minimum(Av, 0.0) @ hi_delta
    v_hi_reach = v_const + dv_hi[None, :]  # max achievable v_hat
    v_lo_reach = v_const + dv_lo[None, :]
    w_needed = (v_hi_reach > window.v_max) | (v_lo_reach < window.v_min)

    dzp_hi = np.maximum(Fv, 0.0) @ hi_delta + np.minimum(Fv, 0.0) @ lo_delta
    dzp_lo = np.maximum(Fv, 0.0) @ lo_delta + np.minimum(Fv, 0.0) @ hi_delta
    dzq_hi = np.maximum(Gv, 0.0) @ hi_delta + np.minimum(Gv, 0.0) @ lo_delta
    dzq_lo = np.maximum(Gv, 0.0) @ lo_delta + np.minimum(Gv, 0.0) @ hi_delta
    zp_max = np.maximum(np.abs(zp_const + dzp_hi[None, :]),
                        np.abs(zp_const + dzp_lo[None, :]))
    zq_max = np.maximum(np.abs(zq_const + dzq_hi[None, :]),
                        np.abs(zq_const + dzq_lo[None, :]))
    h_needed = np.hypot(zp_max, zq_max) > window.m_limit[None, :]

    w_index = {}
    for t in range(W):
        for i in range(N):
            if w_needed[t, i]:
                w_index[(t, i)] = n
                n += 1
    h_index = {}
    for t in range(W):
        for k in range(n_tr):
            if h_needed[t, k]:
                h_index[(t, k, "zp")] = n
                h_index[(t, k, "zq")] = n + 1
                h_index[(t, k, "h")] = n + 2
                n += 3

    # ------------------------------------------------------------------
    # Constraints
    # ------------------------------------------------------------------
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    lbs: list[float] = []
    ubs: list[float] = []
    row_tags: list[str] = []
    m = 0

    def add_row(entries, lo, hi, tag=""):
        nonlocal m
        for cc, vv in entries:
            rows.append(m)
            cols.append(cc)
            vals.append(vv)
        lbs.append(lo)
        ubs.append(hi)
        row_tags.append(tag)
        m += 1

    inf = float("inf")
    for nid in ctrl:
        prob = window.node_problems[nid]
        unit = prob.storage
        if unit is not None:
            q0 = unit.initial_kwh if prob.q_init is None else prob.q_init
            for t in range(W):
                add_row([(col(("c", nid), t), 1.0)], 0.0, unit.power_kw)
                add_row([(col(("d", nid), t), 1.0)], 0.0, unit.power_kw)
                add_row([(col(("Q", nid), t), 1.0)], unit.q_min_kwh, unit.capacity_kwh)
                entries = [
                    (col(("Q", nid), t), 1.0),
                    (col(("c", nid), t), -dt * eta_c),
                    (col(("d", nid), t), dt / eta_d),
                ]
                if t == 0:
                    rhs = unit.leakage * q0
                else:
                    entries.append((col(("Q", nid), t - 1), -unit.leakage))
                    rhs = 0.0
                add_row(entries, rhs, rhs, "dyn")
        for k, task in enumerate(prob.ev_tasks):
            w_len = task.hi - task.lo
            for t in range(w_len):
                add_row([(col(("ev", nid, k), t), 1.0)], 0.0, task.charger_kw, "evb")
            hi_b = task.target_kwh if task.equality else inf
            add_row(
                [(col(("ev", nid, k), t), dt * eta_c) for t in range(w_len)],
                task.target_kwh,
                hi_b,
                "evt",
            )
        if prob.u_base is not None:
            for t in range(W):
                add_row([(col(("u", nid), t), 1.0)], 0.0, prob.u_max)
                add_row([(col(("e", nid), t), 1.0)], 0.0, inf)
                add_row(
                    [(col(("u", nid), t), 1.0), (col(("e", nid), t), -1.0)],
                    -inf, prob.u_base[t],
                )
                add_row(
                    [(col(("u", nid), t), -1.0), (col(("e", nid), t), -1.0)],
                    -inf, -prob.u_base[t],
                )
            for dd in range(W // spd):
                sl = range(dd * spd, (dd + 1) * spd)
                base_sum = float(prob.u_base[dd * spd:(dd + 1) * spd].sum())
                add_row([(col(("u", nid), t), 1.0) for t in sl], base_sum, base_sum,
                        "ubal")
                add_row(
                    [(col(("e", nid), t), 1.0) for t in sl],
                    -inf, 2.0 * prob.phi * base_sum, "ubud",
                )
        # Injection delta definition and cost hinge.
        for t in range(W):
            entries = [(col(("sp", nid), t), -1.0)]
            if unit is not None:
                entries += [
                    (col(("c", nid), t), 1.0),
                    (col(("d", nid), t), -1.0),
                ]
            if prob.u_base is not None:
                entries.append((col(("u", nid), t), 1.0))
            for k, task in enumerate(prob.ev_tasks):
                if task.lo <= t < task.hi:
                    entries.append((col(("ev", nid, k), t - task.lo), 1.0))
            add_row(entries, 0.0, 0.0, "spdef")

            add_row([(col(("y", nid), t), 1.0)], 0.0, inf, "yb")
            hinge = [(col(("y", nid), t), -1.0), (col(("sp", nid), t), 1.0)]
            if prob.split_ev_billing:
                for k, task in enumerate(prob.ev_tasks):
                    if task.lo <= t < task.hi:
                        hinge.append((col(("ev", nid, k), t - task.lo), -1.0))
            add_row(hinge, -inf, -prob.base_net[t], "hinge")

    # Voltage hinge rows: w >= v_hat - v_max and w >= v_min - v_hat.
    for (t, i), wcol in w_index.items():
        add_row([(wcol, 1.0)], 0.0, inf, "wb")
        entries = [(wcol, -1.0)]
        for k, nid in enumerate(ctrl):
            coef = Av[i, k]
            if coef != 0.0:
                entries.append((col(("sp", nid), t), coef))
        add_row(entries, -inf, window.v_max - v_const[t, i], "whi")
        entries2 = [(wcol, 1.0)]
        for k, nid in enumerate(ctrl):
            coef = Av[i, k]
            if coef != 0.0:
                entries2.append((col(("sp", nid), t), coef))
        add_row(entries2, window.v_min - v_const[t, i], inf, "wlo")

    # Transformer flow rows: zp/zq definitions plus polygonal magnitude cuts
    # h >= zp cos(theta) + zq sin(theta) - m_limit.
    angles = [2.0 * math.pi * j / n_cuts for j in range(n_cuts)]
    for t in range(W):
        for k in range(n_tr):
            if not h_needed[t, k]:
                continue
            zp_col = h_index[(t, k, "zp")]
            zq_col = h_index[(t, k, "zq")]
            h_col = h_index[(t, k, "h")]
            add_row([(h_col, 1.0)], 0.0, inf, "hb")
            ent_p = [(zp_col, -1.0)]
            ent_q = [(zq_col, -1.0)]
            for kk, nid in enumerate(ctrl):
                if Fv[k, kk] != 0.0:
                    ent_p.append((col(("sp", nid), t), Fv[k, kk]))
                if Gv[k, kk] != 0.0:
                    ent_q.append((col(("sp", nid), t), Gv[k, kk]))
            add_row(ent_p, -zp_const[t, k], -zp_const[t, k], "zp")
            add_row(ent_q, -zq_const[t, k], -zq_const[t, k], "zq")
            for th in angles:
                add_row(
                    [
                        (h_col, -1.0),
                        (zp_col, math.cos(th)),
                        (zq_col, math.sin(th)),
                    ],
                    -inf,
                    window.m_limit[k],
                    "cut",
                )

    # ------------------------------------------------------------------
    # Objective
    # ------------------------------------------------------------------
    q_vec = np.zeros(n)
    p_rows, p_cols, p_vals = [], [], []
    for nid in ctrl:
        prob = window.node_problems[nid]
        lo, hi = idx[("y", nid)]
        q_vec[lo:hi] = prob.prices
        if prob.split_ev_billing:
            for k, task in enumerate(prob.ev_tasks):
                lo, hi = idx[("ev", nid, k)]
                q_vec[lo:hi] += prob.ev_prices[task.lo:task.hi]
        if prob.u_base is not None:
            lo, hi = idx[("e", nid)]
            q_vec[lo:hi] += 1e-9  # removes the lift's free ray
        if lambda2 > 0:
            if prob.storage is not None:
                for t in range(W):
                    cc, dd = col(("c", nid), t), col(("d", nid), t)
                    p_rows += [cc, dd, cc, dd]
                    p_cols += [cc, dd, dd, cc]
                    p_vals += [2 * lambda2] * 4
            for k, task in enumerate(prob.ev_tasks):
                lo, hi = idx[("ev", nid, k)]
                for cc in range(lo, hi):
                    p_rows.append(cc)
                    p_cols.append(cc)
                    p_vals.append(2 * lambda2)
    for wcol in w_index.values():
        p_rows.append(wcol)
        p_cols.append(wcol)
        p_vals.append(2 * lambda3)
    for key, hcol in h_index.items():
        if key[2] == "h":
            p_rows.append(hcol)
            p_cols.append(hcol)
            p_vals.append(2 * lambda4)

    P = sp.csc_matrix((p_vals, (p_rows, p_cols)), shape=(n, n))
    A = sp.csc_matrix((vals, (rows, cols)), shape=(m, n))
    global _LAST_ROW_TAGS
    _LAST_ROW_TAGS = row_tags
    res = solve_qp(P, q_vec, A, np.array(lbs), np.array(ubs), eps_rel=0.0)
    if res.status != "solved":
        raise CentralError(
            f"window day {window.day}: QP did not converge "
            f"(primal {res.primal_residual:.2e}, dual {res.dual_residual:.2e})"
        )
    x = res.x

    # ------------------------------------------------------------------
    # Extraction
    # ------------------------------------------------------------------
    u_out, c_out, d_out = {}, {}, {}
    ev_out = {}
    s_delta = np.zeros((W, n_ctrl))
    energy_cost = 0.0
    wear = 0.0
    for nid in ctrl:
        prob = window.node_problems[nid]
        unit = prob.storage
        if unit is not None:
            lo, hi = idx[("c", nid)]
            c_out[nid] = np.clip(x[lo:hi], 0.0, unit.power_kw)
            lo, hi = idx[("d", nid)]
            d_out[nid] = np.clip(x[lo:hi], 0.0, unit.power_kw)
            wear += lambda2 * float(np.sum((c_out[nid] + d_out[nid]) ** 2))
        if prob.u_base is not None:
            lo, hi = idx[("u", nid)]
            u = np.clip(x[lo:hi], 0.0, prob.u_max)
            _repair_daily_balance(u, prob.u_base, spd)
            u_out[nid] = u
        for k, task in enumerate(prob.ev_tasks):
            lo, hi = idx[("ev", nid, k)]
            series = np.clip(x[lo:hi], 0.0, task.charger_kw)
            _repair_ev_target(series, task, dt, eta_c)
            ev_out[task.key] = (task, series)
            wear += lambda2 * float(np.sum(series ** 2))
        lo, hi = idx[("y", nid)]
        energy_cost += float(np.sum(prob.prices * x[lo:hi]))
        if prob.split_ev_billing:
            for k, task in enumerate(prob.ev_tasks):
                lo, hi = idx[("ev", nid, k)]
                energy_cost += float(np.sum(prob.ev_prices[task.lo:task.hi] * x[lo:hi]))
        lo, hi = idx[("sp", nid)]
        s_delta[:, ctrl_pos[nid]] = x[lo:hi]

    # Surrogate predictions consistent with the solution's injections.
    v_hat = v_const + s_delta @ Av.T
    zp_hat = zp_const + s_delta @ Fv.T
    zq_hat = zq_const + s_delta @ Gv.T
    tau_hat = zp_hat**2 + zq_hat**2
    l3 = float(
        np.sum(
            (
                np.maximum(v_hat - window.v_max, 0.0)
                + np.maximum(window.v_min - v_hat, 0.0)
            )
            ** 2
        )
    )
    l4 = float(np.sum(np.maximum(tau_hat - window.tau_max[None, :], 0.0) ** 2))
    breakdown = {
        "L1": energy_cost,
        "L2": wear / max(lambda2, 1e-30),
        "L3": l3,
        "L4": l4,
        "objective_qp": res.objective,
    }
    return CentralSolution(
        window=window,
        u=u_out,
        storage_c=c_out,
        storage_d=d_out,
        ev=ev_out,
        v_hat=v_hat,
        tau_hat=tau_hat,
        objective=res.objective,
        breakdown=breakdown,
        status=res.status,
        iterations=res.iterations,
    )


def run_central(
    scenario: Scenario,
    model,
    lambda2: float = LAMBDA2_DEFAULT,
    lambda3: float = LAMBDA34_DEFAULT,
    lambda4: float = LAMBDA34_DEFAULT,
    tighten: float = TIGHTEN_DEFAULT,
    window_days: int = 2,
    fallback_heuristic: bool = True,
) -> DispatchSchedule:
    """Receding-horizon centralized dispatch over the whole horizon.

    Windows advance one day at a time, committing the first day and
    carrying storage state and partial EV deliveries.  If a window solve
    fails and ``fallback_heuristic`` is set, that day's committed actions
    fall back to the local heuristic (flagged in the schedule).
    """
    cfg = scenario.cfg
    spd = cfg.steps_per_day
    dt = cfg.dt_hours
    eta_c = cfg.charge_efficiency
    schedule = DispatchSchedule(controller="central", T=scenario.T, dt_hours=dt)
    schedule.ev_c = [np.zeros(ev.end - ev.start) for ev in scenario.ev_events]
    storage_map = scenario.storage_by_node()
    for nid in storage_map:
        schedule.storage_c[nid] = np.zeros(scenario.T)
        schedule.storage_d[nid] = np.zeros(scenario.T)
    arrays = scenario.arrays()
    for nid in scenario.flexible:
        j = scenario.network.node_index[nid]
        schedule.u[nid] = arrays.u_base[:, j].copy()

    heuristic_fallback = None
    carry_q = {nid: unit.initial_kwh for nid, unit in storage_map.items()}
    delivered: dict[int, float] = {}
    fallback_days = []
    windows_meta = []
    day = 0
    n_days = cfg.horizon_days
    while day < n_days:
        window = build_window(scenario, day, carry_q, delivered, window_days, tighten)
        commit_days = (window.commit_hi - window.t_lo) // spd
        try:
            sol = solve_window(scenario, window, model, lambda2, lambda3, lambda4)
        except CentralError:
            if not fallback_heuristic:
                raise
            if heuristic_fallback is None:
                heuristic_fallback = run_heuristic(scenario)
            _commit_fallback(
                scenario, schedule, heuristic_fallback, window, carry_q, delivered
            )
            fallback_days.append(day)
            day += commit_days
            continue
        _commit_solution(scenario, schedule, sol, carry_q, delivered)
        windows_meta.append(
            {
                "day": day,
                "objective": sol.objective,
                "iterations": sol.iterations,
                "L3": sol.breakdown["L3"],
                "L4": sol.breakdown["L4"],
            }
        )
        day += commit_days
    schedule.flags["fallback_days"] = fallback_days
    schedule.flags["windows"] = windows_meta
    return schedule


def _commit_solution(scenario, schedule, sol, carry_q, delivered):
    cfg = scenario.cfg
    dt = cfg.dt_hours
    eta_c = cfg.charge_efficiency
    window = sol.window
    t_lo, t_commit = window.t_lo, window.commit_hi
    n_commit = t_commit - t_lo
    storage_map = scenario.storage_by_node()
    for nid, series in sol.u.items():
        schedule.u[nid][t_lo:t_commit] = series[:n_commit]
    for nid, series in sol.storage_c.items():
        schedule.storage_c[nid][t_lo:t_commit] = series[:n_commit]
        schedule.storage_d[nid][t_lo:t_commit] = sol.storage_d[nid][:n_commit]
        unit = storage_map[nid]
        from dataclasses import replace

        unit0 = replace(unit, initial_kwh=carry_q[nid])
        traj = storage_trajectory(
            unit0, series[:n_commit], sol.storage_d[nid][:n_commit], dt
        )
        carry_q[nid] = float(min(max(traj[-1], unit.q_min_kwh), unit.capacity_kwh))
    for key, (task, series) in sol.ev.items():
        ev = scenario.ev_events[key]
        g_lo = t_lo + task.lo
        g_hi = t_lo + task.hi
        commit_hi = min(g_hi, t_commit)
        if commit_hi <= g_lo:
            continue
        seg = series[: commit_hi - g_lo]
        schedule.ev_c[key][g_lo - ev.start: commit_hi - ev.start] = seg
        delivered[key] = delivered.get(key, 0.0) + float(seg.sum()) * dt * eta_c


def _commit_fallback(scenario, schedule, heuristic, window, carry_q, delivered):
    """Commit the heuristic's actions for the window's first day."""
    cfg = scenario.cfg
    dt = cfg.dt_hours
    eta_c = cfg.charge_efficiency
    t_lo, t_commit = window.t_lo, window.commit_hi
    storage_map = scenario.storage_by_node()
    for nid, series in heuristic.u.items():
        schedule.u[nid][t_lo:t_commit] = series[t_lo:t_commit]
    for nid in heuristic.storage_c:
        c = heuristic.storage_c[nid][t_lo:t_commit]
        d = heuristic.storage_d[nid][t_lo:t_commit]
        # Re-simulate from the carried state so SoC stays feasible even when
        # it differs from the heuristic's own trajectory.
        unit = storage_map[nid]
        q = carry_q[nid]
        c_fix = c.copy()
        d_fix = d.copy()
        for t in range(len(c)):
            max_c = min(unit.power_kw, (unit.capacity_kwh - q) / (eta_c * dt))
            c_fix[t] = min(c[t], max(max_c, 0.0))
            max_d = min(unit.power_kw, max(q - unit.q_min_kwh, 0.0) * eta_c / dt)
            d_fix[t] = min(d[t], max(max_d, 0.0))
            q = unit.leakage * q + dt * (eta_c * c_fix[t] - d_fix[t] / eta_c)
        schedule.storage_c[nid][t_lo:t_commit] = c_fix
        schedule.storage_d[nid][t_lo:t_commit] = d_fix
        carry_q[nid] = float(min(max(q, unit.q_min_kwh), unit.capacity_kwh))
    for key, ev in enumerate(scenario.ev_events):
        lo = max(ev.start, t_lo)
        hi = min(ev.end, t_commit)
        if hi <= lo:
            continue
        seg = heuristic.ev_c[key][lo - ev.start: hi - ev.start]
        # Cap by remaining need so carried deliveries stay consistent.
        rem = max(ev.energy_kwh - delivered.get(key, 0.0), 0.0)
        seg = np.minimum(seg, ev.charger_kw)
        total = float(seg.sum()) * dt * eta_c
        if total > rem > 0:
            seg = seg * (rem / total)
        elif rem == 0:
            seg = np.zeros_like(seg)
        schedule.ev_c[key][lo - ev.start: hi - ev.start] = seg
        delivered[key] = delivered.get(key, 0.0) + float(seg.sum()) * dt * eta_c
