"""Local DER controllers.

Two controllers that each operate every consumer node independently:

* ``run_heuristic`` is the myopic rule set used throughout the study.  It
  sees only current conditions plus the end of the active EV charging
  window, the tariff clock, and its own same-day thermal baseline.
* ``solve_local_foresight`` solves the per-node convex program (energy
  cost plus battery-wear penalty) over the full horizon with perfect
  knowledge of load, PV, prices, and EV windows.  The heuristic's output
  is a feasible point of that program, so the optimum never costs more.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dispatch import DispatchSchedule
from .qp import solve_qp
from .scenario import Scenario
from .tariffs import PEAK

LAMBDA2_DEFAULT = 0.001
EV_REMAINING_TOL_KWH = 1e-9


# ---------------------------------------------------------------------------
# Heuristic controller
# ---------------------------------------------------------------------------

def _peak_part_masks(tier_day: np.ndarray):
    peak = tier_day == PEAK
    if not peak.any():
        return peak, np.zeros_like(peak), np.zeros_like(peak)
    idx = np.where(peak)[0]
    start, end = idx[0], idx[-1] + 1
    part = tier_day == 1
    before = part & (np.arange(len(tier_day)) < start)
    after = part & (np.arange(len(tier_day)) >= end)
    return peak, before, after


def _plan_flexible_day(u_base_day, tier_day, phi, u_max, dt):
    """Day-ahead flexible plan: curtail peak (then the earlier part-peak
    band), repay each removal equally across the hour before and after."""
    u_plan = u_base_day.copy()
    if phi <= 0 or u_base_day.sum() <= 0:
        return u_plan, 0.0
    spd = len(u_base_day)
    budget = phi * float(u_base_day.sum()) * dt  # kWh of movable energy
    peak, before, after = _peak_part_masks(tier_day)
    removed = np.zeros(spd)

    def curtail(mask, budget_left):
        energy = float(u_plan[mask].sum()) * dt
        if energy <= 0 or budget_left <= 0:
            return budget_left
        take = min(energy, budget_left)
        factor = take / energy
        removed[mask] += u_plan[mask] * factor * dt
        u_plan[mask] *= 1.0 - factor
        return budget_left - take

    budget_left = curtail(peak, budget)
    # "Nearest" part-peak band: the one immediately before the peak window
    # (earliest-wins tie break).
    budget_left = curtail(before, budget_left)

    # Repay each removal equally across 1 hour before and after, truncated
    # and renormalized at the day boundary.
    steps_hour = int(round(1.0 / dt))
    for s in np.where(removed > 0)[0]:
        window = [w for w in range(s - steps_hour, s + steps_hour + 1)
                  if 0 <= w < spd and w != s]
        if not window:
            u_plan[s] += removed[s] / dt
            continue
        share = removed[s] / len(window)
        for w in window:
            u_plan[w] += share / dt

    # Respect the power cap: clip overflow, spread it into unsaturated
    # steps, and return any residual to the steps it was curtailed from
    # (un-removing that energy).  Daily energy is conserved throughout.
    over = np.maximum(u_plan - u_max, 0.0)
    if over.max() > 1e-12:
        excess_kwh = float(over.sum()) * dt
        u_plan = np.minimum(u_plan, u_max)
        room = np.maximum(u_max - u_plan, 0.0)
        room[removed > 0] = 0.0  # do not refill curtailed steps here
        total_room = float(room.sum()) * dt
        place = min(excess_kwh, total_room)
        if place > 0:
            u_plan += room * (place / total_room)
        excess_kwh -= place
        if excess_kwh > 1e-12 and removed.sum() > 0:
            give_back = removed * min(1.0, excess_kwh / removed.sum())
            u_plan += give_back / dt
            removed -= give_back
    moved = float(removed.sum())
    return u_plan, budget - moved  # remaining pull-forward budget (kWh)


def _cheapest_slots(prices, start, end, needed):
    """Indices of the ``needed`` cheapest slots in [start, end), earliest
    timestep winning ties."""
    sl = np.arange(start, end)
    order = np.lexsort((sl, prices[start:end]))
    return set(sl[order[:needed]].tolist())


def _storage_slots(prices, start, end, needed):
    # Ties broken toward the peak so the unit is full just prior to it.
    sl = np.arange(start, end)
    order = np.lexsort((-sl, prices[start:end]))
    return set(sl[order[:needed]].tolist())


@dataclass
class _EvState:
    event: object
    index: int
    remaining_kwh: float


def run_heuristic(scenario: Scenario) -> DispatchSchedule:
    """Apply the myopic local controller to every consumer node."""
    cfg = scenario.cfg
    dt = cfg.dt_hours
    spd = cfg.steps_per_day
    T = scenario.T
    arrays = scenario.arrays()
    net = scenario.network
    eta_c = cfg.charge_efficiency
    eta_d = eta_c

    schedule = DispatchSchedule(controller="local-heuristic", T=T, dt_hours=dt)
    schedule.ev_c = [np.zeros(ev.end - ev.start) for ev in scenario.ev_events]
    events_by_node: dict[str, list[_EvState]] = {}
    for i, ev in enumerate(scenario.ev_events):
        events_by_node.setdefault(ev.node, []).append(
            _EvState(event=ev, index=i, remaining_kwh=ev.energy_kwh)
        )
    storage_map = scenario.storage_by_node()

    for nid in net.consumer_nodes:
        j = net.node_index[nid]
        p = arrays.p_base[:, j]
        g = arrays.pv[:, j]
        u_base = arrays.u_base[:, j]
        spec = scenario.flexible.get(nid)
        phi = spec.phi if spec else 0.0
        u_max = spec.u_max_kw if spec else float("inf")
        prices = scenario.node_price_series(nid)
        ev_prices = scenario.ev_price_series(nid)
        tier = scenario.tariffs[nid].tier_series(T)
        unit = storage_map.get(nid)
        evs = sorted(events_by_node.get(nid, []), key=lambda s: (s.event.start, s.index))

        u = np.empty(T)
        c_s = np.zeros(T)
        d_s = np.zeros(T)
        q_s = unit.initial_kwh if unit else 0.0

        peak_mask = tier == PEAK
        peak_starts = np.where(peak_mask & ~np.roll(peak_mask, 1))[0]

        for day in range(cfg.horizon_days):
            lo, hi = day * spd, (day + 1) * spd
            u_day, pull_budget = _plan_flexible_day(
                u_base[lo:hi], tier[lo:hi], phi, u_max, dt
            )
            u[lo:hi] = u_day

            for t in range(lo, hi):
                active = [
                    s for s in evs
                    if s.event.start <= t < s.event.end
                    and s.remaining_kwh > EV_REMAINING_TOL_KWH
                ]
                ev_charge = {s.index: 0.0 for s in active}
                excess = g[t] - p[t] - u[t]
                if excess > 0:
                    # Priority: EV, flexible pull-forward, storage, export.
                    for s in active:
                        need_kw = min(
                            s.event.charger_kw, s.remaining_kwh / (eta_c * dt)
                        )
                        take = min(excess, need_kw)
                        if take > 0:
                            ev_charge[s.index] += take
                            excess -= take
                    if spec and pull_budget > 1e-12 and excess > 0:
                        future = [
                            w for w in range(t + 1, hi)
                            if peak_mask[w] and u[w] > 1e-12
                        ]
                        avail_kwh = sum(u[w] for w in future) * dt
                        pull_kwh = min(
                            excess * dt, (u_max - u[t]) * dt, pull_budget, avail_kwh
                        )
                        if pull_kwh > 1e-12:
                            u[t] += pull_kwh / dt
                            excess -= pull_kwh / dt
                            pull_budget -= pull_kwh
                            left = pull_kwh
                            for w in future:  # drain earliest peak steps first
                                take = min(u[w] * dt, left)
                                u[w] -= take / dt
                                left -= take
                                if left <= 1e-12:
                                    break
                    if unit and excess > 0:
                        headroom_kw = (unit.capacity_kwh - q_s) / (eta_c * dt)
                        take = min(excess, unit.power_kw, max(headroom_kw, 0.0))
                        if take > 0:
                            c_s[t] = take
                            excess -= take

                # Grid-side EV charging at the cheapest remaining slots.
                for s in active:
                    cap_kwh = eta_c * s.event.charger_kw * dt
                    needed = int(math.ceil(s.remaining_kwh / cap_kwh - 1e-12))
                    slots = _cheapest_slots(ev_prices, t, s.event.end, needed)
                    if t in slots:
                        want_kw = min(
                            s.event.charger_kw, s.remaining_kwh / (eta_c * dt)
                        )
                        add = max(0.0, want_kw - ev_charge[s.index])
                        ev_charge[s.index] += add

                # Storage: charge toward full just prior to the next peak.
                if unit and not peak_mask[t]:
                    nxt = peak_starts[peak_starts > t]
                    if nxt.size:
                        headroom = unit.capacity_kwh - q_s
                        cap_kwh = eta_c * unit.power_kw * dt
                        if headroom > 1e-9 and cap_kwh > 0:
                            needed = int(math.ceil(headroom / cap_kwh - 1e-12))
                            slots = _storage_slots(prices, t, int(nxt[0]), needed)
                            if t in slots:
                                want = min(unit.power_kw, headroom / (eta_c * dt))
                                c_s[t] = max(c_s[t], want)

                # Storage: discharge to cover net demand during the peak.
                if unit and peak_mask[t]:
                    ev_now = sum(ev_charge.values())
                    net_kw = p[t] + u[t] + ev_now + c_s[t] - g[t]
                    avail_kw = min(
                        unit.power_kw, max(q_s - unit.q_min_kwh, 0.0) * eta_d / dt
                    )
                    d_s[t] = max(0.0, min(net_kw, avail_kw))

                # Commit the step.
                for s in active:
                    kw = ev_charge[s.index]
                    if kw > 0:
                        schedule.ev_c[s.index][t - s.event.start] = kw
                        s.remaining_kwh -= eta_c * kw * dt
                if unit:
                    q_s = unit.leakage * q_s + dt * (eta_c * c_s[t] - d_s[t] / eta_d)
                    q_s = min(max(q_s, unit.q_min_kwh), unit.capacity_kwh)

        if spec:
            schedule.u[nid] = u
        if unit:
            schedule.storage_c[nid] = c_s
            schedule.storage_d[nid] = d_s

    return schedule


# ---------------------------------------------------------------------------
# Perfect-foresight per-node program
# ---------------------------------------------------------------------------

@dataclass
class EvTask:
    """One EV event's charging task clipped to a solve window.

    ``lo``/``hi`` are window-local step indices.  With ``equality`` the
    delivered battery-side energy must equal ``target_kwh`` (the event ends
    inside the window); otherwise the task is a prorated minimum-delivery
    floor for an event that continues past the window edge.
    """

    key: int  # global event index
    charger_kw: float
    lo: int
    hi: int
    target_kwh: float
    equality: bool


def window_ev_tasks(events, t_lo, t_hi, eta_c, dt, delivered=None) -> list[EvTask]:
    """Clip global events to [t_lo, t_hi), prorating targets at the edge."""
    delivered = delivered or {}
    tasks = []
    for key, ev in events:
        if ev.end <= t_lo or ev.start >= t_hi:
            continue
        done = delivered.get(key, 0.0)
        lo = max(ev.start, t_lo) - t_lo
        hi = min(ev.end, t_hi) - t_lo
        if ev.end <= t_hi:
            target = max(ev.energy_kwh - done, 0.0)
            equality = True
        else:
            frac = (t_hi - ev.start) / (ev.end - ev.start)
            target = max(ev.energy_kwh * frac - done, 0.0)
            equality = False
        cap = (hi - lo) * ev.charger_kw * eta_c * dt
        if target > cap + 1e-9:
            raise ForesightError(
                f"event {key}: window target {target:.3f} kWh exceeds capacity "
                f"{cap:.3f} kWh (1f infeasible)"
            )
        tasks.append(
            EvTask(key=key, charger_kw=ev.charger_kw, lo=lo, hi=hi,
                   target_kwh=min(target, cap), equality=equality)
        )
    return tasks


@dataclass
class NodeProblem:
    """Inputs of one node's foresight program over one solve window."""

    node: str
    base_net: np.ndarray  # p - pv (+ u_base when thermal is inflexible), kW
    u_base: np.ndarray | None  # thermal baseline when flexible, else None
    prices: np.ndarray
    ev_prices: np.ndarray
    split_ev_billing: bool
    ev_tasks: list[EvTask]
    storage: object | None
    q_init: float | None = None  # carried state; None -> unit initial
    phi: float = 0.0
    u_max: float = float("inf")


class ForesightError(RuntimeError):
    pass


def node_problem(
    scenario: Scenario,
    nid: str,
    t_lo: int = 0,
    t_hi: int | None = None,
    q_init: float | None = None,
    delivered: dict[int, float] | None = None,
) -> NodeProblem:
    """Build one node's program for [t_lo, t_hi) (defaults: full horizon)."""
    cfg = scenario.cfg
    t_hi = scenario.T if t_hi is None else t_hi
    arrays = scenario.arrays()
    j = scenario.network.node_index[nid]
    spec = scenario.flexible.get(nid)
    base = arrays.p_base[t_lo:t_hi, j] - arrays.pv[t_lo:t_hi, j]
    u_base = None
    phi, u_max = 0.0, float("inf")
    if spec and spec.phi > 0:
        u_base = arrays.u_base[t_lo:t_hi, j]
        phi, u_max = spec.phi, spec.u_max_kw
    else:
        base = base + arrays.u_base[t_lo:t_hi, j]
    events = [(i, ev) for i, ev in enumerate(scenario.ev_events) if ev.node == nid]
    tasks = window_ev_tasks(events, t_lo, t_hi, cfg.charge_efficiency, cfg.dt_hours,
                            delivered)
    return NodeProblem(
        node=nid,
        base_net=base,
        u_base=u_base,
        prices=scenario.node_price_series(nid)[t_lo:t_hi],
        ev_prices=scenario.ev_price_series(nid)[t_lo:t_hi],
        split_ev_billing=nid in scenario.ev_tou_nodes,
        ev_tasks=tasks,
        storage=scenario.storage_by_node().get(nid),
        q_init=q_init,
        phi=phi,
        u_max=u_max,
    )


def solve_local_foresight(
    prob: NodeProblem,
    dt: float,
    eta_c: float,
    spd: int,
    lambda2: float = LAMBDA2_DEFAULT,
):
    """Solve one node's convex program over its window to global optimality.

    Returns (u, c_s, d_s, {event key: charge series over the task window},
    objective).  The objective is on the optimization scale:
    sum_t mu(t) [net(t)]_+ (plus the EV-TOU energy term when billing is
    split) + lambda2 * sum (c + d)^2, without the dt factor.
    """
    T = len(prob.base_net)
    eta_d = eta_c
    unit = prob.storage
    has_storage = unit is not None
    has_flex = prob.u_base is not None
    if not has_storage and not has_flex and not prob.ev_tasks:
        cost = float(np.sum(prob.prices * np.maximum(prob.base_net, 0.0)))
        return None, None, None, {}, cost

    idx: dict[str, tuple[int, int]] = {}
    n = 0

    def alloc(name, count):
        nonlocal n
        idx[name] = (n, n + count)
        n += count

    if has_storage:
        alloc("c", T)
        alloc("d", T)
        alloc("Q", T)
    for k, task in enumerate(prob.ev_tasks):
        alloc(f"ev{k}", task.hi - task.lo)
    if has_flex:
        alloc("u", T)
        alloc("e", T)
    alloc("y", T)

    def col(name, t=0):
        return idx[name][0] + t

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    lbs: list[float] = []
    ubs: list[float] = []
    m = 0

    def add_row(entries, lo, hi):
        nonlocal m
        for cc, vv in entries:
            rows.append(m)
            cols.append(cc)
            vals.append(vv)
        lbs.append(lo)
        ubs.append(hi)
        m += 1

    inf = float("inf")
    if has_storage:
        for t in range(T):
            add_row([(col("c", t), 1.0)], 0.0, unit.power_kw)
            add_row([(col("d", t), 1.0)], 0.0, unit.power_kw)
            add_row([(col("Q", t), 1.0)], unit.q_min_kwh, unit.capacity_kwh)
        # Dynamics: Q_t - leak*Q_{t-1} - dt*eta_c*c_t + dt/eta_d*d_t = const
        q0 = unit.initial_kwh if prob.q_init is None else prob.q_init
        for t in range(T):
            entries = [
                (col("Q", t), 1.0),
                (col("c", t), -dt * eta_c),
                (col("d", t), dt / eta_d),
            ]
            if t == 0:
                rhs = unit.leakage * q0
            else:
                entries.append((col("Q", t - 1), -unit.leakage))
                rhs = 0.0
            add_row(entries, rhs, rhs)
    for k, task in enumerate(prob.ev_tasks):
        w = task.hi - task.lo
        for t in range(w):
            add_row([(col(f"ev{k}", t), 1.0)], 0.0, task.charger_kw)
        lo_b = task.target_kwh
        hi_b = task.target_kwh if task.equality else inf
        add_row(
            [(col(f"ev{k}", t), dt * eta_c) for t in range(w)], lo_b, hi_b
        )
    if has_flex:
        for t in range(T):
            add_row([(col("u", t), 1.0)], 0.0, prob.u_max)
            add_row([(col("e", t), 1.0)], 0.0, inf)
            # e >= |u - u_base| lifted as two one-sided rows.
            add_row([(col("u", t), 1.0), (col("e", t), -1.0)], -inf, prob.u_base[t])
            add_row([(col("u", t), -1.0), (col("e", t), -1.0)], -inf, -prob.u_base[t])
        n_days = T // spd
        for day in range(n_days):
            sl = range(day * spd, (day + 1) * spd)
            base_sum = float(prob.u_base[day * spd:(day + 1) * spd].sum())
            add_row([(col("u", t), 1.0) for t in sl], base_sum, base_sum)
            add_row([(col("e", t), 1.0) for t in sl], -inf, 2.0 * prob.phi * base_sum)
    for t in range(T):
        add_row([(col("y", t), 1.0)], 0.0, inf)
        entries = [(col("y", t), -1.0)]
        if has_storage:
            entries += [(col("c", t), 1.0), (col("d", t), -1.0)]
        if has_flex:
            entries.append((col("u", t), 1.0))
        if not prob.split_ev_billing:
            for k, task in enumerate(prob.ev_tasks):
                if task.lo <= t < task.hi:
                    entries.append((col(f"ev{k}", t - task.lo), 1.0))
        add_row(entries, -inf, -prob.base_net[t])

    q_vec = np.zeros(n)
    q_vec[idx["y"][0]:idx["y"][1]] = prob.prices
    if prob.split_ev_billing:
        for k, task in enumerate(prob.ev_tasks):
            lo, hi = idx[f"ev{k}"]
            q_vec[lo:hi] += prob.ev_prices[task.lo:task.hi]
    if has_flex:
        # Tiny cost on the |u - u_base| lift removes its free ray (the lift
        # is otherwise unconstrained above when the budget row is slack),
        # which stalls the dual iteration; far below price scale.
        lo, hi = idx["e"]
        q_vec[lo:hi] += 1e-9

    p_rows, p_cols, p_vals = [], [], []
    if lambda2 > 0:
        if has_storage:
            for t in range(T):
                cc, dd = col("c", t), col("d", t)
                p_rows += [cc, dd, cc, dd]
                p_cols += [cc, dd, dd, cc]
                p_vals += [2 * lambda2] * 4
        for k, task in enumerate(prob.ev_tasks):
            lo, hi = idx[f"ev{k}"]
            for cc in range(lo, hi):
                p_rows.append(cc)
                p_cols.append(cc)
                p_vals.append(2 * lambda2)
    P = sp.csc_matrix((p_vals, (p_rows, p_cols)), shape=(n, n))
    A = sp.csc_matrix((vals, (rows, cols)), shape=(m, n))
    # Absolute tolerance only: audit limits are absolute (kWh-scale), so a
    # relative term would let violations grow with problem scale.
    res = solve_qp(P, q_vec, A, np.array(lbs), np.array(ubs), eps_rel=0.0)
    if res.status != "solved":
        raise ForesightError(
            f"node {prob.node}: foresight QP did not converge "
            f"(primal {res.primal_residual:.2e}, dual {res.dual_residual:.2e})"
        )

    x = res.x

    def take(name):
        lo, hi = idx[name]
        return x[lo:hi].copy()

    c_s = d_s = None
    if has_storage:
        c_s = np.clip(take("c"), 0.0, unit.power_kw)
        d_s = np.clip(take("d"), 0.0, unit.power_kw)
    u = None
    if has_flex:
        u = np.clip(take("u"), 0.0, prob.u_max)
        _repair_daily_balance(u, prob.u_base, spd)
    ev_sched = {}
    for k, task in enumerate(prob.ev_tasks):
        series = np.clip(take(f"ev{k}"), 0.0, task.charger_kw)
        _repair_ev_target(series, task, dt, eta_c)
        ev_sched[task.key] = (task, series)
    return u, c_s, d_s, ev_sched, res.objective


def _repair_daily_balance(u, u_base, spd):
    """Zero each day's energy mismatch by shrinking deviations toward the
    baseline (never increases the deviation budget)."""
    T = len(u)
    for lo in range(0, T - spd + 1, spd):
        sl = slice(lo, lo + spd)
        excess = u[sl] - u_base[sl]
        diff = float(excess.sum())
        if abs(diff) < 1e-15:
            continue
        if diff > 0:
            pos = np.maximum(excess, 0.0)
            total = float(pos.sum())
            if total > 0:
                u[sl] -= pos * min(1.0, diff / total)
        else:
            neg = np.maximum(-excess, 0.0)
            total = float(neg.sum())
            if total > 0:
                u[sl] += neg * min(1.0, -diff / total)


def _repair_ev_target(series, task, dt, eta_c):
    """Nudge a near-feasible charge series onto its exact delivery target."""
    delivered = float(series.sum()) * dt * eta_c
    deficit = task.target_kwh - delivered
    if task.equality:
        if abs(deficit) < 1e-12:
            return
    elif deficit <= 0:
        return
    if deficit > 0:
        room = task.charger_kw - series
        total = float(room.sum()) * dt * eta_c
        if total <= 0:
            return
        series += room * min(1.0, deficit / total)
    else:
        have = series.copy()
        total = float(have.sum()) * dt * eta_c
        if total <= 0:
            return
        series -= have * min(1.0, -deficit / total)


def run_foresight(
    scenario: Scenario,
    lambda2: float = LAMBDA2_DEFAULT,
    window_days: int | None = 2,
) -> DispatchSchedule:
    """Perfect-foresight optimization, node by node.

    With ``window_days`` set (default 2), each node is optimized over
    overlapping windows committing the first day and carrying storage state
    and partial EV deliveries forward; ``None`` solves one program over the
    whole horizon.
    """
    cfg = scenario.cfg
    spd = cfg.steps_per_day
    dt = cfg.dt_hours
    eta_c = cfg.charge_efficiency
    schedule = DispatchSchedule(
        controller="local-foresight", T=scenario.T, dt_hours=dt
    )
    schedule.ev_c = [np.zeros(ev.end - ev.start) for ev in scenario.ev_events]
    storage_map = scenario.storage_by_node()

    events_by_node: dict[str, bool] = {}
    for ev in scenario.ev_events:
        events_by_node[ev.node] = True

    for nid in scenario.network.consumer_nodes:
        unit = storage_map.get(nid)
        spec = scenario.flexible.get(nid)
        if unit is None and not events_by_node.get(nid) and not (
            spec and spec.phi > 0
        ):
            continue  # nothing to control at this node
        q_state = unit.initial_kwh if unit else None
        delivered: dict[int, float] = {}
        n_days = cfg.horizon_days
        win = n_days if window_days is None else min(window_days, n_days)
        day = 0
        while day < n_days:
            t_lo = day * spd
            t_hi = min((day + win) * spd, scenario.T)
            commit_days = (t_hi // spd - day) if t_hi >= scenario.T else 1
            t_commit = min(t_lo + commit_days * spd, t_hi)
            prob = node_problem(scenario, nid, t_lo, t_hi, q_state, delivered)
            u, c_s, d_s, ev_sched, _ = solve_local_foresight(
                prob, dt, eta_c, spd, lambda2
            )
            if u is None and c_s is None and not ev_sched:
                day += commit_days
                continue  # idle window (no active tasks, no storage/flex)
            n_commit = t_commit - t_lo
            if u is not None:
                schedule.u.setdefault(nid, np.zeros(scenario.T))[
                    t_lo:t_commit] = u[:n_commit]
            if c_s is not None:
                schedule.storage_c.setdefault(nid, np.zeros(scenario.T))[
                    t_lo:t_commit] = c_s[:n_commit]
                schedule.storage_d.setdefault(nid, np.zeros(scenario.T))[
                    t_lo:t_commit] = d_s[:n_commit]
                from .dispatch import storage_trajectory

                traj = storage_trajectory(
                    _unit_with_initial(unit, q_state), c_s[:n_commit],
                    d_s[:n_commit], dt,
                )
                q_state = float(
                    min(max(traj[-1], unit.q_min_kwh), unit.capacity_kwh)
                )
            for key, (task, series) in ev_sched.items():
                g_lo = t_lo + task.lo
                g_hi = t_lo + task.hi
                ev = scenario.ev_events[key]
                commit_hi = min(g_hi, t_commit)
                if commit_hi <= g_lo:
                    continue
                seg = series[: commit_hi - g_lo]
                schedule.ev_c[key][g_lo - ev.start: commit_hi - ev.start] = seg
                delivered[key] = delivered.get(key, 0.0) + float(
                    seg.sum()) * dt * eta_c
            day += commit_days
    return schedule


def _unit_with_initial(unit, q_init):
    if q_init is None or q_init == unit.initial_kwh:
        return unit
    from dataclasses import replace

    return replace(unit, initial_kwh=q_init)
