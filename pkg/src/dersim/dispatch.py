"""Dispatch schedules produced by controllers, plus the constraint audit.

A schedule stores per-node flexible consumption and storage actions over
the horizon and per-event EV charging aligned with the scenario's event
list.  ``audit`` re-checks every device constraint from the raw arrays,
independent of how a controller produced them.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

AUDIT_ENERGY_TOL_KWH = 1e-6
AUDIT_REL_TOL = 1e-6
AUDIT_POWER_TOL_KW = 1e-5


@dataclass
class DispatchSchedule:
    controller: str
    T: int
    dt_hours: float
    u: dict[str, np.ndarray] = field(default_factory=dict)  # kW, flex nodes only
    storage_c: dict[str, np.ndarray] = field(default_factory=dict)
    storage_d: dict[str, np.ndarray] = field(default_factory=dict)
    ev_c: list[np.ndarray] = field(default_factory=list)  # per event, window-aligned
    flags: dict = field(default_factory=dict)

    def ev_total(self, scenario) -> np.ndarray:
        """(T, N) EV charging power by node."""
        net = scenario.network
        out = np.zeros((self.T, net.n_nodes))
        for ev, series in zip(scenario.ev_events, self.ev_c):
            out[ev.start:ev.end, net.node_index[ev.node]] += series
        return out

    def u_total(self, scenario) -> np.ndarray:
        arrays = scenario.arrays()
        out = arrays.u_base.copy()
        net = scenario.network
        for nid, series in self.u.items():
            out[:, net.node_index[nid]] = series
        return out

    def net_consumption(self, scenario) -> tuple[np.ndarray, np.ndarray]:
        """(P, Q) injection series for the power-flow module (consumption +)."""
        arrays = scenario.arrays()
        net = scenario.network
        p = arrays.p_base + self.u_total(scenario) + self.ev_total(scenario) - arrays.pv
        for nid, series in self.storage_c.items():
            p[:, net.node_index[nid]] += series
        for nid, series in self.storage_d.items():
            p[:, net.node_index[nid]] -= series
        return p, arrays.q.copy()

    def node_net(self, scenario, nid: str) -> np.ndarray:
        """Net consumption series of one node (kW)."""
        arrays = scenario.arrays()
        j = scenario.network.node_index[nid]
        p = arrays.p_base[:, j] + arrays.u_base[:, j].copy()
        if nid in self.u:
            p = arrays.p_base[:, j] + self.u[nid]
        p = p - arrays.pv[:, j]
        if nid in self.storage_c:
            p = p + self.storage_c[nid] - self.storage_d[nid]
        for ev, series in zip(scenario.ev_events, self.ev_c):
            if ev.node == nid:
                p[ev.start:ev.end] += series
        return p

    def audit_text(self, scenario, nid: str) -> str:
        """Delimited per-node audit log (t, c, d, u, Q) for test oracles."""
        arrays = scenario.arrays()
        j = scenario.network.node_index[nid]
        c = self.storage_c.get(nid, np.zeros(self.T))
        d = self.storage_d.get(nid, np.zeros(self.T))
        u = self.u.get(nid, arrays.u_base[:, j])
        unit = scenario.storage_by_node().get(nid)
        q_series = storage_trajectory(unit, c, d, self.dt_hours) if unit else np.zeros(self.T)
        buf = io.StringIO()
        buf.write("t\tc_kw\td_kw\tu_kw\tq_kwh\n")
        for t in range(self.T):
            buf.write(f"{t}\t{c[t]:.6f}\t{d[t]:.6f}\t{u[t]:.6f}\t{q_series[t]:.6f}\n")
        return buf.getvalue()


def storage_trajectory(unit, c: np.ndarray, d: np.ndarray, dt_hours: float) -> np.ndarray:
    """State of charge implied by a charge/discharge schedule."""
    T = len(c)
    q = np.empty(T)
    prev = unit.initial_kwh
    for t in range(T):
        prev = unit.leakage * prev + dt_hours * (unit.eta_c * c[t] - d[t] / unit.eta_d)
        q[t] = prev
    return q


def audit(scenario, schedule: DispatchSchedule) -> dict:
    """Re-check device constraints (1b)-(1h) on a committed schedule.

    Returns a report dict with ``ok`` plus the worst violation per check;
    all checks recompute state from the schedule arrays alone.
    """
    cfg = scenario.cfg
    dt = cfg.dt_hours
    arrays = scenario.arrays()
    net = scenario.network
    spd = cfg.steps_per_day
    report = {
        "ok": True,
        "power_bounds_kw": 0.0,
        "soc_bounds_kwh": 0.0,
        "ev_terminal_kwh": 0.0,
        "daily_balance_rel": 0.0,
        "deviation_budget_kwh": 0.0,
        "u_bounds_kw": 0.0,
    }

    def worst(key, value):
        report[key] = max(report[key], float(value))

    for unit in scenario.storage:
        c = schedule.storage_c.get(unit.node, np.zeros(schedule.T))
        d = schedule.storage_d.get(unit.node, np.zeros(schedule.T))
        worst("power_bounds_kw", np.max(np.maximum(-c, 0)))
        worst("power_bounds_kw", np.max(np.maximum(c - unit.power_kw, 0)))
        worst("power_bounds_kw", np.max(np.maximum(-d, 0)))
        worst("power_bounds_kw", np.max(np.maximum(d - unit.power_kw, 0)))
        q = storage_trajectory(unit, c, d, dt)
        worst("soc_bounds_kwh", np.max(np.maximum(q - unit.capacity_kwh, 0)))
        worst("soc_bounds_kwh", np.max(np.maximum(unit.q_min_kwh - q, 0)))

    for ev, series in zip(scenario.ev_events, schedule.ev_c):
        worst("power_bounds_kw", np.max(np.maximum(-series, 0), initial=0.0))
        worst("power_bounds_kw", np.max(np.maximum(series - ev.charger_kw, 0), initial=0.0))
        delivered = float(series.sum()) * dt * cfg.charge_efficiency
        worst("ev_terminal_kwh", abs(delivered - ev.energy_kwh))

    for nid, spec in scenario.flexible.items():
        j = net.node_index[nid]
        u = schedule.u.get(nid, arrays.u_base[:, j])
        ub = arrays.u_base[:, j]
        worst("u_bounds_kw", np.max(np.maximum(-u, 0)))
        worst("u_bounds_kw", np.max(np.maximum(u - spec.u_max_kw, 0)))
        n_days = schedule.T // spd
        for day in range(n_days):
            sl = slice(day * spd, (day + 1) * spd)
            base_kwh = float(ub[sl].sum()) * dt
            if base_kwh <= 0:
                continue
            bal = abs(float(u[sl].sum()) * dt - base_kwh) / base_kwh
            worst("daily_balance_rel", bal)
            dev = 0.5 * float(np.abs(u[sl] - ub[sl]).sum()) * dt
            worst("deviation_budget_kwh", max(0.0, dev - spec.phi * base_kwh))

    report["ok"] = (
        report["power_bounds_kw"] <= AUDIT_POWER_TOL_KW
        and report["soc_bounds_kwh"] <= 1e-4
        and report["ev_terminal_kwh"] <= AUDIT_ENERGY_TOL_KWH
        and report["daily_balance_rel"] <= AUDIT_REL_TOL
        and report["deviation_budget_kwh"] <= 1e-6
        and report["u_bounds_kw"] <= AUDIT_POWER_TOL_KW
    )
    return report
