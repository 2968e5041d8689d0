"""Reliability metrics, electricity cost, peak load, and statistics.

Violation rules: a node violates when its voltage leaves the +/-5% band in
any single 15-minute step (strict inequality); a transformer violates when
its apparent power averaged over any sliding 2-hour window exceeds 120% of
its rating (strict).  Values exactly at a limit are compliant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VOLTAGE_BAND = 0.05  # +/- fraction of nominal (1.0 pu)
TRANSFORMER_OVERLOAD = 1.2  # fraction of rated capacity
OVERLOAD_WINDOW_STEPS = 8  # 2 h at 15 min


class MetricsError(ValueError):
    pass


@dataclass
class ViolationRecord:
    element: str
    violated: bool
    magnitude: np.ndarray  # % deviation (voltage) or % of rating (transformer)
    first_violation: int | None


@dataclass
class ScenarioMetrics:
    scenario_index: int
    seed: int
    pct_transformers_violated: float
    pct_nodes_violated: float
    total_cost: float
    peak_kw: float
    node_records: list[ViolationRecord] = field(default_factory=list)
    transformer_records: list[ViolationRecord] = field(default_factory=list)
    cost_by_node: dict[str, float] = field(default_factory=dict)


def voltage_violation(series: np.ndarray, element: str = "") -> ViolationRecord:
    """Per-node voltage check: any step outside the +/-5% band violates."""
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise MetricsError(f"node {element}: empty voltage series")
    deviation = np.abs(series - 1.0)
    magnitude = 100.0 * deviation
    mask = deviation > VOLTAGE_BAND
    first = int(np.argmax(mask)) if mask.any() else None
    return ViolationRecord(element, bool(mask.any()), magnitude, first)


def transformer_violation(
    series_kva: np.ndarray, rating_kva: float, element: str = ""
) -> ViolationRecord:
    """Per-transformer check: any sliding 2-hour mean above 120% violates."""
    series = np.asarray(series_kva, dtype=float)
    if series.size < OVERLOAD_WINDOW_STEPS:
        raise MetricsError(
            f"transformer {element}: series shorter than one 2-hour window"
        )
    if rating_kva <= 0:
        raise MetricsError(f"transformer {element}: nonpositive rating")
    csum = np.concatenate([[0.0], np.cumsum(series)])
    window_means = (
        csum[OVERLOAD_WINDOW_STEPS:] - csum[:-OVERLOAD_WINDOW_STEPS]
    ) / OVERLOAD_WINDOW_STEPS
    mask = window_means > TRANSFORMER_OVERLOAD * rating_kva
    first = int(np.argmax(mask)) if mask.any() else None
    magnitude = 100.0 * series / rating_kva
    return ViolationRecord(element, bool(mask.any()), magnitude, first)


def scenario_cost(scenario, schedule) -> tuple[dict[str, float], float]:
    """Electricity cost per node and total, in dollars.

    Net consumption is billed at the node's class tariff with no export
    compensation; EV-TOU nodes are billed their EV charging energy at EV
    rates, separately from the rest of the site.
    """
    dt = scenario.dt_hours
    arrays = scenario.arrays()
    net = scenario.network
    ev_total = schedule.ev_total(scenario)
    u_total = schedule.u_total(scenario)
    costs: dict[str, float] = {}
    for nid in net.consumer_nodes:
        j = net.node_index[nid]
        prices = scenario.node_price_series(nid)
        site = arrays.p_base[:, j] + u_total[:, j] - arrays.pv[:, j]
        if nid in schedule.storage_c:
            site = site + schedule.storage_c[nid] - schedule.storage_d[nid]
        ev = ev_total[:, j]
        if nid in scenario.ev_tou_nodes:
            ev_prices = scenario.ev_tariff.price_series(scenario.T)
            cost = float(np.sum(prices * np.maximum(site, 0.0)) * dt)
            cost += float(np.sum(ev_prices * ev) * dt)
        else:
            cost = float(np.sum(prices * np.maximum(site + ev, 0.0)) * dt)
        costs[nid] = cost
    return costs, float(sum(costs.values()))


def dispatch_objective(scenario, schedule, lambda2: float = 0.001) -> float:
    """The optimization-scale objective both local controllers target:
    sum_t mu [net]_+ (with split EV-TOU billing) + lambda2 sum (c+d)^2."""
    arrays = scenario.arrays()
    net = scenario.network
    ev_total = schedule.ev_total(scenario)
    u_total = schedule.u_total(scenario)
    total = 0.0
    for nid in net.consumer_nodes:
        j = net.node_index[nid]
        prices = scenario.node_price_series(nid)
        site = arrays.p_base[:, j] + u_total[:, j] - arrays.pv[:, j]
        c = schedule.storage_c.get(nid)
        if c is not None:
            site = site + c - schedule.storage_d[nid]
            total += lambda2 * float(np.sum((c + schedule.storage_d[nid]) ** 2))
        ev = ev_total[:, j]
        if nid in scenario.ev_tou_nodes:
            ev_prices = scenario.ev_tariff.price_series(scenario.T)
            total += float(np.sum(prices * np.maximum(site, 0.0)))
            total += float(np.sum(ev_prices * ev))
        else:
            total += float(np.sum(prices * np.maximum(site + ev, 0.0)))
    for ev_series in schedule.ev_c:
        total += lambda2 * float(np.sum(np.asarray(ev_series) ** 2))
    return total


def peak_load(schedule, scenario) -> float:
    """Maximum total network real consumption over the horizon (kW)."""
    p, _ = schedule.net_consumption(scenario)
    if p.shape[0] == 0:
        raise MetricsError("empty horizon")
    return float(p.sum(axis=1).max())


def evaluate_scenario(scenario, schedule, pf_series) -> ScenarioMetrics:
    """Bundle violations, cost, and peak load for one completed run."""
    net = scenario.network
    node_records = [
        voltage_violation(pf_series.v[:, j], nid)
        for j, nid in enumerate(net.node_ids)
    ]
    tr_records = [
        transformer_violation(pf_series.transformer_kva[:, k], tr.rated_kva, tr.id)
        for k, tr in enumerate(net.transformers)
    ]
    costs, total_cost = scenario_cost(scenario, schedule)
    n_tr = len(tr_records)
    n_nodes = len(node_records)
    return ScenarioMetrics(
        scenario_index=scenario.scenario_index,
        seed=scenario.seed,
        pct_transformers_violated=100.0 * sum(r.violated for r in tr_records) / n_tr,
        pct_nodes_violated=100.0 * sum(r.violated for r in node_records) / n_nodes,
        total_cost=total_cost,
        peak_kw=peak_load(schedule, scenario),
        node_records=node_records,
        transformer_records=tr_records,
        cost_by_node=costs,
    )


def exceedance_histogram(magnitudes: np.ndarray, bin_edges: np.ndarray):
    """Complementary CDF of violation magnitudes over element-timesteps.

    Returns (bin_edges, ccdf) where ccdf[i] = P(magnitude > bin_edges[i]).
    """
    magnitudes = np.asarray(magnitudes, dtype=float).ravel()
    if magnitudes.size == 0:
        raise MetricsError("no magnitudes to histogram")
    edges = np.asarray(bin_edges, dtype=float)
    ccdf = np.array([(magnitudes > e).mean() for e in edges])
    return edges, ccdf


def mean_violating_magnitude(magnitudes: np.ndarray, threshold: float) -> float:
    """Mean magnitude over element-timesteps strictly above the threshold."""
    magnitudes = np.asarray(magnitudes, dtype=float).ravel()
    mask = magnitudes > threshold
    return float(magnitudes[mask].mean()) if mask.any() else float("nan")


def aggregate(per_network_values: dict[str, list[float]]) -> dict:
    """Two-level statistics: per-network mean/std over scenarios, then the
    cross-network mean of means and sqrt of the average of the variances."""
    per_network = {}
    variances = []
    means = []
    for name, values in per_network_values.items():
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            raise MetricsError(f"network {name}: no scenarios")
        mean = float(arr.mean())
        std = float(arr.std(ddof=1)) if arr.size > 1 else None
        per_network[name] = {"mean": mean, "std": std, "n": int(arr.size)}
        means.append(mean)
        if std is not None:
            variances.append(std * std)
    cross = {
        "mean": float(np.mean(means)),
        "std": float(np.sqrt(np.mean(variances))) if variances else None,
        "n_networks": len(means),
    }
    return {"per_network": per_network, "cross_network": cross}
