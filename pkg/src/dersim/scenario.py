"""Randomized, seed-reproducible network use scenarios.

A scenario materializes one simulation horizon for a feeder: baseline and
electrified load profiles, PV placement and sizing, storage fleet, EV
charging events, flexible-load fractions, and tariff assignment.  All
randomness flows from a single seed; identical (config, seed) pairs yield
bitwise-identical scenarios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .network import NetworkModel
from .tariffs import Tariff, build_tariff, most_frequent_peak_step


class ScenarioError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Profile library
# ---------------------------------------------------------------------------

LIBRARY_KINDS = ("residential", "commercial", "space_heating", "water_heating", "pv_shape")


@dataclass
class LibraryProfile:
    name: str
    kind: str
    series: np.ndarray  # kW (loads / thermal) or normalized (pv_shape)
    step_minutes: int = 15

    def tiled(self, T: int) -> np.ndarray:
        return np.resize(self.series, T)

    def avg_daily_peak(self, steps_per_day: int = 96) -> float:
        n_days = max(1, len(self.series) // steps_per_day)
        days = self.series[: n_days * steps_per_day].reshape(n_days, steps_per_day)
        return float(days.max(axis=1).mean())


class ProfileLibrary:
    """Directory of delimited-text time series, bucketed by kind."""

    def __init__(self, profiles: list[LibraryProfile]):
        self.profiles = sorted(profiles, key=lambda p: p.name)
        self.by_kind: dict[str, list[LibraryProfile]] = {k: [] for k in LIBRARY_KINDS}
        for p in self.profiles:
            if p.kind not in self.by_kind:
                raise ScenarioError(f"library profile {p.name}: unknown kind {p.kind}")
            self.by_kind[p.kind].append(p)

    @classmethod
    def from_dir(cls, path: str | Path) -> "ProfileLibrary":
        path = Path(path)
        profiles = []
        for f in sorted(path.glob("*.csv")):
            kind = None
            step_minutes = 15
            values = []
            for line in f.read_text().splitlines():
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line.lstrip("# ").partition(":")
                    if key.strip() == "kind":
                        kind = val.strip()
                    elif key.strip() == "step_minutes":
                        step_minutes = int(val)
                    continue
                values.append(float(line))
            if kind is None:
                raise ScenarioError(f"library file {f.name}: missing '# kind:' header")
            profiles.append(LibraryProfile(f.stem, kind, np.asarray(values), step_minutes))
        if not profiles:
            raise ScenarioError(f"no library profiles found in {path}")
        return cls(profiles)

    def pv_shape(self) -> LibraryProfile:
        shapes = self.by_kind["pv_shape"]
        if not shapes:
            raise ScenarioError("library has no pv_shape profile")
        return shapes[0]


def bundled_library() -> ProfileLibrary:
    import importlib.resources as ir

    return ProfileLibrary.from_dir(ir.files("dersim") / "data" / "library")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def default_tariff_book() -> dict:
    # Artifact defaults (not utility-published values): three-tier TOU
    # books per consumer class plus an EV book with a deeper off-peak.
    return {
        "residential": {"off": 0.030, "part": 0.060, "peak": 0.125},
        "commercial": {"off": 0.028, "part": 0.055, "peak": 0.110},
        "ev": {"off": 0.022, "part": 0.055, "peak": 0.125},
    }


@dataclass
class ScenarioConfig:
    """Everything the scenario generator needs for one simulated year."""

    horizon_days: int = 14
    step_minutes: int = 15
    start_date: str = "2018-01-01"
    year: int = 2050

    # Penetration targets, as fractions of horizon energies.
    ev_energy_fraction: float = 0.12
    pv_energy_fraction: float = 0.25
    thermal_energy_fraction: float = 0.10
    uplift_residential_pct: float = 10.0
    uplift_commercial_pct: float = 25.0
    appliance_efficiency: float = 3.0
    household_peak_kw: float = 5.0  # one appliance slot per household-equivalent

    # Flexible thermal load.
    flexible_case: str = "none"  # "none" | "enhanced"
    phi: float = 0.5  # used when flexible_case == "enhanced"
    u_max_multiple: float = 3.0

    # EV charging event sampler.
    charger_power_kw: float = 6.3
    ev_home_share: float = 0.7
    ev_energy_mean_kwh: float = 15.0
    ev_energy_sigma: float = 0.45
    ev_event_probability: float = 0.85
    home_arrival: tuple = (18.0, 1.5)
    home_departure: tuple = (7.25, 1.0)
    work_arrival: tuple = (8.5, 1.0)
    work_departure: tuple = (17.0, 1.0)
    residential_cap_kw_per_charger: float = 12.2

    # Storage fleet.
    storage_spread_pct: float = 70.0
    storage_sizing: tuple = (0.40, 0.80)
    storage_c_rate: float = 0.5
    storage_round_trip: float = 0.86
    storage_leakage: float = 1.0
    storage_initial_soc: float = 0.5
    # When set, total fleet capacity is rescaled to what this reference
    # spread would have produced for the same seed (spread experiment).
    storage_reference_spread_pct: float | None = None

    pv_sizing: tuple = (0.40, 0.90)
    power_factor_range: tuple = (0.90, 0.95)
    baseline_match_tolerance: float = 0.10
    baseline_fallback_nearest: bool = False

    tariff_book: dict = field(default_factory=default_tariff_book)
    ev_tou_share: float = 0.40
    peak_window_hours: float = 4.0
    part_peak_hours: float = 2.0

    @property
    def steps_per_day(self) -> int:
        return int(round(24 * 60 / self.step_minutes))

    @property
    def T(self) -> int:
        return self.horizon_days * self.steps_per_day

    @property
    def dt_hours(self) -> float:
        return self.step_minutes / 60.0

    @property
    def charge_efficiency(self) -> float:
        return math.sqrt(self.storage_round_trip)

    @property
    def flexible_phi(self) -> float:
        return self.phi if self.flexible_case == "enhanced" else 0.0


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class LoadProfile:
    node: str
    consumer_class: str
    p: np.ndarray  # kW inflexible real power
    thermal: np.ndarray  # kW electrified thermal (flexible-eligible)
    power_factor: float
    source_profile: str = ""
    appliances: dict = field(default_factory=dict)  # appliance kind -> count

    def q(self) -> np.ndarray:
        tan_phi = math.tan(math.acos(self.power_factor))
        return (self.p + self.thermal) * tan_phi


@dataclass
class EVChargingEvent:
    start: int  # timestep index, inclusive
    end: int  # exclusive
    energy_kwh: float  # battery-side terminal energy Q_final
    location: str  # "home" | "work"
    charger_kw: float
    ev_id: int
    node: str | None = None

    def feasible(self, eta_c: float, dt_hours: float) -> bool:
        return (self.end - self.start) * self.charger_kw * eta_c * dt_hours >= (
            self.energy_kwh - 1e-9
        )


@dataclass
class StorageUnit:
    node: str
    capacity_kwh: float
    q_min_kwh: float
    power_kw: float  # c-rate limit applied to both charge and discharge
    eta_c: float
    eta_d: float
    leakage: float
    initial_kwh: float


@dataclass
class FlexibleLoadSpec:
    node: str
    phi: float
    u_max_kw: float


@dataclass
class ScenarioArrays:
    """Dense per-node series in canonical node order (consumption +)."""

    p_base: np.ndarray  # (T, N) inflexible load kW
    u_base: np.ndarray  # (T, N) thermal base kW
    q: np.ndarray  # (T, N) kVAr
    pv: np.ndarray  # (T, N) generation kW


@dataclass
class Scenario:
    network: NetworkModel
    cfg: ScenarioConfig
    seed: int
    scenario_index: int
    profiles: dict[str, LoadProfile]
    pv: dict[str, np.ndarray]
    storage: list[StorageUnit]
    ev_events: list[EVChargingEvent]
    flexible: dict[str, FlexibleLoadSpec]
    tariffs: dict[str, Tariff]
    ev_tariff: Tariff
    ev_tou_nodes: set[str]
    targets: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.cfg.T

    @property
    def dt_hours(self) -> float:
        return self.cfg.dt_hours

    def start_date(self) -> date:
        return date.fromisoformat(self.cfg.start_date)

    def month_of_step(self) -> np.ndarray:
        start = self.start_date()
        steps_per_day = self.cfg.steps_per_day
        months = np.empty(self.T, dtype=np.int32)
        for d in range(self.cfg.horizon_days):
            m = (start + timedelta(days=d)).month
            months[d * steps_per_day:(d + 1) * steps_per_day] = m
        return months

    def events_by_node(self) -> dict[str, list[EVChargingEvent]]:
        out: dict[str, list[EVChargingEvent]] = {}
        for ev in self.ev_events:
            out.setdefault(ev.node, []).append(ev)
        for lst in out.values():
            lst.sort(key=lambda e: (e.start, e.ev_id))
        return out

    def storage_by_node(self) -> dict[str, StorageUnit]:
        return {s.node: s for s in self.storage}

    def node_price_series(self, node: str) -> np.ndarray:
        return self.tariffs[node].price_series(self.T)

    def ev_price_series(self, node: str) -> np.ndarray:
        if node in self.ev_tou_nodes:
            return self.ev_tariff.price_series(self.T)
        return self.node_price_series(node)

    def arrays(self) -> ScenarioArrays:
        cached = getattr(self, "_arrays", None)
        if cached is not None:
            return cached
        net = self.network
        T = self.T
        p = np.zeros((T, net.n_nodes))
        u = np.zeros((T, net.n_nodes))
        q = np.zeros((T, net.n_nodes))
        g = np.zeros((T, net.n_nodes))
        for nid, prof in self.profiles.items():
            j = net.node_index[nid]
            p[:, j] = prof.p
            u[:, j] = prof.thermal
            q[:, j] = prof.q()
        for nid, series in self.pv.items():
            g[:, net.node_index[nid]] = series
        self._arrays = ScenarioArrays(p_base=p, u_base=u, q=q, pv=g)
        return self._arrays


# ---------------------------------------------------------------------------
# Generation steps
# ---------------------------------------------------------------------------

def synthesize_baseline_loads(
    network: NetworkModel, library: ProfileLibrary, cfg: ScenarioConfig, rng
) -> dict[str, LoadProfile]:
    """Assign each consumer a library profile matching its average daily peak.

    Candidates must lie within the configured tolerance (default 10%) of the
    node's declared peak; the chosen profile is then rescaled so its average
    daily peak equals the declared peak exactly.
    """
    out = {}
    for nid in network.consumer_nodes:
        node = network.nodes[nid]
        bucket = library.by_kind.get(node.consumer_class, [])
        if not bucket:
            raise ScenarioError(f"library has no {node.consumer_class} profiles")
        peaks = np.array([p.avg_daily_peak(cfg.steps_per_day) for p in bucket])
        rel = np.abs(peaks - node.peak_load) / node.peak_load
        candidates = [i for i in range(len(bucket)) if rel[i] <= cfg.baseline_match_tolerance]
        if not candidates:
            if cfg.baseline_fallback_nearest:
                candidates = [int(np.argmin(rel))]
            else:
                raise ScenarioError(
                    f"node {nid}: no {node.consumer_class} library profile within "
                    f"{cfg.baseline_match_tolerance:.0%} of peak {node.peak_load} kW"
                )
        pick = bucket[candidates[int(rng.integers(len(candidates)))]]
        scale = node.peak_load / pick.avg_daily_peak(cfg.steps_per_day)
        pf = float(rng.uniform(*cfg.power_factor_range))
        out[nid] = LoadProfile(
            node=nid,
            consumer_class=node.consumer_class,
            p=pick.tiled(cfg.T) * scale,
            thermal=np.zeros(cfg.T),
            power_factor=pf,
            source_profile=pick.name,
        )
    return out


def apply_electrification(
    profiles: dict[str, LoadProfile],
    library: ProfileLibrary,
    cfg: ScenarioConfig,
    rng,
) -> dict:
    """Uplift non-thermal demand and add electrified thermal appliances.

    Thermal appliance profiles (in thermal kW) are converted to electric via
    the appliance efficiency and added to randomly chosen consumers that do
    not already have that appliance, until the network's added electric
    energy crosses the target.  An aggregated consumer node offers one
    appliance slot of each kind per household-equivalent of its peak.
    Returns accounting diagnostics.
    """
    spd = cfg.steps_per_day
    households = {}
    for nid, prof in profiles.items():
        n_days = max(1, len(prof.p) // spd)
        peak = prof.p[: n_days * spd].reshape(n_days, spd).max(axis=1).mean()
        households[nid] = max(1, int(round(peak / cfg.household_peak_kw)))

    baseline_kwh = sum(float(p.p.sum()) for p in profiles.values()) * cfg.dt_hours
    for prof in profiles.values():
        uplift = (
            cfg.uplift_residential_pct
            if prof.consumer_class == "residential"
            else cfg.uplift_commercial_pct
        )
        prof.p *= 1.0 + uplift / 100.0

    target_kwh = cfg.thermal_energy_fraction * baseline_kwh
    added_kwh = 0.0
    kinds = ("space_heating", "water_heating")
    n_added = 0
    while added_kwh < target_kwh and target_kwh > 0:
        eligible = [
            (nid, k)
            for nid in sorted(profiles)
            for k in kinds
            if profiles[nid].appliances.get(k, 0) < households[nid] and library.by_kind[k]
        ]
        if not eligible:
            raise ScenarioError(
                f"electrification target {target_kwh:.0f} kWh unreachable: "
                f"all consumers already electrified at {added_kwh:.0f} kWh"
            )
        nid, kind = eligible[int(rng.integers(len(eligible)))]
        bucket = library.by_kind[kind]
        pick = bucket[int(rng.integers(len(bucket)))]
        electric = pick.tiled(cfg.T) / cfg.appliance_efficiency
        profiles[nid].thermal += electric
        profiles[nid].appliances[kind] = profiles[nid].appliances.get(kind, 0) + 1
        added_kwh += float(electric.sum()) * cfg.dt_hours
        n_added += 1
    return {
        "baseline_kwh": baseline_kwh,
        "thermal_target_kwh": target_kwh,
        "thermal_added_kwh": added_kwh,
        "appliances_added": n_added,
    }


def _clipped_normal(rng, mean, sd, lo, hi):
    return float(np.clip(rng.normal(mean, sd), lo, hi))


def sample_ev_event(cfg: ScenarioConfig, day: int, location: str, rng,
                    prev_end: int = 0) -> EVChargingEvent | None:
    """Sample one charging event for the given day, or None if infeasible."""
    spd = cfg.steps_per_day
    steps_per_hour = spd / 24.0
    if location == "home":
        arr = _clipped_normal(rng, *cfg.home_arrival, 14.0, 23.5)
        dep = _clipped_normal(rng, *cfg.home_departure, 4.0, 12.0)
        start = day * spd + int(round(arr * steps_per_hour))
        end = (day + 1) * spd + int(round(dep * steps_per_hour))
    else:
        arr = _clipped_normal(rng, *cfg.work_arrival, 6.0, 12.0)
        dep = _clipped_normal(rng, *cfg.work_departure, 13.0, 21.0)
        start = day * spd + int(round(arr * steps_per_hour))
        end = day * spd + int(round(dep * steps_per_hour))
    start = max(start, prev_end)
    end = min(end, cfg.T)  # overnight windows clip at the horizon edge
    if end - start < steps_per_hour:  # need at least one hour of window
        return None
    sigma = cfg.ev_energy_sigma
    mu = math.log(cfg.ev_energy_mean_kwh) - 0.5 * sigma * sigma
    energy = float(rng.lognormal(mu, sigma))
    max_kwh = (end - start) * cfg.charger_power_kw * cfg.charge_efficiency * cfg.dt_hours
    energy = min(energy, 0.98 * max_kwh)
    if energy < 0.5:
        return None
    return EVChargingEvent(
        start=start,
        end=end,
        energy_kwh=energy,
        location=location,
        charger_kw=cfg.charger_power_kw,
        ev_id=-1,
    )


def sample_ev_schedule(cfg: ScenarioConfig, location: str, rng) -> list[EVChargingEvent]:
    """One EV's charging events over the horizon (non-overlapping windows)."""
    start_dow = date.fromisoformat(cfg.start_date).weekday()
    events = []
    prev_end = 0
    for day in range(cfg.horizon_days):
        if location == "work" and (start_dow + day) % 7 >= 5:
            continue  # workplace charging on weekdays only
        if rng.random() >= cfg.ev_event_probability:
            continue
        ev = sample_ev_event(cfg, day, location, rng, prev_end)
        if ev is None:
            continue
        events.append(ev)
        prev_end = ev.end
    return events


def generate_ev_events(cfg: ScenarioConfig, rng, count: int) -> list[EVChargingEvent]:
    """Sample ``count`` unassigned events (for calibration / testing)."""
    out = []
    guard = 0
    while len(out) < count:
        guard += 1
        if guard > 50 * count:
            raise ScenarioError("EV sampler cannot produce feasible windows")
        location = "home" if rng.random() < cfg.ev_home_share else "work"
        day = int(rng.integers(0, cfg.horizon_days))
        if location == "work":
            start_dow = date.fromisoformat(cfg.start_date).weekday()
            if (start_dow + day) % 7 >= 5:
                continue
        ev = sample_ev_event(cfg, day, location, rng)
        if ev is not None:
            out.append(ev)
    return out


def assign_evs(
    network: NetworkModel,
    profiles: dict[str, LoadProfile],
    cfg: ScenarioConfig,
    target_kwh: float,
    rng,
) -> tuple[list[EVChargingEvent], dict]:
    """Add EVs (whole charging schedules) to nodes until the grid-side EV
    energy crosses the target.

    Home EVs go to residential nodes, capped at one charger per 12.2 kW of
    node peak (strict floor); work EVs go to commercial nodes with
    probability proportional to peak load.
    """
    res_nodes = [n for n in network.consumer_nodes
                 if network.nodes[n].consumer_class == "residential"]
    com_nodes = [n for n in network.consumer_nodes
                 if network.nodes[n].consumer_class == "commercial"]
    caps = {
        n: int(math.floor(network.nodes[n].peak_load / cfg.residential_cap_kw_per_charger))
        for n in res_nodes
    }
    used = {n: 0 for n in res_nodes}
    com_weights = np.array([network.nodes[n].peak_load for n in com_nodes], dtype=float)

    events: list[EVChargingEvent] = []
    total = 0.0
    ev_id = 0
    eta_c = cfg.charge_efficiency
    guard = 0
    while total < target_kwh and target_kwh > 0:
        guard += 1
        if guard > 100000:
            raise ScenarioError("EV assignment did not reach its target")
        location = "home" if rng.random() < cfg.ev_home_share else "work"
        if location == "home":
            pool = [n for n in res_nodes if used[n] < caps[n]]
            if not pool:
                location = "work"
        if location == "work" and not com_nodes:
            pool = [n for n in res_nodes if used[n] < caps[n]]
            if not pool:
                raise ScenarioError(
                    f"EV energy target {target_kwh:.0f} kWh unreachable under "
                    f"charger caps ({total:.0f} kWh assigned)"
                )
            location = "home"
        if location == "home":
            node = pool[int(rng.integers(len(pool)))]
        else:
            w = com_weights / com_weights.sum()
            node = com_nodes[int(rng.choice(len(com_nodes), p=w))]
        schedule = sample_ev_schedule(cfg, location, rng)
        if not schedule:
            continue
        for ev in schedule:
            ev.node = node
            ev.ev_id = ev_id
        if location == "home":
            used[node] += 1
        total += sum(e.energy_kwh for e in schedule) / eta_c
        events.extend(schedule)
        ev_id += 1
    return events, {"ev_target_kwh": target_kwh, "ev_assigned_kwh": total, "n_evs": ev_id}


def assign_pv(
    network: NetworkModel,
    profiles: dict[str, LoadProfile],
    ev_kwh_by_node: dict[str, float],
    shape: LibraryProfile,
    cfg: ScenarioConfig,
    target_kwh: float,
    rng,
) -> tuple[dict[str, np.ndarray], dict]:
    """Place PV on uniformly chosen nodes, sized to a random fraction of
    each node's total consumption, until network PV energy crosses the target."""
    shape_series = shape.tiled(cfg.T)
    shape_kwh = float(shape_series.sum()) * cfg.dt_hours
    if shape_kwh <= 0:
        raise ScenarioError("PV shape has no energy")
    consumers = list(network.consumer_nodes)
    order = rng.permutation(len(consumers))
    pv: dict[str, np.ndarray] = {}
    total = 0.0
    for idx in order:
        if total >= target_kwh or target_kwh <= 0:
            break
        nid = consumers[int(idx)]
        prof = profiles[nid]
        node_kwh = float((prof.p + prof.thermal).sum()) * cfg.dt_hours
        node_kwh += ev_kwh_by_node.get(nid, 0.0)
        ratio = float(rng.uniform(*cfg.pv_sizing))
        node_pv_kwh = ratio * node_kwh
        pv[nid] = shape_series * (node_pv_kwh / shape_kwh)
        total += node_pv_kwh
    if total < target_kwh:
        raise ScenarioError(
            f"PV target {target_kwh:.0f} kWh unreachable: all nodes placed, "
            f"total {total:.0f} kWh"
        )
    return pv, {"pv_target_kwh": target_kwh, "pv_assigned_kwh": total, "n_pv": len(pv)}


def _storage_draws(pv_nodes, avg_daily_pv, spread_pct, sizing, rng):
    n_units = int(math.ceil(spread_pct / 100.0 * len(pv_nodes)))
    n_units = min(n_units, len(pv_nodes))
    sel = rng.choice(len(pv_nodes), size=n_units, replace=False)
    ratios = rng.uniform(sizing[0], sizing[1], size=n_units)
    caps = ratios * avg_daily_pv[sel]
    return sel, caps


def assign_storage(
    pv: dict[str, np.ndarray], cfg: ScenarioConfig, rng
) -> tuple[list[StorageUnit], dict]:
    """Give a random subset of PV nodes a battery sized from daily PV energy.

    With ``storage_reference_spread_pct`` set, total fleet capacity is
    rescaled to match what the reference spread would have drawn from the
    same generator state (equal-total spread experiment).
    """
    if not pv:
        raise ScenarioError("cannot assign storage: no PV nodes")
    pv_nodes = sorted(pv)
    dt = cfg.dt_hours
    spd = cfg.steps_per_day
    avg_daily_pv = np.array(
        [float(pv[n].sum()) * dt / max(1, len(pv[n]) // spd) for n in pv_nodes]
    )
    ref_total = None
    if cfg.storage_reference_spread_pct is not None:
        import copy

        ref_rng = copy.deepcopy(rng)
        _, ref_caps = _storage_draws(
            pv_nodes, avg_daily_pv, cfg.storage_reference_spread_pct,
            cfg.storage_sizing, ref_rng,
        )
        ref_total = float(ref_caps.sum())
    sel, caps = _storage_draws(
        pv_nodes, avg_daily_pv, cfg.storage_spread_pct, cfg.storage_sizing, rng
    )
    if ref_total is not None and caps.sum() > 0:
        caps = caps * (ref_total / caps.sum())
    eta = cfg.charge_efficiency
    units = [
        StorageUnit(
            node=pv_nodes[int(i)],
            capacity_kwh=float(c),
            q_min_kwh=0.0,
            power_kw=cfg.storage_c_rate * float(c),
            eta_c=eta,
            eta_d=eta,
            leakage=cfg.storage_leakage,
            initial_kwh=cfg.storage_initial_soc * float(c),
        )
        for i, c in zip(sel, caps)
    ]
    units.sort(key=lambda s: s.node)
    return units, {
        "storage_units": len(units),
        "storage_total_kwh": float(caps.sum()),
        "storage_reference_total_kwh": ref_total,
    }


def assign_tariffs(
    network: NetworkModel,
    profiles: dict[str, LoadProfile],
    ev_events: list[EVChargingEvent],
    cfg: ScenarioConfig,
    rng,
) -> tuple[dict[str, Tariff], Tariff, set[str], dict]:
    """Class tariffs centered on the most frequent network peak hour, plus
    EV-TOU pricing for a random 40% of EV-owning nodes."""
    total = np.zeros(cfg.T)
    for prof in profiles.values():
        total += prof.p + prof.thermal
    center = most_frequent_peak_step(total, cfg.steps_per_day)
    book = cfg.tariff_book

    def prices(cls):
        d = book[cls]
        return (d["off"], d["part"], d["peak"])

    built = {
        cls: build_tariff(
            cls, prices(cls), center, cfg.peak_window_hours, cfg.part_peak_hours,
            cfg.steps_per_day,
        )
        for cls in ("residential", "commercial")
    }
    ev_tariff = build_tariff(
        "ev", prices("ev"), center, cfg.peak_window_hours, cfg.part_peak_hours,
        cfg.steps_per_day,
    )
    assignment = {
        nid: built[profiles[nid].consumer_class] for nid in network.consumer_nodes
    }
    ev_nodes = sorted({e.node for e in ev_events})
    n_sel = int(math.floor(cfg.ev_tou_share * len(ev_nodes) + 0.5))
    if n_sel > 0:
        chosen = rng.choice(len(ev_nodes), size=n_sel, replace=False)
        ev_tou = {ev_nodes[int(i)] for i in chosen}
    else:
        ev_tou = set()
    return assignment, ev_tariff, ev_tou, {
        "peak_center_step": center,
        "ev_tou_nodes": len(ev_tou),
        "ev_nodes": len(ev_nodes),
    }


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def scenario_rng(root_seed: int, scenario_index: int):
    return np.random.default_rng(np.random.SeedSequence([root_seed, scenario_index]))


def generate_scenario(
    network: NetworkModel,
    cfg: ScenarioConfig,
    root_seed: int,
    scenario_index: int = 0,
    library: ProfileLibrary | None = None,
) -> Scenario:
    """Materialize one scenario from (config, seed, index)."""
    library = library if library is not None else bundled_library()
    rng = scenario_rng(root_seed, scenario_index)
    dt = cfg.dt_hours

    profiles = synthesize_baseline_loads(network, library, cfg, rng)
    diag = apply_electrification(profiles, library, cfg, rng)

    base_kwh = sum(float((p.p + p.thermal).sum()) for p in profiles.values()) * dt
    ev_target = cfg.ev_energy_fraction * base_kwh
    ev_events, ev_diag = assign_evs(network, profiles, cfg, ev_target, rng)
    diag.update(ev_diag)

    ev_kwh_by_node: dict[str, float] = {}
    for e in ev_events:
        ev_kwh_by_node[e.node] = ev_kwh_by_node.get(e.node, 0.0) + (
            e.energy_kwh / cfg.charge_efficiency
        )
    pv_target = cfg.pv_energy_fraction * (base_kwh + sum(ev_kwh_by_node.values()))
    pv, pv_diag = assign_pv(
        network, profiles, ev_kwh_by_node, library.pv_shape(), cfg, pv_target, rng
    )
    diag.update(pv_diag)

    storage, st_diag = assign_storage(pv, cfg, rng) if pv else ([], {})
    diag.update(st_diag)

    tariff_map, ev_tariff, ev_tou, t_diag = assign_tariffs(
        network, profiles, ev_events, cfg, rng
    )
    diag.update(t_diag)

    phi = cfg.flexible_phi
    flexible = {}
    for nid, prof in profiles.items():
        if prof.thermal.max() > 0:
            flexible[nid] = FlexibleLoadSpec(
                node=nid, phi=phi, u_max_kw=cfg.u_max_multiple * float(prof.thermal.max())
            )

    scen = Scenario(
        network=network,
        cfg=cfg,
        seed=root_seed,
        scenario_index=scenario_index,
        profiles=profiles,
        pv=pv,
        storage=storage,
        ev_events=ev_events,
        flexible=flexible,
        tariffs=tariff_map,
        ev_tariff=ev_tariff,
        ev_tou_nodes=ev_tou,
        targets=diag,
    )
    _validate_scenario(scen)
    return scen


def _validate_scenario(scen: Scenario) -> None:
    cfg = scen.cfg
    for ev in scen.ev_events:
        if not ev.feasible(cfg.charge_efficiency, cfg.dt_hours):
            raise ScenarioError(f"infeasible EV event at node {ev.node}: {ev}")
        if ev.node is None:
            raise ScenarioError("unassigned EV event after generation")
    lo, hi = cfg.storage_sizing
    if cfg.storage_reference_spread_pct is None:
        by_node = {}
        spd = cfg.steps_per_day
        for unit in scen.storage:
            series = scen.pv[unit.node]
            daily = float(series.sum()) * cfg.dt_hours / max(1, len(series) // spd)
            if not (lo * daily - 1e-9 <= unit.capacity_kwh <= hi * daily + 1e-9):
                raise ScenarioError(f"storage at {unit.node} outside sizing bounds")
            by_node[unit.node] = unit
    # One charging window at a time per EV.
    by_ev: dict[int, list[EVChargingEvent]] = {}
    for ev in scen.ev_events:
        by_ev.setdefault(ev.ev_id, []).append(ev)
    for evs in by_ev.values():
        evs.sort(key=lambda e: e.start)
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end:
                raise ScenarioError(f"overlapping windows for EV {a.ev_id}")
