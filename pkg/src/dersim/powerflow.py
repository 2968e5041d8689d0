"""Quasi-static time-series power flow for radial feeders.

Each timestep is an independent steady-state solve (backward/forward sweep
per phase, constant-power loads); the only state carried between steps is
the substation regulator tap.  Transformer loading is reported as
input-side apparent power.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .network import NetworkModel

VOLTAGE_TOL = 1e-8
MAX_SWEEP_ITER = 100
COLLAPSE_FLOOR_PU = 0.5


class PowerFlowError(RuntimeError):
    """Sweep failed to converge."""


@dataclass
class RegulatorState:
    """Substation on-load tap changer state and settings.

    The tap scales the source voltage by ``tap * tap_step`` per-unit.  The
    regulator monitors the mean voltage magnitude over the phases of
    ``monitored_bus`` and moves at most one tap per timestep when the
    monitored voltage leaves the deadband around ``target``.
    """

    tap: int = 0
    tap_step: float = 0.00625
    deadband: float = 0.0125
    max_tap: int = 16
    min_tap: int = -16
    target: float = 1.0
    monitored_bus: str | None = None  # None -> source bus (quiescent)
    enabled: bool = True

    def source_voltage(self, setpoint: float) -> float:
        return setpoint + self.tap * self.tap_step


@dataclass
class InjectionFrame:
    """Net nodal power injections for one timestep (consumption positive)."""

    p_kw: np.ndarray  # (n_nodes,)
    q_kvar: np.ndarray  # (n_nodes,)
    t: int = 0


@dataclass
class PowerFlowSolution:
    v: np.ndarray  # (n_nodes,) voltage magnitude, pu
    transformer_kva: np.ndarray  # (n_tr,) apparent power magnitude, input side
    transformer_p_kw: np.ndarray
    transformer_q_kvar: np.ndarray
    source_p_kw: float
    source_q_kvar: float
    converged: bool
    iterations: int
    collapsed: bool
    tap: int
    t: int = 0

    @property
    def tau(self) -> np.ndarray:
        """Square of transformer apparent power magnitude (kVA^2)."""
        return self.transformer_kva**2


@dataclass
class PowerFlowSeries:
    """Stacked per-timestep solutions for a whole horizon."""

    v: np.ndarray  # (T, n_nodes)
    transformer_kva: np.ndarray  # (T, n_tr)
    transformer_p_kw: np.ndarray
    transformer_q_kvar: np.ndarray
    source_p_kw: np.ndarray  # (T,)
    source_q_kvar: np.ndarray
    converged: np.ndarray  # (T,) bool
    iterations: np.ndarray  # (T,) int
    collapsed: np.ndarray  # (T,) bool
    taps: np.ndarray  # (T,) int

    def __len__(self) -> int:
        return self.v.shape[0]

    def __getitem__(self, t: int) -> PowerFlowSolution:
        return PowerFlowSolution(
            v=self.v[t],
            transformer_kva=self.transformer_kva[t],
            transformer_p_kw=self.transformer_p_kw[t],
            transformer_q_kvar=self.transformer_q_kvar[t],
            source_p_kw=float(self.source_p_kw[t]),
            source_q_kvar=float(self.source_q_kvar[t]),
            converged=bool(self.converged[t]),
            iterations=int(self.iterations[t]),
            collapsed=bool(self.collapsed[t]),
            tap=int(self.taps[t]),
            t=t,
        )


@dataclass
class _CompiledNetwork:
    """Per-phase circuit arrays plus index maps, cached on the model."""

    phases: list[str]
    circuits: dict[str, object]
    node_pos: dict[str, np.ndarray]  # phase -> global node index per circuit node
    tr_phase: list[str]
    tr_child: np.ndarray  # circuit index of transformer output node
    tr_input: np.ndarray  # circuit index of transformer input node
    monitored: dict[str, list[tuple[str, int]]] = field(default_factory=dict)


def _compile(network: NetworkModel) -> _CompiledNetwork:
    cached = getattr(network, "_compiled_pf", None)
    if cached is not None:
        return cached
    phases = sorted(network.circuits)
    node_pos = {}
    for ph in phases:
        circ = network.circuits[ph]
        node_pos[ph] = np.array(
            [network.node_index[f"{b}.{ph}"] for b in circ.bus_ids], dtype=np.int64
        )
    tr_phase, tr_child, tr_input = [], [], []
    for tr in network.transformers:
        circ = network.circuits[tr.phase]
        pos = {b: i for i, b in enumerate(circ.bus_ids)}
        tr_phase.append(tr.phase)
        tr_child.append(pos[tr.to_bus])
        tr_input.append(pos[tr.from_bus])
    compiled = _CompiledNetwork(
        phases=phases,
        circuits={ph: network.circuits[ph] for ph in phases},
        node_pos=node_pos,
        tr_phase=tr_phase,
        tr_child=np.asarray(tr_child, dtype=np.int64),
        tr_input=np.asarray(tr_input, dtype=np.int64),
    )
    network._compiled_pf = compiled
    return compiled


def _solve_once(network, compiled, p_kw, q_kvar, v_root):
    """One full multi-phase sweep at a fixed source voltage."""
    s_base = network.s_base_kva
    n = network.n_nodes
    v_mag = np.empty(n)
    v_cplx = {}
    i_edge = {}
    worst_delta = 0.0
    vmin_seen = np.inf
    iters = 0
    converged = True
    for ph in compiled.phases:
        circ = compiled.circuits[ph]
        pos = compiled.node_pos[ph]
        p_pu = p_kw[pos] / s_base
        q_pu = q_kvar[pos] / s_base
        v, i_acc, it, delta, vmin = _kernels.sweep(
            circ.parent, circ.order, circ.level_ptr, circ.level_idx,
            circ.edge_r, circ.edge_x, p_pu, q_pu, v_root,
            VOLTAGE_TOL, MAX_SWEEP_ITER, COLLAPSE_FLOOR_PU,
        )
        v_mag[pos] = np.abs(v)
        v_cplx[ph] = v
        i_edge[ph] = i_acc
        iters = max(iters, it)
        worst_delta = max(worst_delta, delta)
        vmin_seen = min(vmin_seen, vmin)
        if delta >= VOLTAGE_TOL:
            converged = False
    return v_mag, v_cplx, i_edge, iters, worst_delta, converged, vmin_seen


def solve_step(
    network: NetworkModel,
    frame: InjectionFrame,
    regulator: RegulatorState | None = None,
) -> tuple[PowerFlowSolution, RegulatorState]:
    """Solve one timestep; returns the solution and the updated regulator.

    The step is solved with the incoming tap, the regulator then moves at
    most one tap if the monitored voltage is outside the deadband, and the
    final solve uses the updated tap.

    A sweep that fails to converge while any voltage is below the collapse
    floor returns a solution flagged ``collapsed`` (with the last iterate)
    instead of raising, so scenario statistics can count it as a violation;
    any other non-convergence raises PowerFlowError with the worst mismatch.
    """
    compiled = _compile(network)
    reg = regulator if regulator is not None else RegulatorState(enabled=False)
    p = np.asarray(frame.p_kw, dtype=np.float64)
    q = np.asarray(frame.q_kvar, dtype=np.float64)
    if p.shape[0] != network.n_nodes or q.shape[0] != network.n_nodes:
        raise ValueError("injection frame does not cover all nodes")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError(f"non-finite injections at t={frame.t}")

    v_root = reg.source_voltage(network.source_voltage_pu)
    v_mag, v_cplx, i_edge, iters, delta, converged, vmin = _solve_once(
        network, compiled, p, q, v_root
    )

    new_reg = reg
    if reg.enabled and reg.monitored_bus is not None and converged:
        mon = _monitored_voltage(network, compiled, v_mag, reg.monitored_bus)
        tap = reg.tap
        if mon < reg.target - reg.deadband and tap < reg.max_tap:
            tap += 1
        elif mon > reg.target + reg.deadband and tap > reg.min_tap:
            tap -= 1
        if tap != reg.tap:
            new_reg = replace(reg, tap=tap)
            v_root = new_reg.source_voltage(network.source_voltage_pu)
            v_mag, v_cplx, i_edge, iters, delta, converged, vmin = _solve_once(
                network, compiled, p, q, v_root
            )

    collapsed = bool(np.any(v_mag < COLLAPSE_FLOOR_PU)) or (
        not converged and vmin < COLLAPSE_FLOOR_PU
    )
    if not converged and not collapsed:
        raise PowerFlowError(
            f"sweep did not converge at t={frame.t}: "
            f"max voltage update {delta:.3e} pu after {MAX_SWEEP_ITER} iterations"
        )

    s_base = network.s_base_kva
    n_tr = len(network.transformers)
    tr_p = np.zeros(n_tr)
    tr_q = np.zeros(n_tr)
    for j in range(n_tr):
        ph = compiled.tr_phase[j]
        s_flow = v_cplx[ph][compiled.tr_input[j]] * np.conj(
            i_edge[ph][compiled.tr_child[j]]
        )
        tr_p[j] = s_flow.real * s_base
        tr_q[j] = s_flow.imag * s_base
    tr_kva = np.hypot(tr_p, tr_q)

    src = 0j
    for ph in compiled.phases:
        circ = compiled.circuits[ph]
        children = np.where(circ.parent == 0)[0]
        root_i = np.sum(i_edge[ph][children]) if children.size else 0j
        src += v_cplx[ph][0] * np.conj(root_i)

    solution = PowerFlowSolution(
        v=v_mag,
        transformer_kva=tr_kva,
        transformer_p_kw=tr_p,
        transformer_q_kvar=tr_q,
        source_p_kw=float(src.real * s_base),
        source_q_kvar=float(src.imag * s_base),
        converged=converged,
        iterations=iters,
        collapsed=collapsed,
        tap=new_reg.tap,
        t=frame.t,
    )
    return solution, new_reg


def _monitored_voltage(network, compiled, v_mag, bus_id) -> float:
    vals = []
    for ph in compiled.phases:
        nid = f"{bus_id}.{ph}"
        idx = network.node_index.get(nid)
        if idx is not None:
            vals.append(v_mag[idx])
    if not vals:
        raise ValueError(f"regulator monitored bus {bus_id} has no nodes")
    return float(np.mean(vals))


def solve_series(
    network: NetworkModel,
    p_kw: np.ndarray,
    q_kvar: np.ndarray,
    regulator: RegulatorState | None = None,
) -> PowerFlowSeries:
    """Solve a (T, n_nodes) injection series step by step.

    Steps are independent except for the regulator tap carried forward.
    Per-step errors are re-raised with the timestep index.
    """
    p_kw = np.asarray(p_kw, dtype=np.float64)
    q_kvar = np.asarray(q_kvar, dtype=np.float64)
    if p_kw.ndim != 2 or p_kw.shape != q_kvar.shape:
        raise ValueError("expected matching (T, n_nodes) arrays")
    T = p_kw.shape[0]
    n_tr = len(network.transformers)
    out = PowerFlowSeries(
        v=np.empty((T, network.n_nodes)),
        transformer_kva=np.empty((T, n_tr)),
        transformer_p_kw=np.empty((T, n_tr)),
        transformer_q_kvar=np.empty((T, n_tr)),
        source_p_kw=np.empty(T),
        source_q_kvar=np.empty(T),
        converged=np.zeros(T, dtype=bool),
        iterations=np.zeros(T, dtype=np.int32),
        collapsed=np.zeros(T, dtype=bool),
        taps=np.zeros(T, dtype=np.int32),
    )
    reg = regulator if regulator is not None else RegulatorState(enabled=False)
    for t in range(T):
        try:
            sol, reg = solve_step(network, InjectionFrame(p_kw[t], q_kvar[t], t), reg)
        except PowerFlowError:
            raise
        except Exception as exc:  # annotate with the timestep
            raise PowerFlowError(f"power flow failed at t={t}: {exc}") from exc
        out.v[t] = sol.v
        out.transformer_kva[t] = sol.transformer_kva
        out.transformer_p_kw[t] = sol.transformer_p_kw
        out.transformer_q_kvar[t] = sol.transformer_q_kvar
        out.source_p_kw[t] = sol.source_p_kw
        out.source_q_kvar[t] = sol.source_q_kvar
        out.converged[t] = sol.converged
        out.iterations[t] = sol.iterations
        out.collapsed[t] = sol.collapsed
        out.taps[t] = sol.tap
    return out
