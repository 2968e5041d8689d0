"""Independent reference implementations used only to check the package.

These deliberately avoid the code paths under test: the power-flow oracle
is a full Newton-Raphson solve on the bus admittance matrix, not a sweep.
"""

from __future__ import annotations

import numpy as np


def newton_phase_solution(circuit, p_pu, q_pu, v_root, tol=1e-12, max_iter=60):
    """Polar Newton-Raphson power flow for one radial phase circuit.

    ``p_pu``/``q_pu`` are consumption-positive injections per circuit node.
    Returns complex node voltages.  Raises RuntimeError on non-convergence.
    """
    n = circuit.n
    ybus = np.zeros((n, n), dtype=complex)
    for k in range(1, n):
        pk = int(circuit.parent[k])
        y = 1.0 / complex(circuit.edge_r[k], circuit.edge_x[k])
        ybus[k, k] += y
        ybus[pk, pk] += y
        ybus[k, pk] -= y
        ybus[pk, k] -= y

    # Generation-positive spec injections.
    p_spec = -np.asarray(p_pu, dtype=float)
    q_spec = -np.asarray(q_pu, dtype=float)
    vm = np.full(n, float(v_root))
    va = np.zeros(n)
    pq = np.arange(1, n)
    if n == 1:
        return vm.astype(complex)

    g, b = ybus.real, ybus.imag
    for _ in range(max_iter):
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(ybus @ v)
        dp = p_spec[pq] - s_calc.real[pq]
        dq = q_spec[pq] - s_calc.imag[pq]
        mismatch = np.concatenate([dp, dq])
        if np.max(np.abs(mismatch)) < tol:
            return v
        m = len(pq)
        jac = np.zeros((2 * m, 2 * m))
        for a, i in enumerate(pq):
            for c, j in enumerate(pq):
                if i == j:
                    jac[a, c] = -s_calc.imag[i] - b[i, i] * vm[i] ** 2
                    jac[a, m + c] = s_calc.real[i] / vm[i] + g[i, i] * vm[i]
                    jac[m + a, c] = s_calc.real[i] - g[i, i] * vm[i] ** 2
                    jac[m + a, m + c] = s_calc.imag[i] / vm[i] - b[i, i] * vm[i]
                else:
                    tij = va[i] - va[j]
                    gij, bij = g[i, j], b[i, j]
                    jac[a, c] = vm[i] * vm[j] * (gij * np.sin(tij) - bij * np.cos(tij))
                    jac[a, m + c] = vm[i] * (gij * np.cos(tij) + bij * np.sin(tij))
                    jac[m + a, c] = -vm[i] * vm[j] * (gij * np.cos(tij) + bij * np.sin(tij))
                    jac[m + a, m + c] = vm[i] * (gij * np.sin(tij) - bij * np.cos(tij))
        step = np.linalg.solve(jac, mismatch)
        va[pq] += step[:m]
        vm[pq] += step[m:]
    raise RuntimeError("Newton oracle did not converge")


def newton_network_solution(network, p_kw, q_kvar, v_root=None):
    """Full-network Newton solve; returns (|v| per node, transformer kVA, P, Q)."""
    if v_root is None:
        v_root = network.source_voltage_pu
    s_base = network.s_base_kva
    vmag = np.zeros(network.n_nodes)
    v_by_phase = {}
    for ph, circ in network.circuits.items():
        pos = np.array(
            [network.node_index[f"{b}.{ph}"] for b in circ.bus_ids], dtype=int
        )
        v = newton_phase_solution(circ, p_kw[pos] / s_base, q_kvar[pos] / s_base, v_root)
        vmag[pos] = np.abs(v)
        v_by_phase[ph] = v
    n_tr = len(network.transformers)
    tr_p = np.zeros(n_tr)
    tr_q = np.zeros(n_tr)
    for j, tr in enumerate(network.transformers):
        circ = network.circuits[tr.phase]
        pos = {b: i for i, b in enumerate(circ.bus_ids)}
        vi = v_by_phase[tr.phase][pos[tr.from_bus]]
        vj = v_by_phase[tr.phase][pos[tr.to_bus]]
        k = pos[tr.to_bus]
        y = 1.0 / complex(circuit_edge_r(circ, k), circuit_edge_x(circ, k))
        s = vi * np.conj((vi - vj) * y) * s_base
        tr_p[j] = s.real
        tr_q[j] = s.imag
    return vmag, np.hypot(tr_p, tr_q), tr_p, tr_q


def circuit_edge_r(circ, k):
    return circ.edge_r[k]


def circuit_edge_x(circ, k):
    return circ.edge_x[k]
