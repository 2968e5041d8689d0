"""Hot numeric kernels for the power-flow sweep.

Two interchangeable implementations of the backward/forward sweep inner
loop: a numba ``@njit`` version (looping over the topological order) and a
vectorized pure-numpy version (looping over tree depth levels).  The active
path is chosen at import time: numba is used when importable unless the
environment variable ``DERSIM_NUMBA`` is set to ``0``.

Both implementations are exported so the benchmark in ``benchmarks/`` can
compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("DERSIM_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "no")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via DERSIM_NUMBA=0 instead
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and NUMBA_REQUESTED


def sweep_numpy(parent, order, level_ptr, level_idx, edge_r, edge_x,
                p_pu, q_pu, v_root, tol, max_iter, floor=0.0):
    """Backward/forward sweep, vectorized over tree depth levels.

    Parameters are flat circuit arrays (see network.PhaseCircuit); ``p_pu``
    and ``q_pu`` are per-node injections in per-unit (consumption positive).
    Iteration stops early if any voltage magnitude falls below ``floor``
    (collapse guard).  Returns (V complex per node, I complex per edge,
    iterations, last max voltage update, min |V| seen).
    """
    n = parent.shape[0]
    z = edge_r + 1j * edge_x
    v = np.full(n, v_root, dtype=np.complex128)
    s = p_pu + 1j * q_pu
    i_acc = np.zeros(n, dtype=np.complex128)
    n_levels = level_ptr.shape[0] - 1
    delta = np.inf
    vmin_seen = float(abs(v_root))
    it = 0
    for it in range(1, max_iter + 1):
        np.conjugate(s / v, out=i_acc)
        # Backward: accumulate branch currents from the deepest level up.
        for lv in range(n_levels - 1, 0, -1):
            idx = level_idx[level_ptr[lv]:level_ptr[lv + 1]]
            np.add.at(i_acc, parent[idx], i_acc[idx])
        # Forward: update voltages from the root down.
        v_new = v.copy()
        v_new[parent == -1] = v_root
        for lv in range(1, n_levels):
            idx = level_idx[level_ptr[lv]:level_ptr[lv + 1]]
            v_new[idx] = v_new[parent[idx]] - z[idx] * i_acc[idx]
        delta = float(np.max(np.abs(v_new - v))) if n else 0.0
        v = v_new
        vmin_seen = min(vmin_seen, float(np.min(np.abs(v))))
        if delta < tol or vmin_seen < floor:
            break
    return v, i_acc, it, delta, vmin_seen


def _sweep_loop(parent, order, level_ptr, level_idx, edge_r, edge_x,
                p_pu, q_pu, v_root, tol, max_iter, floor=0.0):
    # Same algorithm as sweep_numpy, written as plain loops for numba.
    n = parent.shape[0]
    v = np.empty(n, dtype=np.complex128)
    for k in range(n):
        v[k] = v_root
    i_acc = np.zeros(n, dtype=np.complex128)
    v_new = np.empty(n, dtype=np.complex128)
    delta = np.inf
    vmin_seen = abs(v_root)
    it = 0
    for it in range(1, max_iter + 1):
        for k in range(n):
            sk = complex(p_pu[k], q_pu[k])
            i_acc[k] = np.conj(sk / v[k])
        for oi in range(n - 1, 0, -1):
            k = order[oi]
            i_acc[parent[k]] += i_acc[k]
        v_new[order[0]] = v_root
        for oi in range(1, n):
            k = order[oi]
            z = complex(edge_r[k], edge_x[k])
            v_new[k] = v_new[parent[k]] - z * i_acc[k]
        delta = 0.0
        for k in range(n):
            dv = abs(v_new[k] - v[k])
            if dv > delta:
                delta = dv
            v[k] = v_new[k]
            vm = abs(v[k])
            if vm < vmin_seen:
                vmin_seen = vm
        if delta < tol or vmin_seen < floor:
            break
    return v, i_acc, it, delta, vmin_seen


if HAS_NUMBA:
    sweep_numba = numba.njit(cache=True, nogil=True)(_sweep_loop)
else:
    sweep_numba = None

sweep = sweep_numba if USE_NUMBA else sweep_numpy


def active_backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
