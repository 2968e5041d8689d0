"""Data-driven linear surrogate of the power-flow map.

Ridge-regressed affine models from nodal power injections to node voltage
magnitudes and to transformer real/reactive input-side flows; squared
apparent power is predicted as the sum of the two squared affine forms.
Training data comes from the peak month of a completed local-controller
run.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

RIDGE_DEFAULT = 1e-8
MODEL_FORMAT_VERSION = 1


class LinModelError(ValueError):
    pass


@dataclass
class TrainingSet:
    """Samples of (injections, voltages, transformer flows)."""

    s: np.ndarray  # (n_samples, 2N): [p_1..p_N, q_1..q_N] in kW / kVAr
    v: np.ndarray  # (n_samples, N) pu
    tr_p: np.ndarray  # (n_samples, n_tr) kW, input side
    tr_q: np.ndarray  # (n_samples, n_tr) kVAr
    timesteps: np.ndarray  # global step index of each sample
    peak_month: int | None = None
    fallback_full_horizon: bool = False

    def __len__(self) -> int:
        return self.s.shape[0]


@dataclass
class LinearPFModel:
    """v = A s + a;  tau = (F s + f)^2 + (G s + g)^2 elementwise."""

    A: np.ndarray
    a: np.ndarray
    F: np.ndarray
    f: np.ndarray
    G: np.ndarray
    g: np.ndarray
    residual_rms: dict = field(default_factory=dict)
    ridge: float = RIDGE_DEFAULT

    @property
    def n_features(self) -> int:
        return self.A.shape[1]

    def predict(self, s: np.ndarray):
        """Predict (v, tau) for injection vector(s) s."""
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.n_features:
            raise LinModelError(
                f"injection dimension {s.shape[-1]} != model {self.n_features}"
            )
        v = s @ self.A.T + self.a
        zp = s @ self.F.T + self.f
        zq = s @ self.G.T + self.g
        return v, zp * zp + zq * zq

    def predict_flows(self, s: np.ndarray):
        s = np.asarray(s, dtype=float)
        return s @ self.F.T + self.f, s @ self.G.T + self.g

    def to_bytes(self) -> bytes:
        doc = {
            "version": MODEL_FORMAT_VERSION,
            "ridge": self.ridge,
            "residual_rms": self.residual_rms,
        }
        buf = io.BytesIO()
        header = json.dumps(doc, sort_keys=True).encode()
        buf.write(len(header).to_bytes(4, "little"))
        buf.write(header)
        np.savez(buf, A=self.A, a=self.a, F=self.F, f=self.f, G=self.G, g=self.g)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LinearPFModel":
        hlen = int.from_bytes(blob[:4], "little")
        doc = json.loads(blob[4:4 + hlen].decode())
        if doc.get("version") != MODEL_FORMAT_VERSION:
            raise LinModelError(f"unsupported model version {doc.get('version')!r}")
        npz = np.load(io.BytesIO(blob[4 + hlen:]))
        return cls(
            A=npz["A"], a=npz["a"], F=npz["F"], f=npz["f"], G=npz["G"], g=npz["g"],
            residual_rms=doc["residual_rms"], ridge=doc["ridge"],
        )


def injection_matrix(p_kw: np.ndarray, q_kvar: np.ndarray) -> np.ndarray:
    """Stack (T, N) real/reactive injections into (T, 2N) feature rows."""
    return np.concatenate([p_kw, q_kvar], axis=1)


def collect_training_set(
    scenario, p_kw: np.ndarray, q_kvar: np.ndarray, pf_series
) -> TrainingSet:
    """All timesteps of the peak month of a completed local-controller run.

    The peak month is the calendar month containing the maximum network
    load step.  Horizons shorter than one full calendar month fall back to
    the full horizon (flagged).
    """
    if len(pf_series) == 0:
        raise LinModelError("empty power-flow series")
    total = p_kw.sum(axis=1)
    months = scenario.month_of_step()
    peak_month = int(months[int(np.argmax(total))])
    mask = months == peak_month
    fallback = False
    # A complete calendar month at 15-minute resolution has at least 28
    # days of steps; shorter runs use everything.
    if mask.sum() < 28 * scenario.cfg.steps_per_day:
        mask = np.ones(len(total), dtype=bool)
        fallback = True
    idx = np.where(mask)[0]
    return TrainingSet(
        s=injection_matrix(p_kw, q_kvar)[idx],
        v=pf_series.v[idx],
        tr_p=pf_series.transformer_p_kw[idx],
        tr_q=pf_series.transformer_q_kvar[idx],
        timesteps=idx,
        peak_month=peak_month,
        fallback_full_horizon=fallback,
    )


def _ridge_fit(x: np.ndarray, targets: np.ndarray, ridge: float):
    """Row-wise ridge regression on standardized features.

    Returns (W, b) on the original feature scale.  With ridge == 0 a rank
    deficient design raises LinModelError.
    """
    n, k = x.shape
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std
    xs1 = np.concatenate([xs, np.ones((n, 1))], axis=1)
    gram = xs1.T @ xs1
    if ridge > 0:
        reg = ridge * np.eye(k + 1)
        reg[-1, -1] = 0.0  # never penalize the intercept
        gram = gram + reg
    else:
        rank = np.linalg.matrix_rank(gram)
        if rank < k + 1:
            raise LinModelError(
                f"rank-deficient training set ({rank} < {k + 1}); "
                f"enable ridge regularization"
            )
    coef = np.linalg.solve(gram, xs1.T @ targets)  # (k+1, n_out)
    w_std = coef[:-1]
    b_std = coef[-1]
    W = (w_std.T / std).astype(float)
    b = b_std - (w_std.T * (mean / std)).sum(axis=1)
    return W, b


def fit(training: TrainingSet, ridge: float = RIDGE_DEFAULT) -> LinearPFModel:
    """Least-squares fit of the three affine maps, one output row each."""
    if len(training) == 0:
        raise LinModelError("empty training set")
    A, a = _ridge_fit(training.s, training.v, ridge)
    F, f = _ridge_fit(training.s, training.tr_p, ridge)
    G, g = _ridge_fit(training.s, training.tr_q, ridge)
    model = LinearPFModel(A=A, a=a, F=F, f=f, G=G, g=g, ridge=ridge)
    v_hat = training.s @ A.T + a
    p_hat = training.s @ F.T + f
    q_hat = training.s @ G.T + g
    model.residual_rms = {
        "v_pu": float(np.sqrt(np.mean((v_hat - training.v) ** 2))),
        "tr_p_kw": float(np.sqrt(np.mean((p_hat - training.tr_p) ** 2))),
        "tr_q_kvar": float(np.sqrt(np.mean((q_hat - training.tr_q) ** 2))),
    }
    return model


def holdout_errors(training: TrainingSet, ridge: float = RIDGE_DEFAULT,
                   train_fraction: float = 0.8):
    """Fit on the first 80% of samples, report RMS errors on the rest."""
    n = len(training)
    split = int(train_fraction * n)
    if split < 2 or n - split < 1:
        raise LinModelError("training set too small to split")
    head = TrainingSet(
        s=training.s[:split], v=training.v[:split],
        tr_p=training.tr_p[:split], tr_q=training.tr_q[:split],
        timesteps=training.timesteps[:split],
    )
    model = fit(head, ridge)
    s_test = training.s[split:]
    v_hat, tau_hat = model.predict(s_test)
    kva_hat = np.sqrt(tau_hat)
    kva_true = np.hypot(training.tr_p[split:], training.tr_q[split:])
    return {
        "v_rms_pu": float(np.sqrt(np.mean((v_hat - training.v[split:]) ** 2))),
        "kva_rms": float(np.sqrt(np.mean((kva_hat - kva_true) ** 2))),
        "model": model,
    }
