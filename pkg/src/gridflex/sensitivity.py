"""Model-less sensitivity coefficients from monitoring-device time series.

Coefficients are fitted by ridge-regularised least squares on first
differences of the measured injections, voltages and currents over a
sliding window.  When the window is long enough the regressors also carry
centred second-order injection products, so that the curvature of |V| and
|I| does not leak into the linear terms; the reported coefficients are then
the gradient at the window mean.  ``predict_state`` applies them as a
linear state model.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Mapping

import numpy as np

from .grid import GridModel
from .powerflow import OperatingPoint, SensitivityMatrices, solve_bfs

__all__ = [
    "MeasurementSeries",
    "SensitivityMatrices",
    "PredictedState",
    "EstimationError",
    "estimate_from_measurements",
    "predict_state",
    "operating_point_from_series",
    "injections_from_series",
    "shifted_operating_point",
    "synthesize_measurements",
    "read_measurements_csv",
    "write_measurements_csv",
]

CADENCE = timedelta(minutes=10)


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementSeries:
    timestamps: list[datetime]
    bus_ids: list[str]
    branch_ids: list[str]
    v: np.ndarray  # (T, buses); NaN where the bus is not monitored
    p: np.ndarray  # injections, generation positive; slack entry = transfer into the grid
    q: np.ndarray
    i: np.ndarray  # (T, branches)

    def __post_init__(self):
        ts = self.timestamps
        if len(ts) > 1:
            steps = {b - a for a, b in zip(ts, ts[1:])}
            if any(s <= timedelta(0) for s in steps):
                raise EstimationError("timestamps must be strictly increasing")
            if len(steps) != 1:
                raise EstimationError("timestamps are not equally spaced (gap in series)")

    def __len__(self):
        return len(self.timestamps)

    @property
    def monitored_buses(self) -> list[str]:
        return [b for k, b in enumerate(self.bus_ids) if np.all(np.isfinite(self.v[:, k]))]

    @property
    def monitored_branches(self) -> list[str]:
        return [b for k, b in enumerate(self.branch_ids) if np.all(np.isfinite(self.i[:, k]))]

    @property
    def metered_buses(self) -> list[str]:
        """Buses with complete p and q series."""
        ok = np.all(np.isfinite(self.p), axis=0) & np.all(np.isfinite(self.q), axis=0)
        return [b for k, b in enumerate(self.bus_ids) if ok[k]]

    def tail(self, window: int) -> "MeasurementSeries":
        return MeasurementSeries(
            self.timestamps[-window:], self.bus_ids, self.branch_ids,
            self.v[-window:], self.p[-window:], self.q[-window:], self.i[-window:],
        )


@dataclass(frozen=True)
class PredictedState:
    bus_ids: list[str]
    branch_ids: list[str]
    v: np.ndarray
    i: np.ndarray
    p_slack: float
    q_slack: float


def estimate_from_measurements(
    series: MeasurementSeries,
    slack: str,
    window: int | None = None,
    ridge: float = 1e-6,
    controls: list[str] | None = None,
    second_order: bool = True,
) -> SensitivityMatrices:
    """Fit K_VP, K_VQ, K_IP, K_IQ and the slack-transfer rows over the last
    ``window`` samples.

    ``controls`` defaults to every metered non-slack bus.  Rows cover the
    monitored buses and branches only.  ``second_order`` adds the centred
    quadratic regressors when the window leaves enough degrees of freedom.
    """
    if controls is None:
        controls = [b for b in series.metered_buses if b != slack]
    if not controls:
        raise EstimationError("no metered injection buses to regress on")
    window = len(series) if window is None else window
    if window < 2 * len(controls) or window > len(series):
        raise EstimationError(
            f"insufficient samples: window {window} needs >= {2 * len(controls)} "
            f"and <= {len(series)} available"
        )
    if slack not in series.bus_ids:
        raise EstimationError(f"slack bus {slack!r} not in series")
    s = series.tail(window)
    bcol = {b: k for k, b in enumerate(s.bus_ids)}
    cidx = [bcol[b] for b in controls]
    raw = np.hstack([s.p[:, cidx], s.q[:, cidx]])
    X = np.diff(raw, axis=0)
    vb = s.monitored_buses
    ib = s.monitored_branches
    brcol = {b: k for k, b in enumerate(s.branch_ids)}
    ks = bcol[slack]
    Y = np.diff(
        np.hstack([
            s.v[:, [bcol[b] for b in vb]],
            s.i[:, [brcol[b] for b in ib]],
            s.p[:, [ks]],
            s.q[:, [ks]],
        ]),
        axis=0,
    )
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(Y)):
        raise EstimationError("non-finite measurements inside the window")
    quiet = np.flatnonzero(np.all(X == 0.0, axis=0))
    if len(quiet):
        name = (controls + controls)[quiet[0]]
        raise EstimationError(f"rank-deficient regressor: no excitation at bus {name!r}")
    nc2 = X.shape[1]
    if np.linalg.matrix_rank(X) < nc2 and ridge == 0.0:
        raise EstimationError("rank-deficient regressor (collinear injections); use ridge > 0")
    n_quad = nc2 * (nc2 + 1) // 2
    if second_order and window - 1 >= 2 * (nc2 + n_quad):
        centred = raw - raw.mean(axis=0)
        iu = np.triu_indices(nc2)
        quad = (centred[:, :, None] * centred[:, None, :])[:, iu[0], iu[1]]
        X = np.hstack([X, np.diff(quad, axis=0)])
    # column scaling keeps the ridge comparable across linear and quadratic terms
    scale = np.sqrt(np.mean(X**2, axis=0))
    Xs = X / scale
    beta = np.linalg.solve(Xs.T @ Xs + ridge * np.eye(X.shape[1]), Xs.T @ Y) / scale[:, None]
    resid = Y - X @ beta
    rms = np.sqrt(np.mean(resid**2, axis=0))
    beta = beta[:nc2]
    nc = len(controls)
    nv, ni = len(vb), len(ib)
    K = beta.T
    return SensitivityMatrices(
        bus_ids=vb,
        branch_ids=ib,
        control_ids=list(controls),
        k_vp=K[:nv, :nc],
        k_vq=K[:nv, nc:],
        k_ip=K[nv:nv + ni, :nc],
        k_iq=K[nv:nv + ni, nc:],
        k_sp=K[nv + ni, :nc],
        k_sq=K[nv + ni, nc:],
        k_qp=K[nv + ni + 1, :nc],
        k_qq=K[nv + ni + 1, nc:],
        residuals={"v": rms[:nv], "i": rms[nv:nv + ni], "slack": rms[nv + ni:]},
    )


def _vec(sens: SensitivityMatrices, d) -> np.ndarray:
    if d is None:
        return np.zeros(len(sens.control_ids))
    if isinstance(d, Mapping):
        out = np.zeros(len(sens.control_ids))
        for bus, val in d.items():
            out[sens.column(bus)] = val
        return out
    d = np.asarray(d, dtype=float)
    if d.shape != (len(sens.control_ids),):
        raise ValueError(f"perturbation must have {len(sens.control_ids)} entries, got shape {d.shape}")
    return d


def predict_state(sens: SensitivityMatrices, base: OperatingPoint, dp=None, dq=None) -> PredictedState:
    """V = V0 + K_VP dP + K_VQ dQ and I = I0 + K_IP dP + K_IQ dQ on monitored elements."""
    dp, dq = _vec(sens, dp), _vec(sens, dq)
    v0 = np.array([base.v[base.bus_ids.index(b)] for b in sens.bus_ids])
    i0 = np.array([base.i[base.branch_ids.index(b)] for b in sens.branch_ids])
    return PredictedState(
        bus_ids=sens.bus_ids,
        branch_ids=sens.branch_ids,
        v=v0 + sens.k_vp @ dp + sens.k_vq @ dq,
        i=i0 + sens.k_ip @ dp + sens.k_iq @ dq,
        p_slack=base.p_slack + float(sens.k_sp @ dp + sens.k_sq @ dq),
        q_slack=base.q_slack + float(sens.k_qp @ dp + sens.k_qq @ dq),
    )


def shifted_operating_point(sens: SensitivityMatrices, base: OperatingPoint, dp=None, dq=None) -> OperatingPoint:
    """``predict_state`` folded back into an OperatingPoint (unmonitored entries kept)."""
    st = predict_state(sens, base, dp, dq)
    v = np.array(base.v, dtype=float)
    i = np.array(base.i, dtype=float)
    for k, b in enumerate(st.bus_ids):
        v[base.bus_ids.index(b)] = st.v[k]
    for k, b in enumerate(st.branch_ids):
        i[base.branch_ids.index(b)] = st.i[k]
    return OperatingPoint(base.bus_ids, base.branch_ids, v, i, st.p_slack, st.q_slack, True, 0)


def operating_point_from_series(series: MeasurementSeries, slack: str, index: int = -1) -> OperatingPoint:
    k = series.bus_ids.index(slack)
    return OperatingPoint(
        bus_ids=list(series.bus_ids),
        branch_ids=list(series.branch_ids),
        v=np.array(series.v[index], dtype=float),
        i=np.array(series.i[index], dtype=float),
        p_slack=float(series.p[index, k]),
        q_slack=float(series.q[index, k]),
    )


def injections_from_series(series: MeasurementSeries, slack: str, index: int = -1) -> dict[str, complex]:
    return {
        b: complex(series.p[index, k], series.q[index, k])
        for k, b in enumerate(series.bus_ids)
        if b != slack
    }


def synthesize_measurements(
    model: GridModel,
    n_samples: int = 200,
    sigma: float = 0.01,
    seed: int = 0,
    inj: Mapping[str, complex] | None = None,
    start: datetime = datetime(2021, 6, 1, 10, 0),
    monitored_buses: list[str] | None = None,
    monitored_branches: list[str] | None = None,
    settle_last: bool = True,
) -> MeasurementSeries:
    """Jitter every non-slack injection by N(0, sigma) pu and record the
    power-flow response as a 10-minute measurement series.

    With ``settle_last`` the final sample is the unperturbed state, i.e. the
    series ends at the present operating point ``inj``."""
    rng = np.random.default_rng(seed)
    base = model.injections() if inj is None else dict(inj)
    ids = model.bus_ids
    slack = model.slack.id
    nb, nbr = len(ids), len(model.branches)
    v = np.full((n_samples, nb), np.nan)
    p = np.zeros((n_samples, nb))
    q = np.zeros((n_samples, nb))
    cur = np.full((n_samples, nbr), np.nan)
    mon_b = set(ids if monitored_buses is None else monitored_buses)
    mon_br = set(model.branch_ids if monitored_branches is None else monitored_branches)
    vb = [k for k, b in enumerate(ids) if b in mon_b]
    ib = [k for k, b in enumerate(model.branch_ids) if b in mon_br]
    for t in range(n_samples):
        s = np.array([base.get(b, 0j) for b in ids], dtype=complex)
        jitter = rng.normal(0.0, sigma, size=(nb, 2))
        if not (settle_last and t == n_samples - 1):
            s += jitter[:, 0] + 1j * jitter[:, 1]
        s[model.bus_index[slack]] = 0.0
        op = solve_bfs(model, s, tol=1e-12, max_iter=200)
        if not op.converged:
            raise EstimationError(f"synthetic sample {t} did not converge")
        v[t, vb] = op.v[vb]
        cur[t, ib] = op.i[ib]
        p[t] = s.real
        q[t] = s.imag
        p[t, model.bus_index[slack]] = op.p_slack
        q[t, model.bus_index[slack]] = op.q_slack
    ts = [start + k * CADENCE for k in range(n_samples)]
    return MeasurementSeries(ts, ids, model.branch_ids, v, p, q, cur)


def write_measurements_csv(series: MeasurementSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "element_id", "kind", "value_pu"])
    for t, ts in enumerate(series.timestamps):
        stamp = ts.isoformat()
        for k, b in enumerate(series.bus_ids):
            for kind, arr in (("v", series.v), ("p", series.p), ("q", series.q)):
                if np.isfinite(arr[t, k]):
                    w.writerow([stamp, b, kind, repr(float(arr[t, k]))])
        for k, br in enumerate(series.branch_ids):
            if np.isfinite(series.i[t, k]):
                w.writerow([stamp, br, "i", repr(float(series.i[t, k]))])
    return buf.getvalue()


def read_measurements_csv(text: str, bus_ids: list[str] | None = None,
                          branch_ids: list[str] | None = None) -> MeasurementSeries:
    """Parse the long-format measurement CSV.  Element ids seen with kind
    v/p/q are buses, kind i are branches, unless explicit id lists are given."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(rows[0]) != {"timestamp", "element_id", "kind", "value_pu"}:
        raise EstimationError("measurement CSV header must be timestamp,element_id,kind,value_pu")
    stamps = sorted({r["timestamp"] for r in rows}, key=datetime.fromisoformat)
    tindex = {s: k for k, s in enumerate(stamps)}
    if bus_ids is None:
        bus_ids = list(dict.fromkeys(r["element_id"] for r in rows if r["kind"] in "vpq"))
    if branch_ids is None:
        branch_ids = list(dict.fromkeys(r["element_id"] for r in rows if r["kind"] == "i"))
    bi = {b: k for k, b in enumerate(bus_ids)}
    ri = {b: k for k, b in enumerate(branch_ids)}
    T = len(stamps)
    arrs = {k: np.full((T, len(bus_ids)), np.nan) for k in "vpq"}
    arrs["i"] = np.full((T, len(branch_ids)), np.nan)
    for r in rows:
        kind = r["kind"]
        if kind not in arrs:
            raise EstimationError(f"unknown measurement kind {kind!r}")
        col = (ri if kind == "i" else bi).get(r["element_id"])
        if col is None:
            continue
        arrs[kind][tindex[r["timestamp"]], col] = float(r["value_pu"])
    return MeasurementSeries(
        [datetime.fromisoformat(s) for s in stamps], list(bus_ids), list(branch_ids),
        arrs["v"], arrs["p"], arrs["q"], arrs["i"],
    )
