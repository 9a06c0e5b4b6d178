"""Backward/forward sweep power flow for radial feeders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .grid import GridModel

__all__ = [
    "OperatingPoint",
    "SensitivityMatrices",
    "ConvergenceError",
    "injection_vector",
    "solve_bfs",
    "losses",
    "energy_kwh",
    "finite_diff_sensitivities",
]


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OperatingPoint:
    bus_ids: list[str]
    branch_ids: list[str]
    v: np.ndarray  # |V| per bus, pu (NaN where unknown)
    i: np.ndarray  # sending-end |I| per branch, pu
    p_slack: float  # transformer/slack transfer into the grid, pu
    q_slack: float
    converged: bool = True
    iterations: int = 0
    v_complex: np.ndarray | None = None
    i_complex: np.ndarray | None = None  # oriented parent -> child

    def v_of(self, bus: str) -> float:
        return float(self.v[self.bus_ids.index(bus)])

    def i_of(self, branch: str) -> float:
        return float(self.i[self.branch_ids.index(branch)])


@dataclass(frozen=True)
class SensitivityMatrices:
    """Linear response of monitored voltages, currents and slack transfer to
    nodal injections.  Rows follow ``bus_ids``/``branch_ids``, columns follow
    ``control_ids``."""

    bus_ids: list[str]
    branch_ids: list[str]
    control_ids: list[str]
    k_vp: np.ndarray
    k_vq: np.ndarray
    k_ip: np.ndarray
    k_iq: np.ndarray
    # slack transfer rows: d p_slack / d P, d p_slack / d Q, d q_slack / d P, d q_slack / d Q
    k_sp: np.ndarray
    k_sq: np.ndarray
    k_qp: np.ndarray
    k_qq: np.ndarray
    residuals: dict[str, np.ndarray] | None = None

    def column(self, bus: str) -> int:
        return self.control_ids.index(bus)


def injection_vector(model: GridModel, inj: Mapping[str, complex] | np.ndarray | None) -> np.ndarray:
    """Complex injection per bus in model order (generation positive)."""
    if inj is None:
        inj = model.injections()
    if isinstance(inj, Mapping):
        s = np.zeros(len(model.buses), dtype=complex)
        for bus, val in inj.items():
            s[model.bus_index[bus]] = complex(val)
        return s
    s = np.asarray(inj, dtype=complex)
    if s.shape != (len(model.buses),):
        raise ValueError(f"injection vector must have {len(model.buses)} entries")
    return s


def solve_bfs(
    model: GridModel,
    inj: Mapping[str, complex] | np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    v_slack: float = 1.0,
) -> OperatingPoint:
    """Constant-power backward/forward sweep.

    ``inj`` maps bus id to complex injection (pu, generation positive); the
    slack entry is ignored.  Defaults to the model's stored loads and DER
    outputs.  Returns ``converged=False`` with the last iterate when the
    mismatch stays above ``tol`` or the voltage collapses.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = injection_vector(model, inj)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("non-finite injection")
    topo = model.topology
    idx = model.bus_index
    order = [idx[b] for b in topo.order]
    root = order[0]
    s[root] = 0.0
    n = len(model.buses)
    parent = np.full(n, -1)
    pbranch = np.full(n, -1)
    for bus, br in topo.parent_branch.items():
        parent[idx[bus]] = idx[topo.parent_bus[bus]]
        pbranch[idx[bus]] = model.branch_index[br]
    z = np.array([complex(br.r, br.x) for br in model.branches])
    children_br = [[pbranch[idx[c]] for c in topo.children[b.id]] for b in model.buses]

    V = np.full(n, complex(v_slack))
    J = np.zeros(len(model.branches), dtype=complex)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        draw = -np.conj(s / V)  # current drawn from the network at each bus
        for k in reversed(order[1:]):
            J[pbranch[k]] = draw[k] + sum(J[c] for c in children_br[k])
        for k in order[1:]:
            V[k] = V[parent[k]] - z[pbranch[k]] * J[pbranch[k]]
        if not np.all(np.isfinite(V)) or np.min(np.abs(V)) < 0.2 * v_slack:
            break
        # mismatch with the refreshed voltages
        net_out = np.array([sum(J[c] for c in children_br[k]) for k in range(n)], dtype=complex)
        nonroot = parent >= 0
        net_out[nonroot] -= J[pbranch[nonroot]]
        mismatch = s - V * np.conj(net_out)
        mismatch[root] = 0.0
        if np.max(np.abs(mismatch)) <= tol:
            converged = True
            break
    s_slack = V[root] * np.conj(sum((J[c] for c in children_br[root]), 0j))
    return OperatingPoint(
        bus_ids=model.bus_ids,
        branch_ids=model.branch_ids,
        v=np.abs(V),
        i=np.abs(J),
        p_slack=float(s_slack.real),
        q_slack=float(s_slack.imag),
        converged=converged,
        iterations=it,
        v_complex=V.copy(),
        i_complex=J.copy(),
    )


def losses(model: GridModel, op: OperatingPoint) -> float:
    """Active losses sum(r * |I|^2), per-unit."""
    r = np.array([br.r for br in model.branches])
    return float(np.sum(r * op.i**2))


def energy_kwh(loss_pu: float, s_base_mva: float, hours: float) -> float:
    return loss_pu * s_base_mva * 1000.0 * hours


def finite_diff_sensitivities(
    model: GridModel,
    inj: Mapping[str, complex] | np.ndarray | None = None,
    h: float = 1e-5,
    controls: list[str] | None = None,
    tol: float = 1e-10,
) -> SensitivityMatrices:
    """Central-difference sensitivities of |V|, |I| and slack transfer.

    Columns default to every bus; the slack column is identically zero since
    its injection is not an independent input.
    """
    s0 = injection_vector(model, inj)
    controls = model.bus_ids if controls is None else list(controls)
    slack = model.slack.id
    nb, nbr, nc = len(model.buses), len(model.branches), len(controls)
    out = {k: np.zeros((nb, nc)) for k in ("vp", "vq")}
    out.update({k: np.zeros((nbr, nc)) for k in ("ip", "iq")})
    srow = {k: np.zeros(nc) for k in ("sp", "sq", "qp", "qq")}
    for c, bus in enumerate(controls):
        if bus == slack:
            continue
        k = model.bus_index[bus]
        for kind, step in (("p", h), ("q", 1j * h)):
            ops = []
            for sign in (1.0, -1.0):
                s = s0.copy()
                s[k] += sign * step
                op = solve_bfs(model, s, tol=tol, max_iter=500)
                if not op.converged:
                    raise ConvergenceError(f"perturbed case at bus {bus!r} did not converge")
                ops.append(op)
            up, dn = ops
            out["v" + kind][:, c] = (up.v - dn.v) / (2 * h)
            out["i" + kind][:, c] = (up.i - dn.i) / (2 * h)
            srow["s" + kind][c] = (up.p_slack - dn.p_slack) / (2 * h)
            srow["q" + kind][c] = (up.q_slack - dn.q_slack) / (2 * h)
    return SensitivityMatrices(
        bus_ids=model.bus_ids,
        branch_ids=model.branch_ids,
        control_ids=controls,
        k_vp=out["vp"],
        k_vq=out["vq"],
        k_ip=out["ip"],
        k_iq=out["iq"],
        k_sp=srow["sp"],
        k_sq=srow["sq"],
        k_qp=srow["qp"],
        k_qq=srow["qq"],
    )
