"""Conic program container and the solver contract used by both the LV LPs
and the MV second-order-cone programs.

Backed by Clarabel (interior point).  Linear programs go through the same
path with an empty cone list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

__all__ = ["ConicProgram", "ProgramBuilder", "SolveResult", "ProgramError", "solve", "residuals", "dump_program"]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERIC_FAILURE = "numeric_failure"


class ProgramError(ValueError):
    pass


@dataclass(frozen=True)
class ConicProgram:
    """minimize c'x + c0  s.t.  A x = b,  G x <= h,  lb <= x <= ub,
    and for every cone tuple (a, b, x1..xk):  x_a * x_b >= sum x_i^2.

    The ``*_unc`` matrices carry the coefficient multiplying ``level * w_k``
    for uncertain injection k (see ``mvopf.robustify``); they are inert for
    plain LPs.
    """

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    cones: tuple[tuple[int, ...], ...] = ()
    c0: float = 0.0
    names: tuple[str, ...] = ()
    # uncertainty bookkeeping
    unc_ids: tuple[str, ...] = ()
    eq_unc: sp.csr_matrix | None = None
    ineq_unc: sp.csr_matrix | None = None
    ineq_mediated: np.ndarray | None = None  # rows whose w-dependence is a linear surrogate
    h_nominal: np.ndarray | None = None
    level: float = 0.0
    budget: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return len(self.c)

    def replace(self, **changes) -> "ConicProgram":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        n = self.n
        if self.A.shape[1] != n or self.G.shape[1] != n:
            raise ProgramError("constraint matrix column count differs from variable count")
        if self.A.shape[0] != len(self.b) or self.G.shape[0] != len(self.h):
            raise ProgramError("right-hand side length mismatch")
        if len(self.lb) != n or len(self.ub) != n:
            raise ProgramError("bound vector length mismatch")
        if np.any(self.lb > self.ub):
            k = int(np.argmax(self.lb > self.ub))
            raise ProgramError(f"inconsistent bounds on variable {k}")
        seen = set()
        for cone in self.cones:
            if len(cone) < 3:
                raise ProgramError(f"cone {cone} needs at least three members")
            if any(not 0 <= j < n for j in cone):
                raise ProgramError(f"cone {cone} references an invalid variable index")
            if len(set(cone)) != len(cone):
                raise ProgramError(f"cone {cone} repeats a variable")
            key = tuple(cone)
            if key in seen:
                raise ProgramError(f"duplicate cone membership {key}")
            seen.add(key)
        for arr in (self.c, self.b, self.h):
            if not np.all(np.isfinite(arr)):
                raise ProgramError("non-finite program data")


@dataclass(frozen=True)
class SolveResult:
    status: str
    x: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int = 0
    raw_status: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _as_rows(prog: ConicProgram):
    """Stack the program into Clarabel's  A x + s = b, s in K  form."""
    n = prog.n
    blocks, rhs, cones = [], [], []
    if prog.A.shape[0]:
        blocks.append(prog.A)
        rhs.append(prog.b)
        cones.append(clarabel.ZeroConeT(prog.A.shape[0]))
    ub_idx = np.flatnonzero(np.isfinite(prog.ub))
    lb_idx = np.flatnonzero(np.isfinite(prog.lb))
    lin = [prog.G]
    lin_rhs = [prog.h]
    if len(ub_idx):
        lin.append(sp.csr_matrix((np.ones(len(ub_idx)), (np.arange(len(ub_idx)), ub_idx)), shape=(len(ub_idx), n)))
        lin_rhs.append(prog.ub[ub_idx])
    if len(lb_idx):
        lin.append(sp.csr_matrix((-np.ones(len(lb_idx)), (np.arange(len(lb_idx)), lb_idx)), shape=(len(lb_idx), n)))
        lin_rhs.append(-prog.lb[lb_idx])
    n_lin = sum(m.shape[0] for m in lin)
    if n_lin:
        blocks.extend(lin)
        rhs.extend(lin_rhs)
        cones.append(clarabel.NonnegativeConeT(n_lin))
    for cone in prog.cones:
        a, b, *rest = cone
        rows, cols, vals = [0, 0, 1, 1], [a, b, a, b], [1.0, 1.0, 1.0, -1.0]
        for k, j in enumerate(rest):
            rows.append(2 + k)
            cols.append(j)
            vals.append(2.0)
        # s = M x must lie in the SOC, so A = -M and b = 0
        blocks.append(sp.csr_matrix((-np.array(vals), (rows, cols)), shape=(2 + len(rest), n)))
        rhs.append(np.zeros(2 + len(rest)))
        cones.append(clarabel.SecondOrderConeT(2 + len(rest)))
    if not blocks:
        return sp.csc_matrix((0, n)), np.zeros(0), []
    return sp.vstack(blocks).tocsc(), np.concatenate(rhs), cones


def residuals(prog: ConicProgram, x: np.ndarray) -> float:
    """Largest primal infeasibility of ``x`` by direct substitution."""
    worst = 0.0
    if prog.A.shape[0]:
        worst = max(worst, float(np.max(np.abs(prog.A @ x - prog.b))))
    if prog.G.shape[0]:
        worst = max(worst, float(np.max(prog.G @ x - prog.h, initial=0.0)))
    worst = max(worst, float(np.max(prog.lb - x, initial=0.0)), float(np.max(x - prog.ub, initial=0.0)))
    for a, b, *rest in prog.cones:
        worst = max(worst, -x[a], -x[b], float(sum(x[j] ** 2 for j in rest) - x[a] * x[b]))
    return worst


def solve(prog: ConicProgram, tol_feas: float = 1e-8, tol_gap: float = 1e-8, max_iter: int = 200) -> SolveResult:
    prog.validate()
    n = prog.n
    if n == 0:
        ok = np.all(prog.b == 0) and np.all(prog.h >= 0)
        return SolveResult(OPTIMAL if ok else INFEASIBLE, np.zeros(0), prog.c0, 0.0, 0.0, 0.0)
    A, b, cones = _as_rows(prog)
    P = sp.csc_matrix((n, n))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = tol_feas
    settings.tol_gap_abs = tol_gap
    settings.tol_gap_rel = tol_gap
    settings.max_iter = max_iter
    settings.max_threads = 1
    solver = clarabel.DefaultSolver(P, np.asarray(prog.c, float), A, b, cones, settings)
    sol = solver.solve()
    x = np.array(sol.x)
    raw = str(sol.status).split(".")[-1]
    st = sol.status
    if st == clarabel.SolverStatus.Solved:
        status = OPTIMAL
    elif st in (clarabel.SolverStatus.PrimalInfeasible, clarabel.SolverStatus.AlmostPrimalInfeasible):
        status = INFEASIBLE
    elif st in (clarabel.SolverStatus.DualInfeasible, clarabel.SolverStatus.AlmostDualInfeasible):
        status = UNBOUNDED
    else:
        status = NUMERIC_FAILURE
    obj = float(prog.c @ x) + prog.c0 if len(x) == n else float("nan")
    gap = abs(sol.obj_val - sol.obj_val_dual) / max(1.0, abs(sol.obj_val))
    return SolveResult(status, x, obj, float(sol.r_prim), float(sol.r_dual), float(gap), int(sol.iterations), raw)


def dump_program(prog: ConicProgram) -> str:
    """Line-oriented text dump for cross-checking with external solvers.

    ``obj j:c ...``, ``eq j:a ... = b``, ``le j:a ... <= h``,
    ``bnd j lb ub`` and ``rsoc a b x1 ...`` lines, one item per line.
    """
    out = [f"vars {prog.n}", f"const {float(prog.c0)!r}"]
    out.append("obj " + " ".join(f"{j}:{float(v)!r}" for j, v in enumerate(prog.c) if v != 0))
    for tag, M, rhs, op in (("eq", prog.A, prog.b, "="), ("le", prog.G, prog.h, "<=")):
        M = M.tocsr()
        for r in range(M.shape[0]):
            lo, hi = M.indptr[r], M.indptr[r + 1]
            terms = " ".join(f"{int(j)}:{float(v)!r}" for j, v in zip(M.indices[lo:hi], M.data[lo:hi]))
            out.append(f"{tag} {terms} {op} {float(rhs[r])!r}")
    for j in range(prog.n):
        if np.isfinite(prog.lb[j]) or np.isfinite(prog.ub[j]):
            out.append(f"bnd {j} {float(prog.lb[j])!r} {float(prog.ub[j])!r}")
    for cone in prog.cones:
        out.append("rsoc " + " ".join(str(j) for j in cone))
    return "\n".join(out) + "\n"


class ProgramBuilder:
    """Incremental assembly of a ``ConicProgram`` from sparse rows."""

    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.c: dict[int, float] = {}
        self.eq: list[tuple[dict[int, float], float]] = []
        self.le: list[tuple[dict[int, float], float]] = []
        self.eq_unc: list[dict[int, float]] = []
        self.le_unc: list[dict[int, float]] = []
        self.le_mediated: list[bool] = []
        self.cones: list[tuple[int, ...]] = []
        self.eq_labels: list[str] = []
        self.le_labels: list[str] = []

    def var(self, name: str, lb: float = -np.inf, ub: float = np.inf) -> int:
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        return len(self.names) - 1

    def cost(self, j: int, coef: float) -> None:
        self.c[j] = self.c.get(j, 0.0) + coef

    def add_eq(self, terms: dict[int, float], rhs: float, unc: dict[int, float] | None = None,
               label: str = "") -> int:
        self.eq.append((terms, rhs))
        self.eq_unc.append(unc or {})
        self.eq_labels.append(label)
        return len(self.eq) - 1

    def add_le(self, terms: dict[int, float], rhs: float, unc: dict[int, float] | None = None,
               mediated: bool = False, label: str = "") -> int:
        self.le.append((terms, rhs))
        self.le_unc.append(unc or {})
        self.le_mediated.append(mediated)
        self.le_labels.append(label)
        return len(self.le) - 1

    def add_cone(self, *members: int) -> None:
        self.cones.append(tuple(members))

    @staticmethod
    def _matrix(rows, n):
        data, ri, ci = [], [], []
        for r, terms in enumerate(rows):
            for j, v in terms.items():
                ri.append(r)
                ci.append(j)
                data.append(v)
        return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))

    def build(self, unc_ids=(), meta=None) -> ConicProgram:
        n = len(self.names)
        c = np.zeros(n)
        for j, v in self.c.items():
            c[j] = v
        A = self._matrix([t for t, _ in self.eq], n)
        G = self._matrix([t for t, _ in self.le], n)
        h = np.array([r for _, r in self.le], dtype=float)
        nu = len(unc_ids)
        return ConicProgram(
            c=c,
            A=A,
            b=np.array([r for _, r in self.eq], dtype=float),
            G=G,
            h=h,
            lb=np.array(self.lb, dtype=float),
            ub=np.array(self.ub, dtype=float),
            cones=tuple(self.cones),
            names=tuple(self.names),
            unc_ids=tuple(unc_ids),
            eq_unc=self._matrix(self.eq_unc, nu),
            ineq_unc=self._matrix(self.le_unc, nu),
            ineq_mediated=np.array(self.le_mediated, dtype=bool),
            h_nominal=h.copy(),
            meta={"eq_labels": tuple(self.eq_labels), "le_labels": tuple(self.le_labels), **(meta or {})},
        )
