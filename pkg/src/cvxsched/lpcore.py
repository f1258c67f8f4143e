"""Bounded-variable LP solves with row duals.

Problems are stated as ``max c.x  s.t.  G x <= h,  0 <= x <= u`` and handed to
HiGHS. Whatever the backend reports, the returned duals are cleaned into a
certificate: row duals are clipped at zero and the upper-bound duals are
recomputed as ``mu = max(0, c - G^T y)`` so dual feasibility holds exactly and
the dual objective ``h.y + u.mu`` is an honest bound.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import highspy
import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"

# above this many nonzeros the interior-point solver beats dual simplex here
IPM_NNZ_THRESHOLD = 20_000


@dataclass
class LpInstance:
    c: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    u: np.ndarray = None
    row_tags: Sequence = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        G = sp.csr_matrix(self.G, dtype=float)
        G.sum_duplicates()
        G.sort_indices()
        self.G = G
        self.h = np.asarray(self.h, dtype=float)
        n = self.c.shape[0]
        self.u = np.ones(n) if self.u is None else np.broadcast_to(np.asarray(self.u, dtype=float), (n,)).copy()
        if self.row_tags is None:
            self.row_tags = list(range(self.G.shape[0]))
        if self.G.shape != (self.h.shape[0], n):
            raise ValueError(f"G has shape {self.G.shape}, expected ({self.h.shape[0]}, {n})")
        if len(self.row_tags) != self.h.shape[0]:
            raise ValueError("one row tag per row required")
        if not np.all(np.isfinite(self.h)):
            raise ValueError("row bounds must be finite")
        if np.any(self.u <= 0):
            raise ValueError("variable upper bounds must be positive")

    @property
    def num_vars(self) -> int:
        return self.c.shape[0]

    @property
    def num_rows(self) -> int:
        return self.h.shape[0]


@dataclass
class LpSolution:
    status: str
    x: np.ndarray
    y: np.ndarray
    primal_objective: float
    dual_objective: float
    mu: np.ndarray = None
    iterations: int = 0
    solve_ms: float = 0.0
    info: dict = field(default_factory=dict)


def _highs_model(lp: LpInstance) -> highspy.HighsLp:
    G = lp.G.tocsc()
    G.sort_indices()
    model = highspy.HighsLp()
    model.num_col_ = lp.num_vars
    model.num_row_ = lp.num_rows
    model.col_cost_ = -lp.c
    model.col_lower_ = np.zeros(lp.num_vars)
    model.col_upper_ = np.where(np.isfinite(lp.u), lp.u, highspy.kHighsInf)
    model.row_lower_ = np.full(lp.num_rows, -highspy.kHighsInf)
    model.row_upper_ = lp.h
    model.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    model.a_matrix_.start_ = G.indptr.astype(np.int32)
    model.a_matrix_.index_ = G.indices.astype(np.int32)
    model.a_matrix_.value_ = G.data
    return model


def new_highs(tol: float = 1e-6, method: str = "simplex", iter_limit: Optional[int] = None,
              crossover: bool = True) -> highspy.Highs:
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("threads", 1)
    h.setOptionValue("random_seed", 0)
    h.setOptionValue("solver", "ipm" if method == "ipm" else "simplex")
    if method == "ipm":
        h.setOptionValue("run_crossover", "on" if crossover else "off")
    ftol = max(min(tol * 1e-2, 1e-7), 1e-10)
    h.setOptionValue("primal_feasibility_tolerance", ftol)
    h.setOptionValue("dual_feasibility_tolerance", ftol)
    h.setOptionValue("ipm_optimality_tolerance", max(min(tol * 1e-2, 1e-8), 1e-12))
    if iter_limit is not None:
        h.setOptionValue("simplex_iteration_limit", int(iter_limit))
    return h


_STATUS = {
    highspy.HighsModelStatus.kUnknown: ITERATION_LIMIT,
    highspy.HighsModelStatus.kOptimal: OPTIMAL,
    highspy.HighsModelStatus.kModelEmpty: OPTIMAL,
    highspy.HighsModelStatus.kInfeasible: INFEASIBLE,
    highspy.HighsModelStatus.kUnbounded: UNBOUNDED,
    highspy.HighsModelStatus.kUnboundedOrInfeasible: UNBOUNDED,
    highspy.HighsModelStatus.kIterationLimit: ITERATION_LIMIT,
    highspy.HighsModelStatus.kTimeLimit: ITERATION_LIMIT,
}


def read_solution(h: highspy.Highs, lp: LpInstance, tol: float = 1e-6) -> LpSolution:
    """Pull primal/dual values out of a solved ``Highs`` object into a certificate."""
    status = _STATUS.get(h.getModelStatus(), ITERATION_LIMIT)
    info = h.getInfo()
    iters = int(info.simplex_iteration_count) + int(info.ipm_iteration_count) + int(info.crossover_iteration_count)
    n, mrows = lp.num_vars, lp.num_rows
    if status in (INFEASIBLE, UNBOUNDED):
        nan = float("nan")
        return LpSolution(status, np.zeros(n), np.zeros(mrows), nan, nan, np.zeros(n), iters)
    sol = h.getSolution()
    x = np.clip(np.asarray(sol.col_value, dtype=float), 0.0, lp.u) if n else np.zeros(0)
    # minimisation of -c: row duals are <= 0 on binding <= rows
    y = np.maximum(-np.asarray(sol.row_dual, dtype=float), 0.0) if mrows else np.zeros(0)
    res = make_certificate(lp, status, x, y, iters)
    res.info["highs_status"] = str(h.getModelStatus())
    if status != OPTIMAL and sol.value_valid and sol.dual_valid:
        # an unconverged interior point may still carry a certificate that is good enough
        v = certificate_violations(lp, res)
        if max(v["primal"], v["dual"], v["gap"]) <= tol:
            res.status = OPTIMAL
    return res


def make_certificate(lp: LpInstance, status: str, x: np.ndarray, y: np.ndarray, iters: int) -> LpSolution:
    reduced = lp.c - lp.G.T @ y
    mu = np.maximum(reduced, 0.0)
    finite_u = np.isfinite(lp.u)
    if np.any(mu[~finite_u] > 0):
        dual_obj = float("inf")
    else:
        dual_obj = float(lp.h @ y + lp.u[finite_u] @ mu[finite_u])
    return LpSolution(status, x, y, float(lp.c @ x), dual_obj, mu, iters)


def solve(lp: LpInstance, tol: float = 1e-6, iter_limit: Optional[int] = None,
          method: str = "auto", crossover: bool = True) -> LpSolution:
    """Solve ``lp`` and return primal values plus a cleaned dual certificate.

    ``method`` is ``"simplex"``, ``"ipm"`` or ``"auto"`` (simplex unless the
    constraint matrix is large). Infeasible/unbounded problems come back as a
    status, never as an exception.
    """
    if iter_limit is None:
        iter_limit = 50 * (lp.num_rows + lp.num_vars)
    if method == "auto":
        method = "ipm" if lp.G.nnz > IPM_NNZ_THRESHOLD else "simplex"
    t0 = time.perf_counter()
    if lp.num_vars == 0:
        infeasible = bool(np.any(lp.h < 0))
        res = LpSolution(INFEASIBLE if infeasible else OPTIMAL, np.zeros(0), np.zeros(lp.num_rows),
                         0.0, 0.0, np.zeros(0))
    else:
        h = new_highs(tol, method, iter_limit, crossover)
        h.passModel(_highs_model(lp))
        h.run()
        res = read_solution(h, lp, tol)
        res.info["method"] = method
    res.solve_ms = (time.perf_counter() - t0) * 1e3
    return res


def certificate_violations(lp: LpInstance, sol: LpSolution, tol: float = 1e-6) -> dict:
    """Worst violation of each optimality condition, already scaled by its tolerance reference.

    Keys: ``primal`` (bounds and rows), ``dual`` (sign of y and reduced costs),
    ``gap`` (relative duality gap) and ``slackness`` (per-row complementary
    slackness relative to ``1 + |h_i|``). A certificate passes when every
    value is ``<= tol``.
    """
    x, y = sol.x, sol.y
    Gx = lp.G @ x
    primal = max(
        float(np.max(-x, initial=0.0)),
        float(np.max(x - lp.u, initial=0.0)),
        float(np.max((Gx - lp.h) / (1.0 + np.abs(lp.h)), initial=0.0)),
    )
    mu = sol.mu if sol.mu is not None else np.maximum(lp.c - lp.G.T @ y, 0.0)
    dual = max(
        float(np.max(-y, initial=0.0)),
        float(np.max(-mu, initial=0.0)),
        float(np.max((lp.c - lp.G.T @ y - mu) / (1.0 + np.abs(lp.c)), initial=0.0)),
    )
    gap = abs(sol.primal_objective - sol.dual_objective) / (1.0 + abs(sol.primal_objective))
    slack = float(np.max(np.abs(y * (lp.h - Gx)) / (1.0 + np.abs(lp.h)), initial=0.0))
    return {"primal": primal, "dual": dual, "gap": gap, "slackness": slack}


def is_certified(lp: LpInstance, sol: LpSolution, tol: float = 1e-6) -> bool:
    return sol.status == OPTIMAL and all(v <= tol for v in certificate_violations(lp, sol, tol).values())
