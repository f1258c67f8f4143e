"""Stage 1: shape-aggregated relaxation and shadow-price extraction."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import lpcore
from .model import EPS_CAP, MachineShape, PlacementProblem, aggregate_shapes, eligibility_matrix

GLOBAL_SHAPE = "*"


class PricingError(RuntimeError):
    """Stage 1 could not produce a valid price table."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


@dataclass
class RowIndex:
    """Origin of every LP row and column.

    ``tags[i]`` is ``("assignment", task_id)``, ``("capacity", shape_id,
    resource)`` or ``("group", group_id, shape_id)``. Column ``c`` is the
    fraction of task ``col_task[c]`` placed on LP shape ``col_shape[c]``.
    """

    tags: list
    shape_ids: list
    col_task: np.ndarray
    col_shape: np.ndarray
    capacity_rows: np.ndarray
    group_rows: dict = field(default_factory=dict)


@dataclass
class PriceTable:
    mode: str
    shape_prices: dict
    group_prices: Optional[dict] = None
    lp_objective: float = 0.0
    meta: dict = field(default_factory=dict)

    def prices_for(self, shape_id: str) -> np.ndarray:
        if self.mode == "global":
            return self.shape_prices[GLOBAL_SHAPE]
        return self.shape_prices[shape_id]

    def matrix(self, shapes) -> np.ndarray:
        """``(len(shapes), r)`` price matrix in the given shape order; unpriced shapes get zeros."""
        r = len(next(iter(self.shape_prices.values()))) if self.shape_prices else 0
        out = np.zeros((len(shapes), r))
        for m, shape in enumerate(shapes):
            sid = shape.id if isinstance(shape, MachineShape) else shape
            if self.mode == "global":
                out[m] = self.shape_prices[GLOBAL_SHAPE]
            elif sid in self.shape_prices:
                out[m] = self.shape_prices[sid]
        return out

    def group_price(self, group_id, shape_id) -> float:
        if not self.group_prices:
            return 0.0
        key = (group_id, GLOBAL_SHAPE if self.mode == "global" else shape_id)
        return self.group_prices.get(key, 0.0)

    def to_dict(self, resources) -> dict:
        names = [k.name for k in resources]
        out = {
            "mode": self.mode,
            "lp_objective": self.lp_objective,
            "shape_prices": {sid: dict(zip(names, map(float, vec))) for sid, vec in self.shape_prices.items()},
        }
        if self.group_prices is not None:
            out["group_prices"] = {f"{g}@{m}": float(v) for (g, m), v in sorted(self.group_prices.items())}
        return out


@dataclass
class _LpShapes:
    ids: list
    pooled: np.ndarray       # (M, r) pooled remaining capacity
    counts: np.ndarray       # servers per LP shape
    is_gpu: np.ndarray
    eligible: np.ndarray     # (t, M)
    members: list            # server indices per LP shape


def _lp_shapes(problem: PlacementProblem) -> _LpShapes:
    cluster = problem.cluster
    pooled = aggregate_shapes(cluster)
    if not pooled:
        raise PricingError("cluster has no servers; nothing to price")
    present = [m for m, s in enumerate(cluster.shapes) if s.id in pooled]
    opts = problem.options
    demand = problem.demand_matrix()
    t = len(problem.tasks)
    members = [cluster.servers_of_shape(m) for m in present]
    if opts.eligibility_filter:
        base = eligibility_matrix(problem)[:, present]
        # a task must fit on at least one server's remaining capacity, dimension by dimension
        fits = np.column_stack([
            np.all(demand <= cluster.remaining[idx].max(axis=0) + EPS_CAP, axis=1) for idx in members
        ]) if t else np.zeros((0, len(present)), dtype=bool)
        eligible = base & fits
    else:
        eligible = np.ones((t, len(present)), dtype=bool)

    if opts.mode == "shape":
        return _LpShapes(
            ids=[cluster.shapes[m].id for m in present],
            pooled=np.array([pooled[cluster.shapes[m].id][0] for m in present]),
            counts=np.array([pooled[cluster.shapes[m].id][1] for m in present]),
            is_gpu=np.array([cluster.shapes[m].is_gpu for m in present], dtype=bool),
            eligible=eligible,
            members=members,
        )
    return _LpShapes(
        ids=[GLOBAL_SHAPE],
        pooled=cluster.remaining.sum(axis=0)[None, :],
        counts=np.array([len(cluster)]),
        # the pooled pseudo-shape only counts as GPU-equipped if every shape is
        is_gpu=np.array([all(cluster.shapes[m].is_gpu for m in present)]),
        eligible=eligible.any(axis=1, keepdims=True),
        members=[np.arange(len(cluster))],
    )


def objective_coefficients(problem: PlacementProblem, is_gpu_shape: np.ndarray) -> np.ndarray:
    """``(t, M)`` per-pair objective: priority minus the penalty for CPU tasks on GPU shapes
    (plus the GPU boost when ``options.boost_in_lp``)."""
    p = problem.priorities()
    gpu_task = problem.gpu_tasks()
    rho, _, beta = problem.options.gpu_knobs(p)
    if not problem.options.boost_in_lp:
        beta = 0.0
    coef = (p + beta * gpu_task)[:, None] - rho * ((~gpu_task)[:, None] & is_gpu_shape[None, :])
    return coef


def build_relaxation(problem: PlacementProblem):
    """Assemble the shape-aggregated relaxation.

    Returns ``(LpInstance, RowIndex)``. Rows are, in order: one assignment row
    per task, one capacity row per (LP shape, resource), then the optional
    anti-affinity rows per (group, LP shape).
    """
    shapes = _lp_shapes(problem)
    demand = problem.demand_matrix()
    t, r = demand.shape[0], len(problem.resources)
    M = len(shapes.ids)
    coef = objective_coefficients(problem, shapes.is_gpu)

    col_task, col_shape = np.nonzero(shapes.eligible)
    n = col_task.size
    cols = np.arange(n)
    rows = [col_task]
    vals = [np.ones(n)]
    colidx = [cols]
    for k in range(r):
        v = demand[col_task, k]
        nz = v != 0
        rows.append(t + col_shape[nz] * r + k)
        vals.append(v[nz])
        colidx.append(cols[nz])
    h = [np.ones(t), shapes.pooled.reshape(-1)]
    tags = [("assignment", task.id) for task in problem.tasks]
    tags += [("capacity", sid, kind.name) for sid in shapes.ids for kind in problem.resources]
    capacity_rows = (t + np.arange(M * r)).reshape(M, r)

    group_rows = {}
    if problem.options.anti_affinity_in_lp and n:
        task_group = [task.group for task in problem.tasks]
        group_ids = sorted({g for g in task_group if g is not None})
        gid_of = {g: i for i, g in enumerate(group_ids)}
        col_group = np.array([gid_of.get(task_group[j], -1) if task_group[j] is not None else -1
                              for j in col_task], dtype=np.int64)
        grouped = col_group >= 0
        pairs = sorted(set(zip(col_group[grouped].tolist(), col_shape[grouped].tolist())))
        base = t + M * r
        row_of_pair = {}
        gh = []
        for off, (g, m) in enumerate(pairs):
            gid = group_ids[g]
            limit = problem.groups[gid].limit
            used = [problem.cluster.group_counts[i].get(gid, 0) for i in shapes.members[m]]
            gh.append(float(sum(max(limit - u, 0) for u in used)))
            row_of_pair[(g, m)] = base + off
            group_rows[(gid, shapes.ids[m])] = base + off
            tags.append(("group", gid, shapes.ids[m]))
        if pairs:
            sel = np.flatnonzero(grouped)
            rows.append(np.array([row_of_pair[(g, m)] for g, m in zip(col_group[sel], col_shape[sel])]))
            vals.append(np.ones(sel.size))
            colidx.append(sel)
            h.append(np.array(gh))

    h = np.concatenate(h)
    G = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(colidx))),
                      shape=(h.shape[0], n))
    lp = lpcore.LpInstance(coef[col_task, col_shape], G, h, np.ones(n), tags)
    idx = RowIndex(tags, list(shapes.ids), col_task, col_shape, capacity_rows, group_rows)
    return lp, idx


def extract_prices(sol: lpcore.LpSolution, idx: RowIndex, problem: PlacementProblem) -> PriceTable:
    """Read capacity (and group) duals into a :class:`PriceTable`."""
    tol = problem.options.lp_tolerance
    if sol.status != lpcore.OPTIMAL:
        raise PricingError(f"relaxation not solved to optimality: {sol.status}", sol.status)
    y = np.asarray(sol.y, dtype=float)
    if y.size and y.min() < -tol:
        worst = int(np.argmin(y))
        raise PricingError(f"dual {y[worst]:.3g} on row {idx.tags[worst]} violates the certificate")
    y = np.maximum(y, 0.0)
    shape_prices = {sid: y[idx.capacity_rows[m]].copy() for m, sid in enumerate(idx.shape_ids)}
    group_prices = None
    if problem.options.anti_affinity_in_lp:
        group_prices = {key: float(y[row]) for key, row in idx.group_rows.items()}
    return PriceTable(problem.options.mode, shape_prices, group_prices, float(sol.primal_objective))


def task_classes(lp: lpcore.LpInstance, idx: RowIndex, problem: PlacementProblem):
    """Label interchangeable tasks: equal demand, group, eligible shapes and objective row.

    Returns ``(label per task, representative task per class, class sizes)``.
    """
    t = len(problem.tasks)
    if t == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    M = len(idx.shape_ids)
    eligible = np.zeros((t, M))
    coef = np.zeros((t, M))
    eligible[idx.col_task, idx.col_shape] = 1.0
    coef[idx.col_task, idx.col_shape] = lp.c
    gid = {g: i for i, g in enumerate(sorted({task.group for task in problem.tasks if task.group is not None}))}
    group = np.array([gid.get(task.group, -1) for task in problem.tasks], dtype=float)
    feats = np.column_stack([problem.demand_matrix(), group, eligible, coef])
    _, rep, label, size = np.unique(feats, axis=0, return_index=True, return_inverse=True, return_counts=True)
    return label.reshape(-1), rep, size


def _solve_collapsed(lp: lpcore.LpInstance, idx: RowIndex, problem: PlacementProblem, tol: float):
    """Solve over task classes, then spread each class evenly over its members.

    Every member of a class sees the same dual constraint, so the class dual is
    a dual for each member and the expanded pair is optimal for the full LP.
    Returns ``None`` when no two tasks are interchangeable or the expanded
    certificate misses ``tol``, so the caller falls back to the full LP.
    """
    t = len(problem.tasks)
    label, rep, size = task_classes(lp, idx, problem)
    if rep.size == t:
        return None
    start = np.searchsorted(idx.col_task, np.arange(t + 1))
    cols = np.concatenate([np.arange(start[j], start[j + 1]) for j in rep])
    rows = np.concatenate([rep, np.arange(t, lp.num_rows)])
    col_size = size[label[idx.col_task[cols]]] if cols.size else np.zeros(0)
    small = lpcore.LpInstance(lp.c[cols], lp.G[rows][:, cols], np.concatenate([size, lp.h[t:]]).astype(float),
                              col_size.astype(float))
    sol = lpcore.solve(small, tol=tol, crossover=False)
    if sol.status != lpcore.OPTIMAL:
        return sol
    pos = np.full(lp.num_vars, -1, dtype=np.int64)
    pos[cols] = np.arange(cols.size)
    j = idx.col_task
    twin = start[rep[label[j]]] + (np.arange(lp.num_vars) - start[j])
    x = sol.x[pos[twin]] / size[label[j]]
    y = np.concatenate([sol.y[label], sol.y[rep.size:]])
    full = lpcore.make_certificate(lp, lpcore.OPTIMAL, np.clip(x, 0.0, lp.u), y, sol.iterations)
    full.solve_ms = sol.solve_ms
    full.info.update(sol.info, classes=int(rep.size))
    v = lpcore.certificate_violations(lp, full, tol)
    if max(v["primal"], v["dual"], v["gap"]) > tol:
        return None
    return full


def solve_relaxation(problem: PlacementProblem):
    lp, idx = build_relaxation(problem)
    tol = problem.options.lp_tolerance
    sol = _solve_collapsed(lp, idx, problem, tol) if problem.options.collapse_tasks else None
    if sol is None:
        # prices need not come from a vertex, so large solves skip crossover
        sol = lpcore.solve(lp, tol=tol, crossover=False)
    return lp, idx, sol


def compute_prices(problem: PlacementProblem) -> PriceTable:
    t0 = time.perf_counter()
    lp, idx, sol = solve_relaxation(problem)
    prices = extract_prices(sol, idx, problem)
    prices.meta.update(
        lp_ms=(time.perf_counter() - t0) * 1e3,
        solve_ms=sol.solve_ms,
        lp_iterations=sol.iterations,
        lp_vars=lp.num_vars,
        lp_rows=lp.num_rows,
        dual_objective=sol.dual_objective,
        task_classes=sol.info.get("classes", len(problem.tasks)),
    )
    return prices
