"""Exact reference solver: best-first branch-and-bound on the per-server relaxation.

Variables are ``A[i, j]`` (task ``j`` on server ``i``) for every pair that can
hold integrally: labels match, the task fits the server's remaining capacity
and the server still has room in the task's group. Node bounds come from the
LP relaxation, re-solved with a warm-started dual simplex after each bound
change. Only the priority objective is optimized; GPU penalties and boosts
are ranking devices of the heuristic and play no part here.
"""
from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import highspy
import numpy as np
import scipy.sparse as sp

from . import lpcore
from .model import EPS_CAP, PlacementProblem, eligibility_matrix

DEFAULT_CAP = 10_000
INT_TOL = 1e-6


class OracleSizeError(ValueError):
    """The instance has more binary variables than the oracle will accept."""

    def __init__(self, binaries: int, cap: int):
        super().__init__(f"instance has {binaries} binary variables (tasks x servers); "
                         f"the exact oracle is capped at {cap}")
        self.binaries = binaries
        self.cap = cap


@dataclass
class OracleResult:
    objective: float
    assignments: dict
    proven_optimal: bool
    nodes_explored: int
    wall_ms: float
    bound: float = math.inf
    root_bound: float = math.inf
    stats: dict = field(default_factory=dict)


@dataclass
class ServerLp:
    """Per-server relaxation plus the bookkeeping needed to branch on it."""

    lp: lpcore.LpInstance
    pair_server: np.ndarray
    pair_task: np.ndarray
    weights: np.ndarray
    columns: sp.csc_matrix = None
    symmetry_start: int = -1

    def __post_init__(self):
        if self.columns is None:
            self.columns = self.lp.G.tocsc()


def _symmetry_classes(problem: PlacementProblem) -> list:
    """Runs of interchangeable servers: same shape, same remaining capacity, same group counts."""
    cluster = problem.cluster
    key_of = {}
    for i in range(len(cluster)):
        key = (int(cluster.shape_of[i]), cluster.remaining[i].tobytes(),
               tuple(sorted((g, c) for g, c in cluster.group_counts[i].items() if c)))
        key_of.setdefault(key, []).append(i)
    return [idx for idx in key_of.values() if len(idx) > 1]


def build_server_lp(problem: PlacementProblem, symmetry: bool = True) -> ServerLp:
    """Rows: assignment per task, capacity per (server, resource), group per (group, server),
    then value-ordering rows between consecutive interchangeable servers."""
    cluster = problem.cluster
    tasks = problem.tasks
    t, s = len(tasks), len(cluster)
    r = len(problem.resources)
    demand = problem.demand_matrix()
    p = problem.priorities()

    ok = np.zeros((s, t), dtype=bool)
    if t and s:
        shape_ok = eligibility_matrix(problem)  # (t, shapes)
        ok = shape_ok[:, cluster.shape_of].T
        ok &= np.all(demand[None, :, :] <= cluster.remaining[:, None, :] + EPS_CAP, axis=2)
        for j, task in enumerate(tasks):
            if task.group is not None:
                limit = problem.groups[task.group].limit
                full = [cluster.group_counts[i].get(task.group, 0) >= limit for i in range(s)]
                ok[np.array(full, dtype=bool), j] = False
    pair_server, pair_task = np.nonzero(ok)
    n = pair_server.size
    cols = np.arange(n)

    rows, vals, colidx, h, tags = [pair_task], [np.ones(n)], [cols], [np.ones(t)], []
    tags += [("assignment", task.id) for task in tasks]
    for k in range(r):
        v = demand[pair_task, k]
        nz = v != 0
        rows.append(t + pair_server[nz] * r + k)
        vals.append(v[nz])
        colidx.append(cols[nz])
    h.append(cluster.remaining.reshape(-1) if s else np.zeros(0))
    tags += [("capacity", cluster.server_ids[i], kind.name) for i in range(s) for kind in problem.resources]
    nrows = t + s * r

    group_of = np.array([-1 if task.group is None else 0 for task in tasks])
    gids = sorted({task.group for task in tasks if task.group is not None})
    if gids:
        gix = {g: q for q, g in enumerate(gids)}
        group_of = np.array([-1 if task.group is None else gix[task.group] for task in tasks])
        sel = np.flatnonzero(group_of[pair_task] >= 0)
        keys = sorted(set(zip(group_of[pair_task[sel]].tolist(), pair_server[sel].tolist())))
        row_of = {key: nrows + q for q, key in enumerate(keys)}
        rows.append(np.array([row_of[(group_of[pair_task[c]], pair_server[c])] for c in sel], dtype=np.int64))
        vals.append(np.ones(sel.size))
        colidx.append(sel)
        gh = []
        for g, i in keys:
            gid = gids[g]
            gh.append(float(problem.groups[gid].limit - cluster.group_counts[i].get(gid, 0)))
            tags.append(("group", gid, cluster.server_ids[i]))
        h.append(np.array(gh))
        nrows += len(keys)

    symmetry_start = nrows
    if symmetry and n:
        # interchangeable servers can always be relabelled so their loads' values descend
        cols_of = [[] for _ in range(s)]
        for c in range(n):
            cols_of[pair_server[c]].append(c)
        for members in _symmetry_classes(problem):
            for a, b in zip(members[:-1], members[1:]):
                rows.append(np.full(len(cols_of[b]) + len(cols_of[a]), nrows))
                vals.append(np.concatenate([p[pair_task[cols_of[b]]], -p[pair_task[cols_of[a]]]]))
                colidx.append(np.array(cols_of[b] + cols_of[a], dtype=np.int64))
                h.append(np.zeros(1))
                tags.append(("symmetry", cluster.server_ids[b], cluster.server_ids[a]))
                nrows += 1

    h = np.concatenate(h) if h else np.zeros(0)
    G = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(colidx))),
                      shape=(nrows, n))
    weights = p[pair_task]
    return ServerLp(lpcore.LpInstance(weights, G, h, np.ones(n), tags), pair_server, pair_task, weights,
                   symmetry_start=symmetry_start)


def _round(model: ServerLp, x: np.ndarray, problem: PlacementProblem) -> np.ndarray:
    """Incumbent heuristic: commit pairs in order of LP value (then weight) while feasible."""
    lp = model.lp
    chosen = np.zeros(lp.num_vars)
    order = np.lexsort((-model.weights, -x))
    # symmetry rows only prune duplicates; any capacity-feasible packing is a valid incumbent
    limit = lp.h.copy()
    limit[model.symmetry_start:] = np.inf
    load = np.zeros(lp.num_rows)
    Gc = model.columns
    used_task = set()
    for c in order:
        j = int(model.pair_task[c])
        if j in used_task:
            continue
        start, end = Gc.indptr[c], Gc.indptr[c + 1]
        rws, vs = Gc.indices[start:end], Gc.data[start:end]
        if np.all(load[rws] + vs <= limit[rws] + EPS_CAP):
            load[rws] += vs
            chosen[c] = 1.0
            used_task.add(j)
    return chosen


def _assignments(model: ServerLp, chosen: np.ndarray, problem: PlacementProblem) -> dict:
    ids = problem.cluster.server_ids
    return {problem.tasks[int(model.pair_task[c])].id: ids[int(model.pair_server[c])]
            for c in np.flatnonzero(chosen > 0.5)}


ENGINES = ("highs", "bnb")


def solve_exact(problem: PlacementProblem, node_limit: int = 100_000, time_limit_ms: float = 60_000,
                cap: int = DEFAULT_CAP, engine: str = "highs", symmetry: Optional[bool] = None) -> OracleResult:
    """Maximize the summed priority of placed tasks exactly, or report how far the search got.

    ``engine="bnb"`` runs the best-first search in this module; ``"highs"``
    hands the same per-server model to the HiGHS MIP solver, whose cuts close
    bin-packing gaps that plain LP bounds cannot. Refuses
    (``OracleSizeError``) when ``tasks x servers`` exceeds ``cap``. The
    cluster is not modified.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown oracle engine {engine!r}")
    t0 = time.perf_counter()
    t, s = len(problem.tasks), len(problem.cluster)
    if t * s > cap:
        raise OracleSizeError(t * s, cap)
    if symmetry is None:
        # HiGHS detects symmetry itself and does better without the ordering rows
        symmetry = engine == "bnb"
    model = build_server_lp(problem, symmetry=symmetry)
    if model.lp.num_vars == 0:
        return OracleResult(0.0, {}, True, 0, (time.perf_counter() - t0) * 1e3, 0.0, 0.0)
    search = _branch_and_bound if engine == "bnb" else _highs_mip
    res = search(problem, model, node_limit, time_limit_ms, t0)
    res.stats.update(binary_vars=t * s, lp_vars=model.lp.num_vars, lp_rows=model.lp.num_rows, engine=engine)
    return res


def _integral(weights: np.ndarray) -> bool:
    return bool(np.all(np.equal(np.mod(weights, 1.0), 0.0)))


def _highs_mip(problem, model: ServerLp, node_limit, time_limit_ms, t0) -> OracleResult:
    lp = model.lp
    n = lp.num_vars
    h = lpcore.new_highs(tol=1e-9, method="simplex")
    h.setOptionValue("mip_rel_gap", 0.0)
    # with integer weights any gap below one already proves the incumbent
    h.setOptionValue("mip_abs_gap", 1.0 - 1e-6 if _integral(model.weights) else 1e-9)
    h.setOptionValue("mip_max_nodes", int(node_limit))
    h.setOptionValue("time_limit", max(time_limit_ms - (time.perf_counter() - t0) * 1e3, 1.0) / 1e3)
    h.passModel(lpcore._highs_model(lp))
    h.changeColsIntegrality(n, np.arange(n, dtype=np.int32), np.full(n, highspy.HighsVarType.kInteger))
    h.run()
    status = h.getModelStatus()
    info = h.getInfo()
    chosen = np.zeros(n)
    proven = status == highspy.HighsModelStatus.kOptimal
    if h.getSolution().value_valid:
        raw = np.rint(np.asarray(h.getSolution().col_value, dtype=float))
        chosen = _repair(model, raw)
        proven = proven and bool(np.array_equal(chosen, raw))
    obj = float(model.weights @ chosen)
    bound = -float(info.mip_dual_bound) if np.isfinite(info.mip_dual_bound) else math.inf
    wall = (time.perf_counter() - t0) * 1e3
    root = lpcore.solve(lp, tol=1e-9, method="simplex")
    return OracleResult(obj, _assignments(model, chosen, problem), proven, int(info.mip_node_count), wall,
                        obj if proven else max(obj, bound), root.primal_objective)


def _repair(model: ServerLp, chosen: np.ndarray) -> np.ndarray:
    """Drop pairs that break a row by more than the capacity slack (solver tolerance leftovers)."""
    lp = model.lp
    limit = lp.h.copy()
    limit[model.symmetry_start:] = np.inf
    out = np.zeros_like(chosen)
    load = np.zeros(lp.num_rows)
    Gc = model.columns
    for c in np.flatnonzero(chosen > 0.5):
        rws, vs = Gc.indices[Gc.indptr[c]:Gc.indptr[c + 1]], Gc.data[Gc.indptr[c]:Gc.indptr[c + 1]]
        if np.all(load[rws] + vs <= limit[rws] + EPS_CAP):
            load[rws] += vs
            out[c] = 1.0
    return out


def _branch_and_bound(problem, model: ServerLp, node_limit, time_limit_ms, t0) -> OracleResult:
    """Best-first search; ties go to the deeper node, and the up-branch is explored first."""
    lp = model.lp
    n = lp.num_vars
    t = len(problem.tasks)
    integral_obj = _integral(model.weights)

    def prunable(bound: float, incumbent: float) -> bool:
        if integral_obj:
            return math.floor(bound + INT_TOL) <= incumbent + INT_TOL
        return bound <= incumbent + INT_TOL * (1.0 + abs(incumbent))

    h = lpcore.new_highs(tol=1e-9, method="simplex")
    h.passModel(lpcore._highs_model(lp))
    lower, upper = np.zeros(n), np.ones(n)
    row_lo = np.full(t, -highspy.kHighsInf)
    cols_of_task = [np.flatnonzero(model.pair_task == j) for j in range(t)]

    def solve_node(node):
        fix, placed = node
        want_lo, want_hi = np.zeros(n), np.ones(n)
        for c, v in fix.items():
            want_lo[c] = want_hi[c] = v
        diff = np.flatnonzero((want_lo != lower) | (want_hi != upper))
        if diff.size:
            h.changeColsBounds(diff.size, diff.astype(np.int32), want_lo[diff], want_hi[diff])
            lower[diff], upper[diff] = want_lo[diff], want_hi[diff]
        want_row = np.full(t, -highspy.kHighsInf)
        want_row[list(placed)] = 1.0
        diff = np.flatnonzero(want_row != row_lo)
        if diff.size:
            h.changeRowsBounds(diff.size, diff.astype(np.int32), want_row[diff], np.ones(diff.size))
            row_lo[diff] = want_row[diff]
        h.run()
        status = h.getModelStatus()
        if status == highspy.HighsModelStatus.kInfeasible:
            return None
        if status != highspy.HighsModelStatus.kOptimal:
            raise RuntimeError(f"node relaxation failed: {status}")
        sol = h.getSolution()
        x = np.clip(np.asarray(sol.col_value, dtype=float), want_lo, want_hi)
        return -float(h.getInfo().objective_function_value), x, np.asarray(sol.col_dual, dtype=float)

    best_obj = 0.0
    best = np.zeros(n)
    nodes = 0
    seq = 0
    heap = []

    root_node = ({}, frozenset())
    root = solve_node(root_node)
    nodes += 1
    if root is None:
        raise RuntimeError("per-server relaxation is infeasible")
    root_bound = root[0]
    heapq.heappush(heap, (-root_bound, 0, seq, root_node, root))
    proven = True
    while heap:
        if nodes >= node_limit or (time.perf_counter() - t0) * 1e3 > time_limit_ms:
            proven = False
            break
        neg_bound, neg_depth, _, node, solved = heapq.heappop(heap)
        if prunable(-neg_bound, best_obj):
            continue
        if solved is None:
            solved = solve_node(node)
            nodes += 1
            if solved is None:
                continue
        bound, x, dj = solved
        if prunable(bound, best_obj):
            continue
        frac = np.abs(x - np.rint(x))
        if frac.max() <= INT_TOL:
            cand = np.rint(x)
            val = float(model.weights @ cand)
            if val > best_obj + 1e-12:
                best_obj, best = val, cand
            continue
        heur = _round(model, x, problem)
        val = float(model.weights @ heur)
        if val > best_obj + 1e-12:
            best_obj, best = val, heur
            if prunable(bound, best_obj):
                continue
        fix, placed = node
        # reduced-cost fixing: flipping a nonbasic variable costs at least |dj| of bound
        inherited = dict(fix)
        for q in np.flatnonzero(np.abs(dj) > INT_TOL):
            q = int(q)
            if q not in fix and frac[q] <= INT_TOL and prunable(bound - abs(dj[q]) + INT_TOL, best_obj):
                inherited[q] = float(np.rint(x[q]))
        # decide which tasks go in first, then where they go
        y = np.bincount(model.pair_task, weights=x, minlength=t)
        yfrac = np.abs(y - np.rint(y))
        if yfrac.max() > INT_TOL:
            j = int(np.argmax(yfrac))
            down = dict(inherited)
            down.update((int(c), 0.0) for c in cols_of_task[j])
            children = [(inherited, placed | {j}), (down, placed)]
        else:
            c = int(np.argmax(frac))
            children = [({**inherited, c: v}, placed) for v in (1.0, 0.0)]
        depth = -neg_depth + 1
        for child in children:
            seq += 1
            heapq.heappush(heap, (-bound, -depth, seq, child, None))

    remaining_bound = max((-item[0] for item in heap), default=best_obj)
    bound = best_obj if proven else max(best_obj, remaining_bound)
    wall = (time.perf_counter() - t0) * 1e3
    return OracleResult(best_obj, _assignments(model, best, problem), proven, nodes, wall, bound, root_bound)
