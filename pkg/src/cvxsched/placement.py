"""Stage 2: price-driven greedy placement."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import EPS_CAP, MachineShape, PlacementProblem, Server, Task, eligibility_matrix, gpu_index
from .pricing import PriceTable, compute_prices

# random probes into a shape's server list before falling back to a full scan
MAX_PROBES = 16
MAX_FAILED = 32
UTILITY_DIGITS = 9


@dataclass
class UtilityRow:
    task_id: str
    utilities: dict
    best_shape: str
    best_utility: float


@dataclass
class PlacementResult:
    assignments: dict
    unplaced: set
    weighted_objective: float
    placement_rate: float
    timing: dict = field(default_factory=lambda: {"lp_ms": 0.0, "greedy_ms": 0.0})
    per_priority_rates: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    @property
    def solve_ms(self) -> float:
        return self.timing.get("lp_ms", 0.0) + self.timing.get("greedy_ms", 0.0)


def _is_gpu_task(task: Task, gk: Optional[int]) -> bool:
    return gk is not None and task.demand[gk] > 0


def net_utility(task: Task, shape: MachineShape, prices: PriceTable, options=None,
                gpu_dim: Optional[int] = None, priorities=None) -> float:
    """Priority (plus GPU boost) minus priced resource cost and surcharges.

    ``gpu_dim`` is the index of the GPU resource, if any. ``priorities`` is the
    batch used to resolve default GPU knobs; the task's own priority is used
    when omitted.
    """
    from .model import PricingOptions

    options = options or PricingOptions()
    _, sigma, beta = options.gpu_knobs([task.priority] if priorities is None else priorities)
    gpu_task = _is_gpu_task(task, gpu_dim)
    u = task.priority + (beta if gpu_task else 0.0)
    u -= float(np.dot(prices.prices_for(shape.id), task.demand))
    if shape.is_gpu and not gpu_task:
        u -= sigma
    if task.group is not None:
        u -= prices.group_price(task.group, shape.id)
    return u


def utility_matrix(problem: PlacementProblem, prices: PriceTable) -> np.ndarray:
    """``(t, shapes)`` net utilities over the full shape catalog; ineligible pairs are ``-inf``."""
    cluster = problem.cluster
    demand = problem.demand_matrix()
    p = problem.priorities()
    gpu_task = problem.gpu_tasks()
    _, sigma, beta = problem.options.gpu_knobs(p)
    lam = prices.matrix(cluster.shapes)
    is_gpu = np.array([s.is_gpu for s in cluster.shapes], dtype=bool)
    U = (p + beta * gpu_task)[:, None] - demand @ lam.T
    U = U - sigma * ((~gpu_task)[:, None] & is_gpu[None, :])
    if prices.group_prices:
        for j, task in enumerate(problem.tasks):
            if task.group is not None:
                U[j] -= [prices.group_price(task.group, s.id) for s in cluster.shapes]
    elig = eligibility_matrix(problem)
    if len(cluster):
        has_servers = np.bincount(cluster.shape_of, minlength=len(cluster.shapes)) > 0
        elig &= has_servers[None, :]
    else:
        elig[:] = False
    U[~elig] = -np.inf
    return U


def _normalized_demand(problem: PlacementProblem) -> np.ndarray:
    demand = problem.demand_matrix()
    pooled = problem.cluster.remaining.sum(axis=0) if len(problem.cluster) else np.zeros(demand.shape[1])
    scale = np.where(pooled > 0, pooled, np.inf)
    return (demand / scale).sum(axis=1)


def _quantize(problem: PlacementProblem, U: np.ndarray) -> np.ndarray:
    """Utilities rounded relative to the priority scale so solver roundoff ties."""
    p = problem.priorities()
    scale = float(np.abs(p).max()) if p.size else 1.0
    Q = np.full(U.shape, -np.inf)
    ok = np.isfinite(U)
    Q[ok] = np.round(U[ok] / (scale or 1.0), UTILITY_DIGITS)
    return Q


def _order(problem: PlacementProblem, Q: np.ndarray):
    """Indices of rankable tasks (best utility desc, priority desc, normalized demand asc, id)
    and indices of tasks with no eligible shape. ``Q`` is the quantized utility matrix."""
    best = Q.max(axis=1) if Q.shape[1] else np.full(Q.shape[0], -np.inf)
    ok = np.isfinite(best)
    p = problem.priorities()
    nd = _normalized_demand(problem)
    ids = [t.id for t in problem.tasks]
    order = sorted(np.flatnonzero(ok).tolist(), key=lambda j: (-best[j], -p[j], nd[j], ids[j]))
    return order, np.flatnonzero(~ok).tolist()


def _shape_order(q: np.ndarray) -> list:
    return sorted(np.flatnonzero(np.isfinite(q)).tolist(), key=lambda m: (-q[m], m))


def rank_tasks(problem: PlacementProblem, prices: PriceTable) -> tuple:
    """Rank tasks for greedy placement.

    Returns ``(rows, unplaceable)`` where ``rows`` is a list of
    :class:`UtilityRow` in placement order and ``unplaceable`` holds ids of
    tasks that have no eligible shape.
    """
    U = utility_matrix(problem, prices)
    Q = _quantize(problem, U)
    order, bad = _order(problem, Q)
    shapes = problem.cluster.shapes
    rows = []
    for j in order:
        finite = np.flatnonzero(np.isfinite(U[j]))
        m = _shape_order(Q[j])[0]
        rows.append(UtilityRow(problem.tasks[j].id, {shapes[k].id: float(U[j, k]) for k in finite},
                               shapes[m].id, float(U[j, m])))
    return rows, [problem.tasks[j].id for j in bad]


def feasible(server: Server, task: Task, groups: dict, shape: Optional[MachineShape] = None) -> bool:
    """Capacity, label and anti-affinity check for one server.

    Labels are checked only when ``shape`` (the server's shape) is supplied.
    """
    if np.any(np.asarray(task.demand) > server.remaining + EPS_CAP):
        return False
    if shape is not None and not task.required_labels <= shape.labels:
        return False
    if task.group is not None:
        limit = groups[task.group].limit
        if server.group_counts.get(task.group, 0) >= limit:
            return False
    return True


class _Uniforms:
    """Buffered uniform draws; keeps per-probe RNG overhead low."""

    def __init__(self, rng: np.random.Generator, size: int = 4096):
        self.rng = rng
        self.size = size
        self.buf = rng.random(size).tolist()
        self.pos = 0

    def index(self, n: int) -> int:
        if self.pos == self.size:
            self.buf = self.rng.random(self.size).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return min(int(u * n), n - 1)


class _ShapeState:
    __slots__ = ("servers", "max_rem", "failed")

    def __init__(self, servers: np.ndarray, remaining: np.ndarray):
        self.servers = servers
        self.max_rem = remaining[servers].max(axis=0) if servers.size else None
        # minimal demands that found no server in this shape; capacity only shrinks during a pass
        self.failed = None

    def dominated(self, d: np.ndarray) -> bool:
        return self.failed is not None and bool(np.any(np.all(d >= self.failed, axis=1)))

    def record_failure(self, d: np.ndarray):
        if self.failed is None:
            self.failed = d[None, :].copy()
            return
        keep = ~np.all(self.failed >= d, axis=1)
        self.failed = np.vstack([self.failed[keep][-(MAX_FAILED - 1):], d])


def greedy_place(problem: PlacementProblem, prices: PriceTable, seed: int = 0) -> PlacementResult:
    """Place tasks in ranked order, committing onto ``problem.cluster``.

    Each task tries its shapes by descending net utility; within a shape a
    feasible server is drawn uniformly at random (bounded random probing, then a
    scan in shuffled order). Tasks that fit nowhere stay unplaced.
    """
    t0 = time.perf_counter()
    cluster = problem.cluster
    tasks = problem.tasks
    Q = _quantize(problem, utility_matrix(problem, prices))
    order, bad = _order(problem, Q)
    rng = np.random.default_rng(seed)
    draws = _Uniforms(rng)
    remaining = cluster.remaining
    group_counts = cluster.group_counts
    states = [_ShapeState(cluster.servers_of_shape(m), remaining) for m in range(len(cluster.shapes))]
    demand = problem.demand_matrix()
    assignments = {}
    checks = 0
    scans = 0

    for j in order:
        task = tasks[j]
        d = demand[j]
        dm = d - EPS_CAP
        gid = task.group
        limit = problem.groups[gid].limit if gid is not None else 0
        shape_order = _shape_order(Q[j])
        chosen = -1
        for m in shape_order:
            st = states[m]
            n = st.servers.size
            if n == 0 or np.any(dm > st.max_rem):
                continue
            if st.dominated(d):
                continue
            for _ in range(MAX_PROBES):
                i = int(st.servers[draws.index(n)])
                checks += 1
                if np.all(remaining[i] >= dm) and (gid is None or group_counts[i].get(gid, 0) < limit):
                    chosen = i
                    break
            if chosen < 0:
                scans += 1
                perm = st.servers[rng.permutation(n)]
                rem = remaining[perm]
                st.max_rem = rem.max(axis=0)
                ok = np.flatnonzero(np.all(rem >= dm, axis=1))
                checks += n
                if ok.size == 0:
                    st.record_failure(d)
                for pos in ok:
                    i = int(perm[pos])
                    if gid is None or group_counts[i].get(gid, 0) < limit:
                        chosen = i
                        break
            if chosen >= 0:
                break
        if chosen < 0:
            continue
        row = remaining[chosen]
        row -= d
        np.maximum(row, 0.0, out=row)
        if gid is not None:
            group_counts[chosen][gid] = group_counts[chosen].get(gid, 0) + 1
        assignments[task.id] = cluster.server_ids[chosen]

    greedy_ms = (time.perf_counter() - t0) * 1e3
    result = summarize(tasks, assignments)
    result.timing = {"lp_ms": float(prices.meta.get("lp_ms", 0.0)), "greedy_ms": greedy_ms}
    result.counters = {"greedy_checks": checks, "full_scans": scans, "unplaceable": len(bad),
                       "lp_iterations": int(prices.meta.get("lp_iterations", 0))}
    return result


def summarize(tasks: Sequence[Task], assignments: dict) -> PlacementResult:
    """Objective, placement rate and per-priority rates for an assignment map."""
    placed = [t for t in tasks if t.id in assignments]
    unplaced = {t.id for t in tasks if t.id not in assignments}
    objective = float(sum(t.priority for t in placed))
    rate = len(placed) / len(tasks) if tasks else 0.0
    per = {}
    for t in tasks:
        tot, ok = per.get(t.priority, (0, 0))
        per[t.priority] = (tot + 1, ok + (t.id in assignments))
    per_rates = {p: ok / tot for p, (tot, ok) in sorted(per.items())}
    return PlacementResult(dict(assignments), unplaced, objective, rate, per_priority_rates=per_rates)


def schedule(problem: PlacementProblem, seed: Optional[int] = None) -> tuple:
    """Run both stages on ``problem`` (mutating its cluster). Returns ``(result, prices)``."""
    seed = problem.options.seed if seed is None else seed
    prices = compute_prices(problem)
    result = greedy_place(problem, prices, seed)
    return result, prices
