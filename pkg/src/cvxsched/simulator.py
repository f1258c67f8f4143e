"""Discrete-event replay of a task trace against a cluster.

Three event kinds share one heap ordered by ``(time, kind, seq)`` with
arrivals before completions before rounds, so a round at time ``t`` sees every
task that arrived at ``t`` and every server freed at ``t``. Rounds fire on the
fixed grid ``0, dt, 2*dt, ...`` and batch every pending task through the
two-stage pipeline.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import CPU, EPS_CAP, MEM, Cluster, PlacementProblem, PricingOptions, Task, eligibility_matrix
from .placement import greedy_place
from .pricing import compute_prices

log = logging.getLogger(__name__)

ARRIVAL, COMPLETION, ROUND = 0, 1, 2
EVENT_NAMES = {ARRIVAL: "arrival", COMPLETION: "completion", ROUND: "round"}

ROUND_COLUMNS = ("round", "round_time", "pending_count", "placed_count", "queue_depth_after",
                 "lp_ms", "greedy_ms", "lp_iterations", "greedy_checks", "solved")
TASK_COLUMNS = ("task_id", "priority", "arrival_time", "status", "placement_time", "wait_s",
                "completion_time", "server_id")


@dataclass
class SimConfig:
    round_interval: float = 1.0
    options: PricingOptions = field(default_factory=PricingOptions)
    seed: int = 0
    horizon: Optional[float] = None
    # wall-clock fields are zeroed when off, which makes reports byte-reproducible
    record_timing: bool = True
    audit: bool = False

    def __post_init__(self):
        if not self.round_interval > 0:
            raise ValueError("round_interval must be positive")
        if self.horizon is not None and self.horizon < 0:
            raise ValueError("horizon must be nonnegative")


@dataclass
class RoundRecord:
    round: int
    round_time: float
    pending_count: int
    placed_count: int
    queue_depth_after: int
    lp_ms: float = 0.0
    greedy_ms: float = 0.0
    lp_iterations: int = 0
    greedy_checks: int = 0
    solved: bool = False


@dataclass
class TaskRecord:
    task_id: str
    priority: float
    arrival_time: float
    status: str = "pending"          # pending | placed | rejected
    placement_time: Optional[float] = None
    wait_s: Optional[float] = None
    completion_time: Optional[float] = None
    server_id: Optional[str] = None


@dataclass
class SimReport:
    rounds: list
    tasks: list
    summary: dict

    def rounds_csv(self) -> str:
        return _csv(ROUND_COLUMNS, (asdict(r) for r in self.rounds))

    def tasks_csv(self) -> str:
        return _csv(TASK_COLUMNS, (asdict(t) for t in self.tasks))

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, prefix: str = "sim") -> list:
        """Write ``<prefix>_rounds.csv``, ``<prefix>_tasks.csv`` and ``<prefix>_summary.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for suffix, text in (("rounds.csv", self.rounds_csv()), ("tasks.csv", self.tasks_csv()),
                             ("summary.json", self.summary_json())):
            p = out / f"{prefix}_{suffix}"
            p.write_text(text, encoding="utf-8")
            paths.append(p)
        return paths


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def _round_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), k]).generate_state(1, np.uint64)[0])


class _Audit:
    """Capacity and anti-affinity checks after every event (slow; tests only)."""

    def __init__(self, cluster: Cluster, groups: dict):
        self.cluster = cluster
        self.groups = groups

    def __call__(self, when: float):
        c = self.cluster
        assert np.all(c.remaining >= -EPS_CAP), f"negative remaining capacity at t={when}"
        assert np.all(c.remaining <= c.capacity + 1e-6), f"remaining above capacity at t={when}"
        for i, gc in enumerate(c.group_counts):
            for g, n in gc.items():
                assert 0 <= n <= self.groups[g].limit, f"group {g} count {n} on {c.server_ids[i]} at t={when}"


def run(tasks: Sequence[Task], cluster: Cluster, config: Optional[SimConfig] = None,
        groups: Optional[dict] = None, resources=(CPU, MEM)) -> SimReport:
    """Replay ``tasks`` on ``cluster`` (mutated in place) and return the report.

    Tasks that no shape could ever host (labels, GPU, or a demand larger than
    a whole server) are rejected on arrival instead of waiting forever. Without
    a horizon the run ends once every placed task has completed.
    """
    config = config or SimConfig()
    groups = dict(groups or {})
    tasks = sorted(tasks, key=lambda t: (t.arrival_time, t.id))
    by_id = {t.id: t for t in tasks}
    if len(by_id) != len(tasks):
        raise ValueError("duplicate task id in trace")
    horizon = config.horizon
    dt = config.round_interval
    audit = _Audit(cluster, groups) if config.audit else None

    # structural feasibility against an empty cluster
    possible = np.ones(len(tasks), dtype=bool)
    if tasks:
        probe = PlacementProblem(tasks, cluster, groups, config.options, resources)
        elig = eligibility_matrix(probe)
        demand = probe.demand_matrix()
        fits = np.zeros_like(elig)
        for m in range(len(cluster.shapes)):
            idx = cluster.servers_of_shape(m)
            if idx.size:
                fits[:, m] = np.all(demand <= cluster.capacity[idx].max(axis=0) + EPS_CAP, axis=1)
        possible = np.any(elig & fits, axis=1)
    index_of = {t.id: j for j, t in enumerate(tasks)}

    records = {t.id: TaskRecord(t.id, float(t.priority), float(t.arrival_time)) for t in tasks}
    heap = []
    seq = 0

    def push(when, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (when, kind, seq, payload))
        seq += 1

    for t in tasks:
        push(float(t.arrival_time), ARRIVAL, t.id)
    arrivals_left = len(tasks)
    if tasks:
        push(0.0, ROUND, 0)

    baseline = cluster.remaining.copy()
    pending = []            # task ids in arrival order
    running = np.zeros(len(cluster), dtype=np.int64)
    where = {}
    round_rows = []
    dirty = True            # state changed since the last round that placed nothing
    now = 0.0

    while heap:
        when, kind, _, payload = heapq.heappop(heap)
        if horizon is not None and when > horizon:
            break
        now = when
        if kind == ARRIVAL:
            arrivals_left -= 1
            if possible[index_of[payload]]:
                pending.append(payload)
                dirty = True
            else:
                records[payload].status = "rejected"
        elif kind == COMPLETION:
            i = where.pop(payload)
            task = by_id[payload]
            running[i] -= 1
            if running[i] == 0:
                # an idle server goes back to its starting state exactly, without float drift
                drift = np.abs(cluster.remaining[i] + task.demand - baseline[i])
                assert np.all(drift <= 1e-6 * (1.0 + baseline[i])), f"capacity leak on {cluster.server_ids[i]}"
                cluster.remaining[i] = baseline[i]
            else:
                row = cluster.remaining[i]
                row += task.demand
                np.minimum(row, baseline[i], out=row)
            if task.group is not None:
                gc = cluster.group_counts[i]
                gc[task.group] -= 1
                if gc[task.group] == 0:
                    del gc[task.group]
            dirty = True
        else:
            k = payload
            rec = RoundRecord(k, now, len(pending), 0, len(pending))
            if pending and dirty:
                batch = [by_id[tid] for tid in pending]
                problem = PlacementProblem(batch, cluster, groups, config.options, resources)
                prices = compute_prices(problem)
                result = greedy_place(problem, prices, _round_seed(config.seed, k))
                rec.solved = True
                rec.lp_iterations = int(result.counters.get("lp_iterations", 0))
                rec.greedy_checks = int(result.counters.get("greedy_checks", 0))
                if config.record_timing:
                    rec.lp_ms = float(result.timing["lp_ms"])
                    rec.greedy_ms = float(result.timing["greedy_ms"])
                sid_index = {sid: i for i, sid in enumerate(cluster.server_ids)} if result.assignments else {}
                for tid, sid in result.assignments.items():
                    i = sid_index[sid]
                    running[i] += 1
                    where[tid] = i
                    r = records[tid]
                    r.status, r.placement_time, r.server_id = "placed", now, sid
                    r.wait_s = now - r.arrival_time
                    r.completion_time = now + float(by_id[tid].duration)
                    push(r.completion_time, COMPLETION, tid)
                pending = [tid for tid in pending if tid not in result.assignments]
                rec.placed_count = len(result.assignments)
                rec.queue_depth_after = len(pending)
                # an unchanged state cannot place anything new next round
                dirty = rec.placed_count > 0
            round_rows.append(rec)
            if horizon is not None or pending or arrivals_left:
                push((k + 1) * dt, ROUND, k + 1)
        if audit:
            audit(now)

    summary = _summarize(records, round_rows, tasks, config)
    summary["end_time"] = float(now if horizon is None else max(horizon, now))
    log.info("simulated %d tasks over %d rounds", len(tasks), len(round_rows))
    return SimReport(round_rows, [records[t.id] for t in tasks], summary)


def _summarize(records: dict, rounds: list, tasks, config: SimConfig) -> dict:
    placed = [r for r in records.values() if r.status == "placed"]
    waits = {}
    for r in placed:
        waits.setdefault(r.priority, []).append(r.wait_s)
    per_priority = {_key(p): float(np.mean(w)) for p, w in sorted(waits.items())}
    offered = {}
    for r in records.values():
        offered[r.priority] = offered.get(r.priority, 0) + 1
    rates = {_key(p): len(waits.get(p, [])) / n for p, n in sorted(offered.items())}
    solve = [r.lp_ms + r.greedy_ms for r in rounds]
    return {
        "tasks": len(tasks),
        "placed": len(placed),
        "rejected": sum(r.status == "rejected" for r in records.values()),
        "pending_at_end": sum(r.status == "pending" for r in records.values()),
        "rounds": len(rounds),
        "rounds_solved": sum(r.solved for r in rounds),
        "avg_wait_s": float(np.mean([r.wait_s for r in placed])) if placed else 0.0,
        "avg_wait_s_by_priority": per_priority,
        "placement_rate_by_priority": rates,
        "placement_rate": len(placed) / len(tasks) if tasks else 0.0,
        "weighted_objective": float(sum(r.priority for r in placed)),
        "max_solve_ms": float(max(solve, default=0.0)),
        "max_queue_depth": int(max((r.queue_depth_after for r in rounds), default=0)),
        "lp_iterations": int(sum(r.lp_iterations for r in rounds)),
        "greedy_checks": int(sum(r.greedy_checks for r in rounds)),
        "round_interval": config.round_interval,
        "seed": config.seed,
    }


def _key(p: float) -> str:
    return str(int(p)) if float(p).is_integer() else repr(float(p))


def conservation_check(cluster: Cluster, report: Optional[SimReport] = None) -> bool:
    """True iff every server is back at full capacity and holds no group members.

    ``report``, when given, must also show no placed task still running past
    the last processed event, i.e. the run was drained.
    """
    if report is not None and any(t.status == "placed" and t.completion_time > report.summary["end_time"]
                                  for t in report.tasks):
        return False
    return bool(np.array_equal(cluster.remaining, cluster.capacity)) and not any(
        any(n for n in gc.values()) for gc in cluster.group_counts)
