"""Trace and instance I/O, synthetic workloads, and the scaling transforms.

Trace CSV columns (header names are exact)::

    task_id,arrival_time_s,duration_s,cpu,mem_mb,gpu,priority,group_id,group_limit,labels

``cpu`` is in millicores, ``mem_mb`` in megabytes, ``gpu`` a device count;
``group_id``/``group_limit``/``labels`` may be empty and ``labels`` is
semicolon-separated. Cluster CSV columns::

    server_id,shape_id,cpu,mem_mb,gpu,labels

Every row of a shape must carry the same capacity and labels.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import CPU, GPU, MEM, Cluster, JobGroup, MachineShape, PlacementProblem, PricingOptions, Task

TRACE_COLUMNS = ("task_id", "arrival_time_s", "duration_s", "cpu", "mem_mb", "gpu",
                 "priority", "group_id", "group_limit", "labels")
CLUSTER_COLUMNS = ("server_id", "shape_id", "cpu", "mem_mb", "gpu", "labels")
PRIORITY_LEVELS = (1, 2, 4, 8)

# AWS metal instance shapes (millicores, MB, GPUs)
AWS_SHAPES = (
    MachineShape("m6a.metal", (192000, 786432, 0)),
    MachineShape("m7a.metal-48xl", (192000, 786432, 0)),
    MachineShape("c8g.metal-48xl", (192000, 393216, 0)),
    MachineShape("c6in.metal", (128000, 262144, 0)),
    MachineShape("r8g.metal-24xl", (96000, 786432, 0)),
)
GPU_SHAPES = (
    MachineShape("g7e.48xlarge", (192000, 2097152, 8), is_gpu=True),
    MachineShape("g6.16xlarge", (64000, 262144, 1), is_gpu=True),
)
# desk-scale servers for instances small enough for the exact oracle
SMALL_SHAPES = (
    MachineShape("small-a", (16000, 65536, 0)),
    MachineShape("small-b", (32000, 65536, 0)),
    MachineShape("small-c", (16000, 131072, 0)),
)
SMALL_GPU_SHAPES = (
    MachineShape("gpu-a", (32000, 131072, 4), is_gpu=True),
    MachineShape("gpu-b", (16000, 65536, 2), is_gpu=True),
)


class TraceError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class TraceRecord:
    task_id: str
    arrival_time_s: float
    duration_s: float
    cpu: float
    mem_mb: float
    gpu: int = 0
    priority: float = 1.0
    group_id: Optional[str] = None
    group_limit: Optional[int] = None
    labels: frozenset = frozenset()


def _text(stream):
    if isinstance(stream, (bytes, bytearray)):
        return io.StringIO(stream.decode("utf-8"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8", newline="")


def _num(row: int, name: str, raw: str, kind=float):
    try:
        v = kind(raw)
    except (TypeError, ValueError):
        raise TraceError(row, f"{name} is not numeric: {raw!r}") from None
    if isinstance(v, float) and not math.isfinite(v):
        raise TraceError(row, f"{name} is not finite: {raw!r}")
    return v


def _labels(raw: Optional[str]) -> frozenset:
    return frozenset(x.strip() for x in (raw or "").split(";") if x.strip())


def _fmt(v) -> str:
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v) if isinstance(v, float) else str(v)


def _header(reader, required, row=1):
    if reader.fieldnames is None:
        raise TraceError(row, "missing header row")
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        raise TraceError(row, f"missing column(s): {', '.join(missing)}")


def parse_trace(stream, priorities: Optional[Iterable[float]] = None) -> list:
    """Parse a trace CSV into :class:`TraceRecord` objects in file order.

    ``stream`` may be bytes, a string, or a text/binary file object. Errors
    name the 1-based line number (the header is line 1). When ``priorities``
    is given, every record's priority must be one of them.
    """
    allowed = None if priorities is None else {float(p) for p in priorities}
    reader = csv.DictReader(_text(stream))
    _header(reader, TRACE_COLUMNS)
    out = []
    for line, row in enumerate(reader, start=2):
        if None in row.values() or None in row:
            raise TraceError(line, "wrong number of fields")
        tid = row["task_id"].strip()
        if not tid:
            raise TraceError(line, "empty task_id")
        arrival = _num(line, "arrival_time_s", row["arrival_time_s"])
        duration = _num(line, "duration_s", row["duration_s"])
        if arrival < 0:
            raise TraceError(line, f"negative arrival_time_s {arrival}")
        if duration <= 0:
            raise TraceError(line, f"duration_s must be positive, got {duration}")
        cpu = _num(line, "cpu", row["cpu"])
        mem = _num(line, "mem_mb", row["mem_mb"])
        gpu_raw = row["gpu"].strip() or "0"
        gpu = _num(line, "gpu", gpu_raw, float)
        if gpu < 0 or not float(gpu).is_integer():
            raise TraceError(line, f"gpu must be a nonnegative integer, got {gpu_raw!r}")
        if cpu < 0 or mem < 0:
            raise TraceError(line, "negative resource demand")
        prio = _num(line, "priority", row["priority"])
        if prio <= 0:
            raise TraceError(line, f"priority must be positive, got {prio}")
        if allowed is not None and prio not in allowed:
            raise TraceError(line, f"priority {prio} not in {sorted(allowed)}")
        gid = row["group_id"].strip() or None
        limit = None
        if row["group_limit"].strip():
            limit = _num(line, "group_limit", row["group_limit"], float)
            if limit < 1 or not float(limit).is_integer():
                raise TraceError(line, f"group_limit must be a positive integer, got {row['group_limit']!r}")
            limit = int(limit)
        out.append(TraceRecord(tid, arrival, duration, cpu, mem, int(gpu), prio, gid, limit,
                               _labels(row["labels"])))
    return out


def write_trace(records: Iterable[TraceRecord], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in records:
        w.writerow([r.task_id, repr(float(r.arrival_time_s)), repr(float(r.duration_s)), _fmt(float(r.cpu)),
                    _fmt(float(r.mem_mb)), int(r.gpu), _fmt(float(r.priority)), r.group_id or "",
                    "" if r.group_limit is None else int(r.group_limit), ";".join(sorted(r.labels))])


def trace_to_string(records) -> str:
    buf = io.StringIO()
    write_trace(records, buf)
    return buf.getvalue()


def parse_cluster(stream) -> Cluster:
    """Read a cluster CSV. Shapes are taken from ``shape_id`` in first-seen order."""
    reader = csv.DictReader(_text(stream))
    _header(reader, CLUSTER_COLUMNS)
    shapes = {}
    servers = []
    for line, row in enumerate(reader, start=2):
        if None in row.values() or None in row:
            raise TraceError(line, "wrong number of fields")
        cap = tuple(_num(line, c, row[c] if c != "gpu" else (row[c].strip() or "0")) for c in ("cpu", "mem_mb", "gpu"))
        if any(v < 0 for v in cap) or not any(v > 0 for v in cap):
            raise TraceError(line, "capacity must be nonnegative and positive somewhere")
        sid, shape_id = row["server_id"].strip(), row["shape_id"].strip()
        if not sid or not shape_id:
            raise TraceError(line, "empty server_id or shape_id")
        shape = MachineShape(shape_id, cap, _labels(row["labels"]), is_gpu=cap[2] > 0)
        if shape_id in shapes and shapes[shape_id] != shape:
            raise TraceError(line, f"server {sid} disagrees with earlier rows of shape {shape_id}")
        shapes.setdefault(shape_id, shape)
        servers.append((sid, shape_id))
    return Cluster(list(shapes.values()), servers)


def write_cluster(cluster: Cluster, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CLUSTER_COLUMNS)
    for sid, m in zip(cluster.server_ids, cluster.shape_of):
        shape = cluster.shapes[m]
        cap = list(shape.capacity) + [0.0] * (3 - len(shape.capacity))
        w.writerow([sid, shape.id, _fmt(cap[0]), _fmt(cap[1]), int(cap[2]), ";".join(sorted(shape.labels))])


def records_to_tasks(records: Sequence[TraceRecord], with_gpu: bool = True):
    """Convert records to ``(tasks, groups)``; a group's limit must be consistent across its rows."""
    tasks, groups = [], {}
    for n, r in enumerate(records, start=2):
        demand = (r.cpu, r.mem_mb, r.gpu) if with_gpu else (r.cpu, r.mem_mb)
        if not with_gpu and r.gpu:
            raise TraceError(n, "GPU demand without a GPU resource dimension")
        if r.group_id is not None:
            limit = 1 if r.group_limit is None else r.group_limit
            prev = groups.get(r.group_id)
            if prev is not None and prev.limit != limit:
                raise TraceError(n, f"group {r.group_id} has conflicting limits {prev.limit} and {limit}")
            groups[r.group_id] = JobGroup(r.group_id, limit)
        tasks.append(Task(r.task_id, demand, r.priority, r.group_id, r.labels, r.arrival_time_s, r.duration_s))
    return tasks, groups


def tasks_to_records(tasks: Sequence[Task], groups: dict) -> list:
    out = []
    for t in tasks:
        d = list(t.demand) + [0.0] * (3 - len(t.demand))
        limit = groups[t.group].limit if t.group is not None else None
        out.append(TraceRecord(t.id, t.arrival_time, t.duration, d[0], d[1], int(d[2]), t.priority,
                               t.group, limit, t.required_labels))
    return out


def _shape_has_gpu(cluster: Cluster) -> bool:
    return any(s.capacity[2] > 0 for s in cluster.shapes if len(s.capacity) > 2)


def trim_cluster(cluster: Cluster, with_gpu: bool) -> Cluster:
    """Drop the GPU column from a 3-resource cluster when it is unused."""
    if with_gpu or cluster.dim < 3:
        return cluster
    shapes = [dataclasses.replace(s, capacity=s.capacity[:2]) for s in cluster.shapes]
    servers = list(zip(cluster.server_ids, (cluster.shapes[m].id for m in cluster.shape_of)))
    return Cluster(shapes, servers, remaining=cluster.remaining[:, :2].copy(), group_counts=cluster.group_counts)


def make_problem(records: Sequence[TraceRecord], cluster: Cluster,
                 options: Optional[PricingOptions] = None) -> PlacementProblem:
    """Build a problem from trace records and a 3-column cluster, dropping the GPU
    dimension when neither side uses it."""
    with_gpu = _shape_has_gpu(cluster) or any(r.gpu for r in records)
    tasks, groups = records_to_tasks(records, with_gpu)
    resources = (CPU, MEM, GPU) if with_gpu else (CPU, MEM)
    return PlacementProblem(tasks, trim_cluster(cluster, with_gpu), groups, options or PricingOptions(), resources)


def load_instance(cluster_path, tasks_path, options: Optional[PricingOptions] = None) -> PlacementProblem:
    with open(cluster_path, newline="", encoding="utf-8") as fh:
        cluster = parse_cluster(fh)
    with open(tasks_path, newline="", encoding="utf-8") as fh:
        records = parse_trace(fh)
    return make_problem(records, cluster, options)


def save_instance(problem: PlacementProblem, cluster_path, tasks_path) -> None:
    """Write the cluster (full shape capacity, not residual) and the tasks."""
    with open(cluster_path, "w", newline="", encoding="utf-8") as fh:
        write_cluster(problem.cluster, fh)
    with open(tasks_path, "w", newline="", encoding="utf-8") as fh:
        write_trace(tasks_to_records(problem.tasks, problem.groups), fh)


# ---------------------------------------------------------------------------
# synthetic workloads


@dataclass
class Dist:
    """A one-dimensional sampling distribution.

    ``kind`` is one of ``const`` (``value``), ``choice`` (``values`` with
    optional ``weights``), ``uniform`` (``low``, ``high``), ``exponential``
    (``mean``, optional ``min``) or ``lognormal`` (``mean`` of the underlying
    normal as ``mu``, ``sigma``, optional ``min``).
    """

    kind: str = "const"
    value: float = 0.0
    values: tuple = ()
    weights: tuple = ()
    low: float = 0.0
    high: float = 1.0
    mean: float = 1.0
    mu: float = 0.0
    sigma: float = 1.0
    min: float = 0.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "const":
            return np.full(n, float(self.value))
        if self.kind == "choice":
            w = np.asarray(self.weights, dtype=float) if self.weights else None
            return rng.choice(np.asarray(self.values, dtype=float), size=n, p=None if w is None else w / w.sum())
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, n)
        if self.kind == "exponential":
            return np.maximum(rng.exponential(self.mean, n), self.min)
        if self.kind == "lognormal":
            return np.maximum(rng.lognormal(self.mu, self.sigma, n), self.min)
        raise ValueError(f"unknown distribution kind {self.kind!r}")


def _azure_cpu():
    return Dist("choice", values=(1000, 2000, 4000, 8000, 16000), weights=(0.35, 0.3, 0.2, 0.1, 0.05))


def _azure_mem():
    return Dist("choice", values=(2048, 4096, 8192, 16384, 32768, 65536), weights=(0.2, 0.25, 0.25, 0.15, 0.1, 0.05))


@dataclass
class GenConfig:
    """Synthetic trace generator settings (JSON keys mirror the field names).

    Arrivals are jobs at a Poisson ``rate`` per second; a job is a group of
    ``replicas`` tasks with probability ``group_fraction``, otherwise a single
    task. Priority level ``p`` is drawn with probability proportional to
    ``1/p`` so each level carries equal total priority.
    """

    rate: float = 10.0
    horizon_s: float = 100.0
    num_tasks: Optional[int] = None
    cpu: Dist = field(default_factory=_azure_cpu)
    mem_mb: Dist = field(default_factory=_azure_mem)
    gpu: Dist = field(default_factory=Dist)
    duration_s: Dist = field(default_factory=lambda: Dist("exponential", mean=60.0, min=1.0))
    priority_levels: tuple = PRIORITY_LEVELS
    group_fraction: float = 0.0
    replicas: int = 2
    group_limit: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("cpu", "mem_mb", "gpu", "duration_s"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, Dist(**v))
        self.priority_levels = tuple(self.priority_levels)
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not 0 <= self.group_fraction <= 1:
            raise ValueError("group_fraction must be in [0, 1]")
        if self.replicas < 1 or self.group_limit < 1:
            raise ValueError("replicas and group_limit must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_gen_config(path) -> GenConfig:
    with open(path, encoding="utf-8") as fh:
        return GenConfig.from_dict(json.load(fh))


def priority_probabilities(levels: Sequence[float]) -> np.ndarray:
    w = 1.0 / np.asarray(levels, dtype=float)
    return w / w.sum()


def generate_trace(cfg: GenConfig, seed: Optional[int] = None) -> list:
    """Poisson job arrivals with priorities drawn proportionally to 1/p."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    if cfg.num_tasks is not None:
        n_jobs = cfg.num_tasks
        arrivals = np.cumsum(rng.exponential(1.0 / cfg.rate, n_jobs))
    else:
        chunks, now = [], 0.0
        while now <= cfg.horizon_s:
            gaps = rng.exponential(1.0 / cfg.rate, max(16, int(cfg.rate * cfg.horizon_s * 0.25) + 1))
            chunk = now + np.cumsum(gaps)
            chunks.append(chunk)
            now = float(chunk[-1])
        arrivals = np.concatenate(chunks) if chunks else np.zeros(0)
        arrivals = arrivals[arrivals <= cfg.horizon_s]
        n_jobs = arrivals.size
    grouped = rng.random(n_jobs) < cfg.group_fraction
    levels = np.asarray(cfg.priority_levels, dtype=float)
    prio = rng.choice(levels, size=n_jobs, p=priority_probabilities(cfg.priority_levels))
    cpu = cfg.cpu.sample(rng, n_jobs)
    mem = cfg.mem_mb.sample(rng, n_jobs)
    gpu = np.rint(cfg.gpu.sample(rng, n_jobs)).astype(int)
    dur = cfg.duration_s.sample(rng, n_jobs)

    out = []
    for job in range(n_jobs):
        n = cfg.replicas if grouped[job] else 1
        gid = f"g{job:06d}" if grouped[job] else None
        for _ in range(n):
            if cfg.num_tasks is not None and len(out) >= cfg.num_tasks:
                return out
            out.append(TraceRecord(f"t{len(out):06d}", float(arrivals[job]), float(dur[job]), float(cpu[job]),
                                   float(mem[job]), int(gpu[job]), float(prio[job]), gid,
                                   cfg.group_limit if gid else None))
    return out


def scale_speed(records: Sequence[TraceRecord], k: float) -> list:
    """Divide arrival times and durations by ``k`` (arrival rate x k, resource-time per task / k)."""
    if not k > 0:
        raise ValueError("k must be positive")
    return [dataclasses.replace(r, arrival_time_s=r.arrival_time_s / k, duration_s=r.duration_s / k)
            for r in records]


def replicate_cluster(cluster: Cluster, k: int) -> Cluster:
    """``k`` copies of every server; copy 0 keeps its id, copy ``c`` gets suffix ``~c``."""
    if k < 1 or int(k) != k:
        raise ValueError("k must be a positive integer")
    servers, remaining, counts = [], [], []
    for c in range(int(k)):
        for i, sid in enumerate(cluster.server_ids):
            servers.append((sid if c == 0 else f"{sid}~{c}", cluster.shapes[cluster.shape_of[i]].id))
        remaining.append(cluster.remaining)
        counts.extend(cluster.group_counts)
    rem = np.vstack(remaining) if remaining else None
    return Cluster(cluster.shapes, servers, remaining=rem, group_counts=counts)


def scale_size(records: Sequence[TraceRecord], cluster: Cluster, k: int, seed: int = 0):
    """Replicate the cluster ``k`` times and overlay ``k`` copies of the trace.

    Copy 0 is the original stream; copy ``c >= 1`` renames tasks and groups
    with suffix ``~c`` and shifts each job's arrival by a seeded uniform offset
    in ``[0, mean inter-arrival)``. Durations are unchanged.
    """
    big = replicate_cluster(cluster, k)
    if k == 1 or not records:
        return list(records), big
    arrivals = np.array([r.arrival_time_s for r in records])
    gap = (arrivals.max() - arrivals.min()) / max(len(records) - 1, 1)
    out = list(records)
    for c in range(1, int(k)):
        rng = np.random.default_rng([seed, c])
        offsets = {}
        for r in records:
            key = r.group_id or r.task_id
            if key not in offsets:
                offsets[key] = float(rng.uniform(0.0, gap)) if gap > 0 else 0.0
            out.append(dataclasses.replace(
                r, task_id=f"{r.task_id}~{c}", arrival_time_s=r.arrival_time_s + offsets[key],
                group_id=None if r.group_id is None else f"{r.group_id}~{c}"))
    out.sort(key=lambda r: r.arrival_time_s)
    return out, big


def synthesize_gpu(records: Sequence[TraceRecord], fraction: float, gpu_amounts=(1, 2, 4), seed: int = 0) -> list:
    """Give a seeded random subset (each record independently with prob. ``fraction``)
    a GPU demand drawn from ``gpu_amounts``; everyone else gets 0."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    picks = rng.random(len(records)) < fraction
    amounts = rng.choice(np.asarray(gpu_amounts, dtype=int), size=len(records))
    return [dataclasses.replace(r, gpu=int(a) if p else 0) for r, p, a in zip(records, picks, amounts)]


def azure_vmtable_to_records(rows: Iterable[dict], seed: int = 0, levels=PRIORITY_LEVELS,
                             group_by_deployment: bool = False) -> list:
    """Map Azure Public Dataset V2 ``vmtable`` rows onto trace records.

    Expects the dataset's ``vmid``, ``vmcreated``, ``vmdeleted``,
    ``vmcorecountbucket``, ``vmmemorybucket`` (GB) and ``deploymentid``
    columns; open-ended buckets such as ``>24`` use their bound. Priorities are
    drawn per VM with probability proportional to ``1/p``. The dataset itself
    is not bundled.
    """
    rng = np.random.default_rng(seed)
    probs = priority_probabilities(levels)
    out = []

    def bucket(v):
        return float(str(v).lstrip(">"))

    for row in rows:
        created, deleted = float(row["vmcreated"]), float(row["vmdeleted"])
        if deleted <= created:
            continue
        gid = str(row["deploymentid"]) if group_by_deployment else None
        out.append(TraceRecord(str(row["vmid"]), created, deleted - created,
                               bucket(row["vmcorecountbucket"]) * 1000, bucket(row["vmmemorybucket"]) * 1024,
                               0, float(rng.choice(levels, p=probs)), gid, 1 if gid else None))
    out.sort(key=lambda r: r.arrival_time_s)
    return out


def uniform_cluster(shapes: Sequence[MachineShape], n_servers: int) -> Cluster:
    """``n_servers`` servers spread round-robin over ``shapes``."""
    counts = {s.id: n_servers // len(shapes) + (1 if i < n_servers % len(shapes) else 0)
              for i, s in enumerate(shapes)}
    return Cluster.from_counts(shapes, counts)


def synthetic_instance(n_servers: int, n_tasks: int, seed: int = 0, shapes=SMALL_SHAPES,
                       group_fraction: float = 0.0, replicas: int = 2, group_limit: int = 1,
                       gpu_fraction: float = 0.0, gpu_amounts=(1, 2), cpu: Optional[Dist] = None,
                       mem_mb: Optional[Dist] = None, options: Optional[PricingOptions] = None) -> PlacementProblem:
    """Static placement instance: ``n_servers`` servers over ``shapes``, ``n_tasks`` tasks.

    Task sizes default to the Azure-like VM size mix; priorities follow the
    1/p level scheme. The GPU dimension is included only when a shape or task
    uses it.
    """
    rng = np.random.default_rng(seed)
    cfg = GenConfig(rate=1.0, num_tasks=n_tasks, cpu=cpu or _azure_cpu(), mem_mb=mem_mb or _azure_mem(),
                    group_fraction=group_fraction, replicas=replicas, group_limit=group_limit)
    records = generate_trace(cfg, seed=int(rng.integers(2**63)))
    if gpu_fraction > 0:
        records = synthesize_gpu(records, gpu_fraction, gpu_amounts, seed=int(rng.integers(2**63)))
    cluster = uniform_cluster(shapes, n_servers)
    return make_problem(records, cluster, options)


def offered_load(records: Sequence[TraceRecord], cluster: Cluster, span: Optional[float] = None) -> np.ndarray:
    """Time-averaged demand over total capacity per (cpu, mem, gpu) column.

    ``span`` defaults to the arrival window; a zero-capacity column reports 0.
    """
    if not records:
        return np.zeros(3)
    if span is None:
        span = max(r.arrival_time_s for r in records) - min(r.arrival_time_s for r in records)
    work = np.array([[r.cpu, r.mem_mb, r.gpu] for r in records], float)
    work *= np.array([r.duration_s for r in records])[:, None]
    cap = np.zeros(3)
    total = cluster.capacity.sum(axis=0)
    cap[:total.size] = total
    with np.errstate(divide="ignore", invalid="ignore"):
        load = work.sum(axis=0) / (max(span, 1e-12) * cap)
    return np.where(cap > 0, load, 0.0)


def calibrate(records: Sequence[TraceRecord], shapes: Sequence[MachineShape], lo: int = 1, hi: int = 4096,
              config=None, max_queue: Optional[int] = None) -> int:
    """Smallest server count (spread uniformly over ``shapes``) whose replay keeps the
    pending queue bounded.

    "Bounded" means the queue depth after the last round inside the arrival
    window is at most ``max_queue`` (default: twice the mean arrivals per
    round, plus 10).
    """
    from .simulator import SimConfig, run

    config = config or SimConfig()
    if not records:
        return lo
    span = max(r.arrival_time_s for r in records) - min(r.arrival_time_s for r in records)
    per_round = len(records) * config.round_interval / max(span, config.round_interval)
    limit = max_queue if max_queue is not None else int(2 * per_round) + 10
    last_arrival = max(r.arrival_time_s for r in records)

    def bounded(n):
        cluster = uniform_cluster(shapes, n)
        problem = make_problem(records, cluster, config.options)
        report = run(problem.tasks, problem.cluster, config, groups=problem.groups,
                     resources=problem.resources)
        inside = [r for r in report.rounds if r.round_time <= last_arrival]
        return not inside or inside[-1].queue_depth_after <= limit

    if not bounded(hi):
        raise ValueError(f"even {hi} servers cannot sustain the trace")
    while lo < hi:
        mid = (lo + hi) // 2
        if bounded(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo
