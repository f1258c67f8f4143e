"""Domain types shared by the pricing, placement, oracle and simulator stages.

Resource vectors are plain ``numpy`` float arrays whose index is the resource
dimension. A :class:`Cluster` owns one ``(servers, resources)`` array of
remaining capacity; each :class:`Server` exposes a row view into it, so
mutations through either path stay in sync.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

# absolute slack for every capacity comparison
EPS_CAP = 1e-9


class Unit(str, enum.Enum):
    MILLICORE = "millicore"
    MEGABYTE = "megabyte"
    GPU_COUNT = "gpu-count"
    SYNTHETIC = "synthetic-unit"


@dataclass(frozen=True)
class ResourceKind:
    name: str
    unit: Unit = Unit.SYNTHETIC


CPU = ResourceKind("cpu", Unit.MILLICORE)
MEM = ResourceKind("mem_mb", Unit.MEGABYTE)
GPU = ResourceKind("gpu", Unit.GPU_COUNT)


def resource_vector(values: Iterable[float], dim: Optional[int] = None) -> np.ndarray:
    """Coerce ``values`` to a float vector, checking length and sign."""
    vec = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
    if vec.ndim != 1:
        raise ValueError("resource vector must be one-dimensional")
    if dim is not None and vec.shape[0] != dim:
        raise ValueError(f"resource vector has length {vec.shape[0]}, expected {dim}")
    if np.any(vec < 0) or not np.all(np.isfinite(vec)):
        raise ValueError(f"resource vector must be finite and nonnegative: {vec.tolist()}")
    return vec


@dataclass(frozen=True)
class Task:
    id: str
    demand: tuple
    priority: float = 1.0
    group: Optional[str] = None
    required_labels: frozenset = frozenset()
    arrival_time: float = 0.0
    duration: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "demand", tuple(float(v) for v in self.demand))
        object.__setattr__(self, "required_labels", frozenset(self.required_labels))


@dataclass(frozen=True)
class JobGroup:
    id: str
    limit: int = 1


@dataclass(frozen=True)
class MachineShape:
    id: str
    capacity: tuple
    labels: frozenset = frozenset()
    is_gpu: bool = False

    def __post_init__(self):
        object.__setattr__(self, "capacity", tuple(float(v) for v in self.capacity))
        object.__setattr__(self, "labels", frozenset(self.labels))


@dataclass
class Server:
    id: str
    shape: str
    remaining: np.ndarray
    group_counts: dict = field(default_factory=dict)


class Cluster:
    """Servers grouped by declared shape, with mutable remaining capacity.

    ``servers`` is a sequence of ``(server_id, shape_id)`` pairs. When
    ``remaining`` is omitted every server starts at its shape's full capacity.
    """

    def __init__(self, shapes: Sequence[MachineShape], servers: Sequence[tuple],
                 remaining=None, group_counts=None):
        self.shapes = list(shapes)
        self.shape_index = {s.id: i for i, s in enumerate(self.shapes)}
        if len(self.shape_index) != len(self.shapes):
            raise ValueError("duplicate shape id")
        dims = {len(s.capacity) for s in self.shapes}
        if len(dims) > 1:
            raise ValueError("shapes disagree on resource dimension")
        self.dim = dims.pop() if dims else 0

        self.server_ids = [str(sid) for sid, _ in servers]
        try:
            self.shape_of = np.array([self.shape_index[sh] for _, sh in servers], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"server references unknown shape {exc.args[0]!r}") from None
        shape_caps = np.array([s.capacity for s in self.shapes], dtype=float).reshape(len(self.shapes), self.dim)
        self.capacity = shape_caps[self.shape_of] if len(servers) else np.zeros((0, self.dim))
        if remaining is None:
            self.remaining = self.capacity.copy()
        else:
            self.remaining = np.array(remaining, dtype=float).reshape(len(servers), self.dim)
        if group_counts is None:
            group_counts = [{} for _ in servers]
        self.group_counts = [dict(gc) for gc in group_counts]
        self.servers = [
            Server(sid, self.shapes[m].id, self.remaining[i], self.group_counts[i])
            for i, (sid, m) in enumerate(zip(self.server_ids, self.shape_of))
        ]

    @classmethod
    def from_counts(cls, shapes: Sequence[MachineShape], counts: Mapping[str, int] | Sequence[int]) -> "Cluster":
        """Fresh cluster with ``counts[shape]`` servers per shape, ids ``<shape>-<n>``."""
        if not isinstance(counts, Mapping):
            counts = {s.id: n for s, n in zip(shapes, counts)}
        servers = [(f"{s.id}-{n}", s.id) for s in shapes for n in range(counts.get(s.id, 0))]
        return cls(shapes, servers)

    def __len__(self):
        return len(self.server_ids)

    def copy(self) -> "Cluster":
        return Cluster(self.shapes, list(zip(self.server_ids, (self.shapes[m].id for m in self.shape_of))),
                       remaining=self.remaining.copy(), group_counts=self.group_counts)

    def servers_of_shape(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.shape_of == m)

    @property
    def pooled_capacity(self):
        return aggregate_shapes(self)


def gpu_index(resources: Sequence[ResourceKind]) -> Optional[int]:
    for k, kind in enumerate(resources):
        if kind.unit == Unit.GPU_COUNT:
            return k
    return None


@dataclass
class PricingOptions:
    """Knobs for stage 1 and the GPU adjustments used by stage 2.

    ``None`` for a GPU knob means "derive the default from the batch":
    penalty = 0.5 * min priority, surcharge = penalty, boost = max priority.
    The boost is a greedy-stage adjustment; ``boost_in_lp`` also adds it to
    the LP objective, where a tight GPU price absorbs it.
    ``collapse_tasks`` solves the relaxation over classes of interchangeable
    tasks, which is exact and much smaller on traces with repeated sizes.
    """

    mode: str = "shape"
    anti_affinity_in_lp: bool = False
    gpu_penalty: Optional[float] = None
    gpu_surcharge: Optional[float] = None
    gpu_priority_boost: Optional[float] = None
    lp_tolerance: float = 1e-6
    seed: int = 0
    eligibility_filter: bool = True
    boost_in_lp: bool = False
    collapse_tasks: bool = True

    def __post_init__(self):
        if self.mode not in ("shape", "global"):
            raise ValueError(f"unknown pricing mode {self.mode!r}")
        if not self.lp_tolerance > 0:
            raise ValueError("lp_tolerance must be positive")
        for name in ("gpu_penalty", "gpu_surcharge", "gpu_priority_boost"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")

    def gpu_knobs(self, priorities) -> tuple[float, float, float]:
        """Resolved ``(penalty, surcharge, boost)`` for a batch of priorities."""
        priorities = np.asarray(priorities, dtype=float)
        pmin = float(priorities.min()) if priorities.size else 0.0
        pmax = float(priorities.max()) if priorities.size else 0.0
        rho = 0.5 * pmin if self.gpu_penalty is None else float(self.gpu_penalty)
        sigma = rho if self.gpu_surcharge is None else float(self.gpu_surcharge)
        beta = pmax if self.gpu_priority_boost is None else float(self.gpu_priority_boost)
        return rho, sigma, beta


NO_GPU_ADJUSTMENTS = dict(gpu_penalty=0.0, gpu_surcharge=0.0, gpu_priority_boost=0.0)


@dataclass
class PlacementProblem:
    tasks: list
    cluster: Cluster
    groups: dict = field(default_factory=dict)
    options: PricingOptions = field(default_factory=PricingOptions)
    resources: tuple = (CPU, MEM)

    def __post_init__(self):
        self.tasks = list(self.tasks)
        self.resources = tuple(self.resources)

    def demand_matrix(self) -> np.ndarray:
        if not self.tasks:
            return np.zeros((0, len(self.resources)))
        return np.array([t.demand for t in self.tasks], dtype=float)

    def priorities(self) -> np.ndarray:
        return np.array([t.priority for t in self.tasks], dtype=float)

    def gpu_tasks(self) -> np.ndarray:
        k = gpu_index(self.resources)
        if k is None or not self.tasks:
            return np.zeros(len(self.tasks), dtype=bool)
        return self.demand_matrix()[:, k] > 0

    def with_tasks(self, tasks) -> "PlacementProblem":
        return PlacementProblem(list(tasks), self.cluster, self.groups, self.options, self.resources)


def aggregate_shapes(cluster: Cluster) -> dict:
    """Pool remaining capacity per shape.

    Returns ``{shape_id: (C_m, n_m)}`` in catalog order; shapes with no servers
    are left out.
    """
    out = {}
    for m, shape in enumerate(cluster.shapes):
        idx = cluster.servers_of_shape(m)
        if idx.size == 0:
            continue
        out[shape.id] = (cluster.remaining[idx].sum(axis=0), int(idx.size))
    return out


def eligibility_matrix(problem: PlacementProblem, shapes: Optional[Sequence[MachineShape]] = None) -> np.ndarray:
    """Boolean ``(tasks, shapes)`` mask: labels satisfied and GPU tasks only on GPU shapes."""
    shapes = problem.cluster.shapes if shapes is None else shapes
    gpu_task = problem.gpu_tasks()
    elig = np.zeros((len(problem.tasks), len(shapes)), dtype=bool)
    for m, shape in enumerate(shapes):
        label_ok = np.fromiter((t.required_labels <= shape.labels for t in problem.tasks),
                               dtype=bool, count=len(problem.tasks))
        elig[:, m] = label_ok & (shape.is_gpu | ~gpu_task)
    return elig


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    subject: str
    message: str

    def __str__(self):
        return f"{self.severity}: {self.code} [{self.subject}] {self.message}"


def validate_problem(problem: PlacementProblem) -> list:
    """Check every type invariant; never raises.

    Tasks with no eligible shape produce a ``warning`` (they are kept and later
    reported as unplaceable); everything else is an ``error``.
    """
    diags = []

    def err(code, subject, msg, severity="error"):
        diags.append(Diagnostic(severity, code, str(subject), msg))

    r = len(problem.resources)
    names = [k.name for k in problem.resources]
    if len(set(names)) != len(names):
        err("duplicate resource", ",".join(names), "resource names must be unique")

    cluster = problem.cluster
    gk = gpu_index(problem.resources)
    for shape in cluster.shapes:
        cap = np.asarray(shape.capacity)
        if cap.shape[0] != r:
            err("dimension mismatch", shape.id, f"capacity has {cap.shape[0]} components, expected {r}")
            continue
        if np.any(cap < 0) or not np.any(cap > 0):
            err("bad capacity", shape.id, "capacity must be nonnegative and positive in some dimension")
        if gk is not None and bool(cap[gk] > 0) != shape.is_gpu:
            err("gpu flag mismatch", shape.id, "is_gpu must be true iff the GPU component is positive")

    if len(set(cluster.server_ids)) != len(cluster.server_ids):
        err("duplicate server", "cluster", "server ids must be unique")
    if cluster.dim == r and len(cluster):
        bad = np.flatnonzero(np.any(cluster.remaining < -EPS_CAP, axis=1)
                             | np.any(cluster.remaining > cluster.capacity + EPS_CAP, axis=1))
        for i in bad:
            err("remaining out of range", cluster.server_ids[i], "remaining capacity outside [0, capacity]")

    for gid, group in problem.groups.items():
        if group.limit < 1:
            err("bad group limit", gid, f"limit {group.limit} < 1")
    for i, counts in enumerate(cluster.group_counts):
        for gid, n in counts.items():
            grp = problem.groups.get(gid)
            if n < 0 or (grp is not None and n > grp.limit):
                err("group count out of range", cluster.server_ids[i], f"group {gid} count {n}")

    seen = set()
    for task in problem.tasks:
        if task.id in seen:
            err("duplicate task", task.id, "task ids must be unique")
        seen.add(task.id)
        d = np.asarray(task.demand)
        if d.shape[0] != r:
            err("dimension mismatch", task.id, f"demand has {d.shape[0]} components, expected {r}")
        elif np.any(d < 0) or not np.all(np.isfinite(d)):
            err("negative demand", task.id, "demand components must be nonnegative")
        elif not np.any(d > 0):
            err("zero demand", task.id, "demand must be positive in some dimension")
        if not task.priority > 0:
            err("nonpositive priority", task.id, f"priority {task.priority}")
        if not task.duration > 0:
            err("nonpositive duration", task.id, f"duration {task.duration}")
        if task.arrival_time < 0:
            err("negative arrival", task.id, f"arrival {task.arrival_time}")
        if task.group is not None and task.group not in problem.groups:
            err("unknown group", task.id, f"group {task.group!r} is not declared")

    if not any(d.severity == "error" for d in diags) and problem.tasks and cluster.shapes:
        elig = eligibility_matrix(problem)
        for j in np.flatnonzero(~elig.any(axis=1)):
            err("no eligible shape", problem.tasks[j].id, "no shape satisfies labels/GPU demand", "warning")
    return diags


@dataclass(frozen=True)
class ProblemStats:
    binary_vars: int
    lp_vars: int
    capacity_rows: int
    assignment_rows: int
    group_rows: int


def problem_stats(problem: PlacementProblem) -> ProblemStats:
    """Nominal sizes of the exact MILP and of the stage-1 relaxation."""
    t = len(problem.tasks)
    if t == 0:
        return ProblemStats(0, 0, 0, 0, 0)
    s = len(problem.cluster)
    r = len(problem.resources)
    m = len(aggregate_shapes(problem.cluster)) if problem.options.mode == "shape" else 1
    groups = {task.group for task in problem.tasks if task.group is not None}
    group_rows = len(groups) * m if problem.options.anti_affinity_in_lp else 0
    return ProblemStats(binary_vars=t * s, lp_vars=t * m, capacity_rows=m * r,
                        assignment_rows=t, group_rows=group_rows)
