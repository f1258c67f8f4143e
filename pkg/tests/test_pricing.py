import numpy as np
import pytest

from cvxsched import lpcore, traceio
from cvxsched.model import (CPU, GPU, MEM, NO_GPU_ADJUSTMENTS, Cluster, JobGroup, MachineShape, PlacementProblem,
                            PricingOptions, ResourceKind, Task)
from cvxsched.pricing import (GLOBAL_SHAPE, PricingError, build_relaxation, compute_prices, extract_prices,
                              objective_coefficients, solve_relaxation)
from reference import bounded_lp_by_vertices, dual_by_vertices

UNIT = ResourceKind("unit")


def aws(n):
    return traceio.trim_cluster(traceio.uniform_cluster(traceio.AWS_SHAPES, n), with_gpu=False)


def one_dim_problem():
    # the three-variable capacity LP as a single-shape placement problem
    shape = MachineShape("m", (4,))
    tasks = [Task("t1", (2,), 3), Task("t2", (2,), 1), Task("t3", (2,), 1)]
    return PlacementProblem(tasks, Cluster.from_counts([shape], {"m": 1}), resources=(UNIT,),
                            options=PricingOptions(eligibility_filter=False))


def test_row_and_column_counts():
    p = traceio.synthetic_instance(10, 40, seed=0, shapes=traceio.SMALL_SHAPES)
    lp, idx = build_relaxation(p)
    assert lp.num_vars == 40 * 3
    assert lp.num_rows == 40 + 3 * 2
    assert len(idx.tags) == lp.num_rows and len(set(idx.tags)) == lp.num_rows


def test_label_filter_drops_columns():
    shapes = [MachineShape("a", (4, 8), {"ssd"}), MachineShape("b", (4, 8))]
    tasks = [Task("x", (1, 1), required_labels={"ssd"}), Task("y", (1, 1))]
    lp, idx = build_relaxation(PlacementProblem(tasks, Cluster.from_counts(shapes, {"a": 1, "b": 1})))
    assert lp.num_vars == 3
    assert sorted(zip(idx.col_task.tolist(), idx.col_shape.tolist())) == [(0, 0), (1, 0), (1, 1)]


def test_group_row_bound_is_limit_times_servers():
    shape = MachineShape("m", (4, 8))
    tasks = [Task(f"r{k}", (1, 1), group="g") for k in range(5)]
    p = PlacementProblem(tasks, Cluster.from_counts([shape], {"m": 3}), {"g": JobGroup("g", 1)},
                         PricingOptions(anti_affinity_in_lp=True))
    lp, idx = build_relaxation(p)
    row = idx.group_rows[("g", "m")]
    assert lp.h[row] == 3
    assert lp.G[row].toarray().ravel().tolist() == [1.0] * 5
    sol = lpcore.solve(lp)
    assert sol.primal_objective == pytest.approx(3.0)
    prices = extract_prices(sol, idx, p)
    assert prices.group_prices[("g", "m")] == pytest.approx(1.0)


def test_group_rows_use_residual_slots():
    shape = MachineShape("m", (4, 8))
    cl = Cluster([shape], [("a", "m"), ("b", "m"), ("c", "m")], group_counts=[{"g": 1}, {}, {"g": 2}])
    p = PlacementProblem([Task("r", (1, 1), group="g")], cl, {"g": JobGroup("g", 2)},
                         PricingOptions(anti_affinity_in_lp=True))
    lp, idx = build_relaxation(p)
    assert lp.h[idx.group_rows[("g", "m")]] == 1 + 2 + 0


def test_global_mode_pools_everything():
    cl = aws(10)
    p = PlacementProblem([Task("t", (1000, 1000))], cl, options=PricingOptions(mode="global"))
    lp, idx = build_relaxation(p)
    assert idx.shape_ids == [GLOBAL_SHAPE]
    assert lp.h[idx.capacity_rows[0]].tolist() == cl.remaining.sum(axis=0).tolist()


def test_single_resource_price_matches_enumeration():
    p = one_dim_problem()
    _, yref, _ = dual_by_vertices([3, 1, 1], [[2, 2, 2]], [4])
    prices = compute_prices(p)
    assert prices.prices_for("m")[0] == pytest.approx(yref[0]) == pytest.approx(0.5)
    assert prices.lp_objective == pytest.approx(4.0)
    assert prices.meta["lp_ms"] >= 0 and prices.meta["lp_rows"] == 4


def test_all_slack_means_zero_prices():
    cl = aws(20)
    p = PlacementProblem([Task(f"t{j}", (1000, 1024), 1 + j % 3) for j in range(10)], cl)
    prices = compute_prices(p)
    assert all(np.all(v == 0) for v in prices.shape_prices.values())


def test_memory_tight_shape_prices_memory():
    # memory binds, cpu is slack: only the memory row can carry a price
    shape = MachineShape("m", (100, 10))
    tasks = [Task(f"t{j}", (1, 4), p) for j, p in enumerate([4, 2, 2, 1])]
    p = PlacementProblem(tasks, Cluster.from_counts([shape], {"m": 1}))
    prices = compute_prices(p)
    cpu, mem = prices.prices_for("m")
    # reference: same LP by vertex enumeration; value rises by the memory price per unit
    G = np.array([[1, 1, 1, 1], [4, 4, 4, 4]], float)
    c = [4, 2, 2, 1]
    dref, yref, _ = dual_by_vertices(c, G, [100, 10])
    assert mem > cpu
    assert mem == pytest.approx(yref[1])
    assert prices.lp_objective == pytest.approx(dref)


def test_non_optimal_status_raises_with_status():
    p = one_dim_problem()
    lp, idx = build_relaxation(p)
    bad = lpcore.LpSolution(lpcore.ITERATION_LIMIT, np.zeros(3), np.zeros(4), 0.0, 0.0)
    with pytest.raises(PricingError) as exc:
        extract_prices(bad, idx, p)
    assert exc.value.status == lpcore.ITERATION_LIMIT


def test_negative_dual_is_a_certificate_error():
    p = one_dim_problem()
    lp, idx = build_relaxation(p)
    sol = lpcore.solve(lp)
    sol.y = sol.y.copy()
    sol.y[3] = -1e-3
    with pytest.raises(PricingError, match="certificate"):
        extract_prices(sol, idx, p)


def test_no_servers_is_rejected():
    p = PlacementProblem([Task("t", (1, 1))], Cluster([MachineShape("m", (1, 1))], []))
    with pytest.raises(PricingError):
        build_relaxation(p)


def test_server_count_invariance_of_lp_size():
    base = traceio.synthetic_instance(100, 300, seed=2, shapes=traceio.AWS_SHAPES)
    big = PlacementProblem(base.tasks, aws(10_000))
    a, _ = build_relaxation(base)
    b, _ = build_relaxation(big)
    assert (a.num_vars, a.num_rows, a.G.nnz) == (b.num_vars, b.num_rows, b.G.nnz)


def test_priority_scaling_covariance():
    shape = MachineShape("m", (10, 40))
    tasks = [Task(f"t{j}", (d1, d2), p) for j, (d1, d2, p) in
             enumerate([(3, 4, 8), (5, 10, 2), (4, 16, 4), (2, 20, 1), (6, 8, 2)])]
    opts = PricingOptions(**NO_GPU_ADJUSTMENTS)
    base = compute_prices(PlacementProblem(tasks, Cluster.from_counts([shape], {"m": 1}), options=opts))
    scaled_tasks = [Task(t.id, t.demand, 3.5 * t.priority) for t in tasks]
    scaled = compute_prices(PlacementProblem(scaled_tasks, Cluster.from_counts([shape], {"m": 1}), options=opts))
    assert scaled.lp_objective == pytest.approx(3.5 * base.lp_objective, rel=1e-7)
    assert np.allclose(scaled.prices_for("m"), 3.5 * base.prices_for("m"), rtol=1e-6, atol=1e-9)


def test_zero_gpu_knobs_reduce_to_priorities():
    shapes = [MachineShape("g", (8, 8, 2), is_gpu=True), MachineShape("c", (8, 8, 0))]
    tasks = [Task("a", (1, 1, 1), 4), Task("b", (1, 1, 0), 2)]
    p = PlacementProblem(tasks, Cluster.from_counts(shapes, {"g": 1, "c": 1}),
                         options=PricingOptions(**NO_GPU_ADJUSTMENTS), resources=(CPU, MEM, GPU))
    coef = objective_coefficients(p, np.array([True, False]))
    assert coef.tolist() == [[4, 4], [2, 2]]


def test_gpu_objective_terms():
    shapes = [MachineShape("g", (8, 8, 2), is_gpu=True), MachineShape("c", (8, 8, 0))]
    tasks = [Task("a", (1, 1, 1), 4), Task("b", (1, 1, 0), 2)]
    p = PlacementProblem(tasks, Cluster.from_counts(shapes, {"g": 1, "c": 1}),
                         options=PricingOptions(gpu_penalty=0.5, gpu_priority_boost=3), resources=(CPU, MEM, GPU))
    coef = objective_coefficients(p, np.array([True, False]))
    # the boost is a greedy-stage term unless explicitly priced
    assert coef.tolist() == [[4, 4], [1.5, 2]]
    boosted = PlacementProblem(p.tasks, p.cluster, options=PricingOptions(gpu_penalty=0.5, gpu_priority_boost=3,
                                                                          boost_in_lp=True), resources=p.resources)
    assert objective_coefficients(boosted, np.array([True, False])).tolist() == [[7, 7], [1.5, 2]]
    lp, idx = build_relaxation(p)
    # the GPU task gets no column on the CPU-only shape
    assert sorted(zip(idx.col_task.tolist(), idx.col_shape.tolist())) == [(0, 0), (1, 0), (1, 1)]


def test_prices_are_nonnegative_on_random_instances():
    for seed in range(5):
        p = traceio.synthetic_instance(8, 80, seed=seed, shapes=traceio.SMALL_SHAPES, group_fraction=0.5,
                                       options=PricingOptions(anti_affinity_in_lp=True))
        prices = compute_prices(p)
        assert all(np.all(v >= 0) for v in prices.shape_prices.values())
        assert all(v >= 0 for v in prices.group_prices.values())


def test_price_table_serializes():
    p = one_dim_problem()
    d = compute_prices(p).to_dict(p.resources)
    assert d["mode"] == "shape" and d["shape_prices"]["m"]["unit"] == pytest.approx(0.5)


@pytest.mark.parametrize("aa", [False, True])
def test_collapsed_solve_matches_full_lp(aa):
    for seed in range(4):
        kw = dict(group_fraction=0.5, replicas=2, group_limit=1, gpu_fraction=0.3, gpu_amounts=(1,),
                  shapes=traceio.SMALL_SHAPES + traceio.SMALL_GPU_SHAPES)
        p = traceio.synthetic_instance(6, 300, seed=seed, options=PricingOptions(anti_affinity_in_lp=aa), **kw)
        q = traceio.synthetic_instance(6, 300, seed=seed,
                                       options=PricingOptions(anti_affinity_in_lp=aa, collapse_tasks=False), **kw)
        a, b = compute_prices(p), compute_prices(q)
        assert a.meta["task_classes"] < 300 == b.meta["task_classes"]
        assert a.lp_objective == pytest.approx(b.lp_objective, rel=1e-7)
        assert (a.meta["lp_vars"], a.meta["lp_rows"]) == (b.meta["lp_vars"], b.meta["lp_rows"])
        # the expanded pair must certify the per-task LP
        lp, idx, sol = solve_relaxation(p)
        v = lpcore.certificate_violations(lp, sol)
        assert max(v.values()) <= 1e-6, v


def test_identical_tasks_share_one_class():
    shape = MachineShape("m", (4, 16))
    tasks = [Task(f"t{k}", (1, 2), 2) for k in range(5)] + [Task("g", (1, 2), 2, group="x")]
    p = PlacementProblem(tasks, Cluster.from_counts([shape], {"m": 1}), {"x": JobGroup("x", 1)})
    prices = compute_prices(p)
    assert prices.meta["task_classes"] == 2
    # six tasks, room for four by cpu: cpu is priced at the priority per core, memory is slack
    assert prices.lp_objective == pytest.approx(8.0)
    assert prices.shape_prices["m"].tolist() == pytest.approx([2.0, 0.0])
