"""Two-stage cluster placement: LP shadow prices, then price-guided greedy placement."""
from .model import (CPU, GPU, MEM, Cluster, JobGroup, MachineShape, PlacementProblem, PricingOptions, Task,
                    aggregate_shapes, problem_stats, validate_problem)
from .placement import PlacementResult, greedy_place, net_utility, rank_tasks, schedule
from .pricing import PriceTable, build_relaxation, compute_prices, extract_prices

__version__ = "0.1.0"

__all__ = [
    "CPU", "GPU", "MEM", "Cluster", "JobGroup", "MachineShape", "PlacementProblem", "PricingOptions", "Task",
    "aggregate_shapes", "problem_stats", "validate_problem", "PlacementResult", "greedy_place", "net_utility",
    "rank_tasks", "schedule", "PriceTable", "build_relaxation", "compute_prices", "extract_prices",
]
