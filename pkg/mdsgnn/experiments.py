import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mdsgnn.config import (
    Corruption,
    DroppedLoss,
    EncoderBackbone,
    Method,
    SweepAxis,
    TrainConfig,
)
from mdsgnn.graphdata import Graph, IncompleteGraph, corrupt
from mdsgnn.training import RunMetrics, fit, fit_baseline

logger = logging.getLogger(__name__)

SweepValue = float | int | str


@dataclass
class Summary:
    """
    Test accuracy of a group of runs that differ only in their seed.

    :ivar tag: Label of the group, e.g. ``mdsgnn``, ``w/o rec`` or ``k=5``.
    :ivar runs: Per-seed metrics, in seed order.
    :ivar mean: Mean test accuracy.
    :ivar std: Sample standard deviation; 0 for a single run.
    """

    tag: str
    method: Method
    runs: list[RunMetrics] = field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0

    @classmethod
    def of(cls, tag: str, method: Method, runs: list[RunMetrics]) -> "Summary":
        accuracies = [run.test_acc for run in runs]
        std = float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0
        return cls(tag=tag, method=method, runs=runs, mean=float(np.mean(accuracies)), std=std)

    @property
    def accuracies(self) -> list[float]:
        return [run.test_acc for run in self.runs]

    @property
    def seeds(self) -> list[int]:
        return [run.seed for run in self.runs]


@dataclass
class SweepRow:
    value: SweepValue
    summary: Summary


@dataclass
class SweepTable:
    axis: SweepAxis
    rows: list[SweepRow] = field(default_factory=list)


def prepare_graph(
    g: Graph | IncompleteGraph, corruption: Corruption | None, seed: int
) -> IncompleteGraph:
    """
    Observed graph of one run: ``g`` corrupted with ``seed``, so every method run
    with the same seed sees the same corruption.
    """
    if isinstance(g, IncompleteGraph):
        if corruption is not None:
            raise ValueError("graph is already incomplete; corruption needs the clean graph")
        return g
    if corruption is None:
        return IncompleteGraph(graph=g)
    return corrupt(g, corruption.feature_missing, corruption.edge_missing, seed)


def run_method(g: IncompleteGraph, cfg: TrainConfig, method: Method) -> RunMetrics:
    if method == Method.MDSGNN:
        return fit(g, cfg)[1]
    return fit_baseline(g, cfg, method)[1]


def run_seeds(
    g: Graph | IncompleteGraph,
    cfg: TrainConfig,
    seeds: Sequence[int],
    corruption: Corruption | None = None,
    method: Method = Method.MDSGNN,
    tag: str | None = None,
    workers: int = 1,
) -> Summary:
    """
    Run ``method`` once per seed and summarise test accuracy.

    Corruption is redrawn for every seed. With ``workers > 1`` runs execute in a
    thread pool; results keep seed order either way.
    """
    if not seeds:
        raise ValueError("run_seeds needs at least one seed")

    def run(seed: int) -> RunMetrics:
        return run_method(prepare_graph(g, corruption, seed), cfg.replace(seed=seed), method)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run, seeds))
    else:
        runs = [run(seed) for seed in seeds]

    summary = Summary.of(tag or str(method), method, runs)
    logger.info("%s: %.4f ± %.4f over %s seeds", summary.tag, summary.mean, summary.std, len(runs))
    return summary


def ablated_config(cfg: TrainConfig, drop: DroppedLoss) -> TrainConfig:
    if drop == DroppedLoss.REC:
        return cfg.replace(mu=0.0)
    if drop == DroppedLoss.CL:
        return cfg.replace(gamma=0.0)
    return cfg.replace(mu=0.0, gamma=0.0)


def ablate(
    g: Graph | IncompleteGraph,
    cfg: TrainConfig,
    drop: DroppedLoss,
    seeds: Sequence[int],
    corruption: Corruption | None = None,
    workers: int = 1,
) -> Summary:
    """
    Remove a loss term (reconstruction, contrastive or both) and rerun the seeds.
    """
    return run_seeds(
        g, ablated_config(cfg, drop), seeds, corruption, tag=drop.tag, workers=workers
    )


def compare(
    g: Graph | IncompleteGraph,
    cfg: TrainConfig,
    methods: Sequence[Method],
    seeds: Sequence[int],
    corruption: Corruption | None = None,
    workers: int = 1,
) -> dict[Method, Summary]:
    return {
        method: run_seeds(g, cfg, seeds, corruption, method=method, workers=workers)
        for method in methods
    }


def coerce_sweep_value(axis: SweepAxis, raw: str) -> SweepValue:
    """
    Parse one textual sweep value for ``axis``.

    :raises ValueError: If the value does not fit the axis.
    """
    if axis in (SweepAxis.FEATURE_MISSING, SweepAxis.EDGE_MISSING, SweepAxis.MISSING_RATE):
        value = float(raw)
        if not 0 <= value <= 1:
            raise ValueError(f"{axis} values should be in [0, 1], got {raw}")
        return value
    if axis in (SweepAxis.K, SweepAxis.L):
        value = int(raw)
        if value < 1:
            raise ValueError(f"{axis} values should be at least 1, got {raw}")
        return value
    return str(EncoderBackbone(raw))


def _point(
    axis: SweepAxis, value: SweepValue, cfg: TrainConfig, corruption: Corruption | None
) -> tuple[TrainConfig, Corruption | None]:
    base = corruption or Corruption(feature_missing=0.0, edge_missing=0.0)
    if axis == SweepAxis.FEATURE_MISSING:
        return cfg, Corruption(feature_missing=float(value), edge_missing=base.edge_missing)
    if axis == SweepAxis.EDGE_MISSING:
        return cfg, Corruption(feature_missing=base.feature_missing, edge_missing=float(value))
    if axis == SweepAxis.MISSING_RATE:
        return cfg, Corruption(feature_missing=float(value), edge_missing=float(value))
    if axis == SweepAxis.K:
        return cfg.replace(knn_k=int(value)), corruption
    if axis == SweepAxis.L:
        return cfg.replace(ppr_steps=int(value)), corruption
    return cfg.replace(backbone=EncoderBackbone(value)), corruption


def sweep(
    g: Graph | IncompleteGraph,
    cfg: TrainConfig,
    axis: SweepAxis,
    values: Sequence[SweepValue],
    seeds: Sequence[int],
    corruption: Corruption | None = None,
    method: Method = Method.MDSGNN,
    workers: int = 1,
) -> SweepTable:
    """
    Rerun the seeds once per value of ``axis`` and collect mean and std per value.

    Missing-rate axes override the matching rate of ``corruption`` and need the
    clean graph.
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    table = SweepTable(axis=axis)
    for value in values:
        point_cfg, point_corruption = _point(axis, value, cfg, corruption)
        summary = run_seeds(
            g,
            point_cfg,
            seeds,
            point_corruption,
            method=method,
            tag=f"{axis}={value}",
            workers=workers,
        )
        table.rows.append(SweepRow(value=value, summary=summary))
    return table
