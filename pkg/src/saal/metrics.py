"""Per-task metrics and relative improvement over single-task baselines."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .model import TaskSpec


@dataclass(frozen=True)
class MetricSpec:
    name: str
    lower_is_better: bool


ACCURACY = MetricSpec("accuracy", lower_is_better=False)
MSE = MetricSpec("mse", lower_is_better=True)


def metric_specs(task: TaskSpec) -> list[MetricSpec]:
    return [ACCURACY] if task.kind == "classification" else [MSE]


def task_metrics(predictions: np.ndarray, labels: np.ndarray, task: TaskSpec) -> dict[str, float]:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if task.kind == "classification":
        if predictions.ndim == 2:
            predictions = predictions.argmax(axis=1)
        if predictions.shape != labels.reshape(-1).shape:
            raise DimensionError(f"{predictions.shape} predictions for {labels.shape} labels")
        return {"accuracy": float(np.mean(predictions == labels.reshape(-1)))}
    if predictions.shape != labels.shape:
        raise DimensionError(f"{predictions.shape} predictions for {labels.shape} labels")
    return {"mse": float(np.mean((predictions - labels) ** 2))}


@dataclass
class ImprovementReport:
    per_task: dict[str, float]
    delta_mtl: float
    mtl_metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    stl_metrics: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_task": self.per_task, "delta_mtl": self.delta_mtl,
                "mtl_metrics": self.mtl_metrics, "stl_metrics": self.stl_metrics}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ImprovementReport":
        return cls(dict(obj["per_task"]), float(obj["delta_mtl"]),
                   {k: dict(v) for k, v in obj.get("mtl_metrics", {}).items()},
                   {k: dict(v) for k, v in obj.get("stl_metrics", {}).items()})


def task_delta(mtl: Mapping[str, float], stl: Mapping[str, float],
               lower_is_better: Mapping[str, bool]) -> float:
    if set(mtl) != set(stl):
        raise ContractError(f"metric sets differ: {sorted(mtl)} vs {sorted(stl)}")
    if not mtl:
        raise ContractError("a task needs at least one metric")
    total = 0.0
    for name, m in mtl.items():
        s = stl[name]
        if s == 0:
            raise ZeroDivisionError(f"baseline value of metric {name!r} is zero")
        sign = -1.0 if lower_is_better[name] else 1.0
        total += sign * (m - s) / s
    return 100.0 * total / len(mtl)


def relative_improvement(mtl_metrics: Mapping[str, Mapping[str, float]],
                         stl_metrics: Mapping[str, Mapping[str, float]],
                         specs: Mapping[str, Sequence[MetricSpec]]) -> ImprovementReport:
    """Signed percent change of each task's metrics against its STL baseline.

    All three mappings are keyed by task name; ``specs`` gives each task's
    metrics with their direction.
    """
    if set(mtl_metrics) != set(stl_metrics) or set(mtl_metrics) != set(specs):
        raise ContractError("task sets differ between MTL metrics, STL metrics and specs")
    per_task = {}
    for task, metric_list in specs.items():
        direction = {m.name: m.lower_is_better for m in metric_list}
        if set(direction) != set(mtl_metrics[task]):
            raise ContractError(f"task {task!r}: metric names do not match its specs")
        per_task[task] = task_delta(mtl_metrics[task], stl_metrics[task], direction)
    return ImprovementReport(per_task, aggregate(per_task.values()),
                             {k: dict(v) for k, v in mtl_metrics.items()},
                             {k: dict(v) for k, v in stl_metrics.items()})


def aggregate(task_deltas) -> float:
    vals = list(task_deltas)
    if not vals:
        raise ContractError("no task deltas to aggregate")
    return sum(vals) / len(vals)


def mean_report(reports: Sequence[ImprovementReport]) -> ImprovementReport:
    if not reports:
        raise ContractError("no reports to average")
    tasks = list(reports[0].per_task)
    per_task = {t: float(np.mean([r.per_task[t] for r in reports])) for t in tasks}

    def avg_metrics(attr):
        first = getattr(reports[0], attr)
        return {t: {m: float(np.mean([getattr(r, attr)[t][m] for r in reports])) for m in first[t]}
                for t in first}

    return ImprovementReport(per_task, aggregate(per_task.values()),
                             avg_metrics("mtl_metrics"), avg_metrics("stl_metrics"))


def format_table(rows: Mapping[str, ImprovementReport]) -> str:
    """Aligned text table: relative improvements first, then raw metrics."""
    if not rows:
        return ""
    first = next(iter(rows.values()))
    tasks = list(first.per_task)
    metric_cols = [(t, m) for t in tasks for m in first.mtl_metrics.get(t, {})]
    header = (["method"] + [f"D_{t}" for t in tasks] + ["D_MTL"]
              + [f"{t}.{m}" for t, m in metric_cols])
    body = []
    if first.stl_metrics:
        body.append(["STL"] + ["0.00"] * (len(tasks) + 1)
                    + [f"{first.stl_metrics[t][m]:.4f}" for t, m in metric_cols])
    for name, rep in rows.items():
        body.append([name] + [f"{rep.per_task[t]:.2f}" for t in tasks] + [f"{rep.delta_mtl:.2f}"]
                    + [f"{rep.mtl_metrics[t][m]:.4f}" for t, m in metric_cols])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
