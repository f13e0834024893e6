"""Training loops for STL, shared-bottom, half-shared and SAAL configurations.

Seeding: a run's master seed initialises the model (see ``build_model``) and
derives three more streams, ``SeedSequence([seed, 1|2|3])``, for training
batch order, the cyclic validation iterator used by coefficient updates, and
PCGrad's projection order.
"""
from __future__ import annotations

import gc
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterator, Mapping

import numpy as np

from .datasets import Batch, MultiTaskDataset
from .diffcore import AdamState, GradientMap, cosine_lr, forward_values, sgd_step, value_and_grad
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .metrics import ImprovementReport, metric_specs, relative_improvement, task_metrics
from .model import ArchitectureConfig, MtlModel, ParameterStore, Route, TaskSpec, build_model, predict_primary, training_graph
from .strategies import (STRATEGIES, CoefficientSet, all_aux_coefficients, dwa_weights, equal_weights,
                         pcgrad, primary_weights, saal_enumeration, saal_weight_update,
                         training_coefficients, uncertainty_coefficients, uncertainty_log_var_grad)

if TYPE_CHECKING:
    from .relationships import RelationshipMatrix


@dataclass(frozen=True)
class TrainerConfig:
    eta0: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    omega_lr: float = 1e-4
    seed: int = 0
    strategy: str = "equal"
    shared_depth: int | None = None
    dwa_temperature: float = 2.0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.eta0 <= 0 or self.omega_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        return self

    def replace(self, **changes) -> "TrainerConfig":
        return TrainerConfig(**{**asdict(self), **changes}).validate()


@dataclass
class Checkpoint:
    epoch: int
    params: ParameterStore | None
    report: ImprovementReport

    def restore(self, model: MtlModel) -> MtlModel:
        if self.params is None:
            raise ContractError("checkpoint carries no parameters")
        return MtlModel(model.arch, model.tasks, self.params.copy(), model.routes)


@dataclass
class TrainingHistory:
    records: list[dict] = field(default_factory=list)
    snapshots: dict[int, ParameterStore] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self, path: str | Path, header: Mapping | None = None) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for rec in self.records:
                fh.write(json.dumps({**(header or {}), **rec}) + "\n")
        return path


def select_checkpoint(history: TrainingHistory) -> Checkpoint:
    """Epoch with the best validation relative improvement; earliest on ties."""
    if not history.records:
        raise ContractError("cannot select a checkpoint from an empty history")
    best = max(range(len(history.records)),
               key=lambda i: (history.records[i]["val_delta_mtl"], -i))
    rec = history.records[best]
    return Checkpoint(rec["epoch"], history.snapshots.get(rec["epoch"]),
                      ImprovementReport.from_dict(rec["val_report"]))


def evaluate_metrics(model: MtlModel, dataset: MultiTaskDataset, split: str) -> dict[str, dict[str, float]]:
    batch = dataset.split(split)
    return {spec.name: task_metrics(predict_primary(model, spec.task_id, batch.x), batch.labels[spec.task_id], spec)
            for spec in model.tasks}


def improvement(model: MtlModel, dataset: MultiTaskDataset, split: str,
                reference: Mapping[str, Mapping[str, float]]) -> ImprovementReport:
    mtl = evaluate_metrics(model, dataset, split)
    return relative_improvement(mtl, {k: reference[k] for k in mtl},
                                {t.name: metric_specs(t) for t in model.tasks})


def _cycle(dataset: MultiTaskDataset, split: str, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    while True:
        yield from dataset.batches(split, batch_size, rng)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    return tuple(np.random.default_rng(np.random.SeedSequence([seed, k])) for k in (1, 2, 3))


class Stepper:
    """Owns the model and strategy state; one call to :meth:`step` per training batch."""

    def __init__(self, model: MtlModel, config: TrainerConfig, enum_coeffs: CoefficientSet | None,
                 val_iter: Iterator[Batch] | None, pcgrad_rng: np.random.Generator):
        self.model = model
        self.config = config
        self.strategy = config.strategy
        self.mask = enum_coeffs
        self.val_iter = val_iter
        self.pcgrad_rng = pcgrad_rng
        T = model.num_tasks
        self.raw: CoefficientSet | None = None
        self.adam = AdamState()
        self.log_vars = {t: 0.0 for t in range(T)}
        self.loss_history: list[dict[int, float]] = []
        self.epoch_weights = equal_weights(T)
        if self.strategy in ("saal_e", "saal_ew") and enum_coeffs is None:
            raise ConfigError(f"strategy {self.strategy} needs enumeration relationships")
        if self.strategy in ("saal_w", "saal_ew"):
            self.raw = all_aux_coefficients(T)
            if val_iter is None:
                raise ConfigError("coefficient learning needs a validation iterator")

    def start_epoch(self):
        if self.strategy == "dwa":
            self.epoch_weights = dwa_weights(self.loss_history, self.model.num_tasks, self.config.dwa_temperature)

    def end_epoch(self, mean_primary_losses: dict[int, float]):
        self.loss_history.append(mean_primary_losses)

    def coefficients(self) -> CoefficientSet:
        s = self.strategy
        if s in ("equal", "pcgrad"):
            return equal_weights(self.model.num_tasks)
        if s == "dwa":
            return self.epoch_weights
        if s == "uncertainty":
            return uncertainty_coefficients(self.log_vars)
        if s == "saal_e":
            return training_coefficients(self.mask)
        if s == "saal_w":
            return training_coefficients(self.raw)
        return training_coefficients(self.raw, self.mask)

    def snapshot(self) -> dict:
        out = {"coefficients": self.coefficients().to_json()}
        if self.raw is not None:
            out["raw_coefficients"] = self.raw.to_json()
        if self.strategy == "uncertainty":
            out["log_vars"] = {str(t): v for t, v in self.log_vars.items()}
        return out

    def step(self, batch: Batch, eta: float) -> dict[str, float]:
        """Optional coefficient update, normalise, composite backward, one SGD step."""
        model = self.model
        if self.raw is not None:
            mask = self.mask if self.strategy == "saal_ew" else None
            self.raw, self.adam = saal_weight_update(model, self.raw, batch, next(self.val_iter), eta, eta,
                                                     self.adam, self.config.omega_lr, mask)
        if self.strategy == "pcgrad":
            losses, grads = self._pcgrad_grads(batch)
        else:
            weights = self.coefficients().route_weights()
            g = training_graph(model, weights)
            values, grads = value_and_grad(g, model.params.tensors, batch.inputs())
            losses = {rid: float(values[idx]) for rid, idx in g.names.items()}
        model.params.tensors = sgd_step(model.params.tensors, grads, eta)
        if self.strategy == "uncertainty":
            per_task = {t: losses[Route.primary(t).route_id] for t in self.log_vars}
            ds = uncertainty_log_var_grad(per_task, self.log_vars)
            self.log_vars = {t: s - eta * ds[t] for t, s in self.log_vars.items()}
        return losses

    def _pcgrad_grads(self, batch: Batch) -> tuple[dict[str, float], GradientMap]:
        model = self.model
        shared = set(model.params.ids_in("shared"))
        losses, shared_grads, merged = {}, [], {}
        for t in range(model.num_tasks):
            rid = Route.primary(t).route_id
            g = training_graph(model, {rid: 1.0})
            values, grads = value_and_grad(g, model.params.tensors, batch.inputs())
            losses[rid] = float(values[g.names[rid]])
            shared_grads.append({k: v for k, v in grads.items() if k in shared})
            for k, v in grads.items():
                if k not in shared:
                    merged[k] = merged[k] + v if k in merged else v
        if shared:
            merged.update(pcgrad(shared_grads, self.pcgrad_rng))
        return losses, merged


def enumeration_coefficients(relationships: "RelationshipMatrix | CoefficientSet | None") -> CoefficientSet | None:
    if relationships is None or isinstance(relationships, CoefficientSet):
        return relationships
    return saal_enumeration(relationships)


def train_run(dataset: MultiTaskDataset, tasks: list[TaskSpec] | None, arch: ArchitectureConfig,
              config: TrainerConfig, relationships=None,
              reference: Mapping[str, Mapping[str, float]] | None = None,
              probe: Callable | None = None) -> tuple[MtlModel, TrainingHistory, Checkpoint]:
    """Mini-batch SGD with a cosine schedule on the strategy's composite loss.

    ``relationships`` (a RelationshipMatrix or ready CoefficientSet) supplies
    the enumeration coefficients for saal_e / saal_ew. ``reference`` holds
    STL validation metrics per task name; without it, validation Δ is taken
    against the first epoch's metrics. ``probe(model, step, batch, eta)`` is
    called before every parameter step.
    """
    config.validate()
    tasks = list(tasks) if tasks is not None else dataset.task_specs
    if config.shared_depth is not None:
        arch = arch.with_shared_depth(config.shared_depth)
    arch.validate()
    model = build_model(arch, tasks, config.seed)
    batch_rng, val_rng, pc_rng = _streams(config.seed)
    needs_val = config.strategy in ("saal_w", "saal_ew")
    val_iter = _cycle(dataset, "val", config.batch_size, val_rng) if needs_val else None
    stepper = Stepper(model, config, enumeration_coefficients(relationships), val_iter, pc_rng)
    history = TrainingHistory()
    specs = {t.name: metric_specs(t) for t in tasks}
    ref = dict(reference) if reference is not None else None
    step_index = 0
    for epoch in range(config.epochs):
        eta = cosine_lr(epoch, config.epochs, config.eta0)
        stepper.start_epoch()
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        times = []
        try:
            for batch in dataset.batches("train", config.batch_size, batch_rng):
                if probe is not None:
                    probe(model, step_index, batch, eta)
                t0 = time.perf_counter()
                losses = stepper.step(batch, eta)
                times.append(time.perf_counter() - t0)
                for rid, v in losses.items():
                    sums[rid] = sums.get(rid, 0.0) + v
                    counts[rid] = counts.get(rid, 0) + 1
                step_index += 1
            val_batch = dataset.split("val")
            val_metrics = evaluate_metrics(model, dataset, "val")
        except NumericError as exc:
            raise TrainingError(f"numeric failure in epoch {epoch}: {exc}", epoch) from exc
        train_losses = {rid: sums[rid] / counts[rid] for rid in sums}
        stepper.end_epoch({t: train_losses[Route.primary(t).route_id] for t in range(model.num_tasks)})
        if ref is None:
            ref = val_metrics
        val_report = relative_improvement(val_metrics, {k: ref[k] for k in val_metrics}, specs)
        val_losses = _primary_losses(model, val_batch)
        history.records.append({
            "epoch": epoch,
            "lr": eta,
            "train_losses": train_losses,
            "val_losses": val_losses,
            "val_delta_mtl": val_report.delta_mtl,
            "val_report": val_report.to_dict(),
            "batch_seconds": float(np.mean(times)) if times else 0.0,
            **stepper.snapshot(),
        })
        history.snapshots[epoch] = model.params.copy()
    return model, history, select_checkpoint(history)


def _primary_losses(model: MtlModel, batch: Batch) -> dict[str, float]:
    g = training_graph(model, primary_weights(model.num_tasks))
    values = forward_values(g, model.params.without_self_aux(), batch.inputs())
    return {model.tasks[Route.parse(rid).target].name: float(values[idx]) for rid, idx in g.names.items()}


def time_batches(dataset: MultiTaskDataset, arch: ArchitectureConfig, config: TrainerConfig,
                 relationships=None, warmup: int = 3, samples: int = 20) -> list[float]:
    """Wall-clock seconds of ``samples`` training steps after ``warmup`` untimed ones."""
    if warmup < 1 or samples < 1:
        raise ConfigError("warmup and samples must be positive")
    config.validate()
    model = build_model(arch, dataset.task_specs, config.seed)
    batch_rng, val_rng, pc_rng = _streams(config.seed)
    val_iter = _cycle(dataset, "val", config.batch_size, val_rng)
    stepper = Stepper(model, config, enumeration_coefficients(relationships), val_iter, pc_rng)
    batches = _cycle(dataset, "train", config.batch_size, batch_rng)
    eta = config.eta0
    times = []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(warmup + samples):
            batch = next(batches)
            t0 = time.perf_counter()
            stepper.step(batch, eta)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    return times


def measure_batch_runtime(strategy: str, dataset: MultiTaskDataset, arch: ArchitectureConfig,
                          config: TrainerConfig, warmup: int = 3, samples: int = 20,
                          relationships=None) -> float:
    """Mean batch time of ``strategy`` divided by Equal weighting's on identical batches."""
    base = np.mean(time_batches(dataset, arch, config.replace(strategy="equal"), None, warmup, samples))
    mine = np.mean(time_batches(dataset, arch, config.replace(strategy=strategy), relationships, warmup, samples))
    return float(mine / base)


def compare_batch_runtimes(dataset: MultiTaskDataset, arch: ArchitectureConfig, config: TrainerConfig,
                           strategies, relationships=None, warmup: int = 3, samples: int = 20,
                           rounds: int = 3) -> dict[str, float]:
    """Seconds per batch for each strategy, robust to warm-up and drift.

    Strategies are timed in interleaved rounds; each round takes the median
    batch time and the fastest round is kept.
    """
    if rounds < 1:
        raise ConfigError("rounds must be positive")
    best: dict[str, float] = {}
    for _ in range(rounds):
        for s in strategies:
            rel = relationships if s in ("saal_e", "saal_ew") else None
            t = float(np.median(time_batches(dataset, arch, config.replace(strategy=s), rel, warmup, samples)))
            best[s] = min(best.get(s, t), t)
    return best

