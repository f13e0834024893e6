"""Directed task-relationship matrices: the enumeration oracle and cheaper estimators.

``score[s][t]`` is always the effect of source task s on target task t. The
diagonal is unused and kept as NaN.
"""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .datasets import Batch, MultiTaskDataset
from .diffcore import Graph, backward, cosine_lr, evaluate, forward_values, sgd_step
from .errors import ContractError
from .metrics import metric_specs, relative_improvement, task_metrics
from .model import (ArchitectureConfig, MtlModel, Route, TaskSpec, add_loss, build_model, decoder_prefixes,
                    dense_chain, encoder_prefixes, init_dense, training_graph)
from .trainer import TrainerConfig, _cycle, evaluate_metrics, train_run


@dataclass
class RelationshipMatrix:
    method: str
    scores: np.ndarray
    baseline: dict[int, float] = field(default_factory=dict)
    pairwise: dict[tuple[int, int], float] = field(default_factory=dict)
    higher_is_better: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.array(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.scores.shape[1]:
            raise ContractError(f"relationship scores must be square, got {self.scores.shape}")
        np.fill_diagonal(self.scores, np.nan)

    @property
    def num_tasks(self) -> int:
        return self.scores.shape[0]

    def __getitem__(self, key: tuple[int, int]) -> float:
        return float(self.scores[key])

    def oriented(self) -> np.ndarray:
        return self.scores if self.higher_is_better else -self.scores

    def to_json(self) -> dict:
        def cell(v):
            return None if not math.isfinite(v) else float(v)
        return {
            "method": self.method,
            "higher_is_better": self.higher_is_better,
            "scores": [[cell(v) for v in row] for row in self.scores],
            "baseline": {str(t): v for t, v in self.baseline.items()},
            "pairwise": {f"{s}->{t}": v for (s, t), v in self.pairwise.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RelationshipMatrix":
        scores = [[math.nan if v is None else v for v in row] for row in obj["scores"]]
        pairwise = {}
        for key, v in obj.get("pairwise", {}).items():
            s, _, t = key.partition("->")
            pairwise[(int(s), int(t))] = float(v)
        return cls(obj["method"], np.array(scores, dtype=np.float64),
                   {int(t): float(v) for t, v in obj.get("baseline", {}).items()}, pairwise,
                   bool(obj.get("higher_is_better", True)), dict(obj.get("meta", {})))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RelationshipMatrix":
        return cls.from_json(json.loads(Path(path).read_text()))


def render_heatmap(rel: RelationshipMatrix, names: Sequence[str] | None = None, width: int = 9) -> str:
    """Fixed-width signed text grid, rows = source, columns = target."""
    T = rel.num_tasks
    names = list(names or rel.meta.get("task_names") or [str(t) for t in range(T)])
    lines = [f"{rel.method}: score[source][target]" + ("" if rel.higher_is_better else " (lower = more related)"),
             "src\\tgt".ljust(width) + "".join(n[:width - 1].rjust(width) for n in names)]
    for s in range(T):
        cells = []
        for t in range(T):
            v = rel.scores[s, t]
            cells.append("--".rjust(width) if s == t else ("nan".rjust(width) if not math.isfinite(v)
                                                           else f"{v:+.3f}".rjust(width)))
        lines.append(names[s][:width - 1].ljust(width) + "".join(cells))
    return "\n".join(lines)


def average_matrices(mats: Sequence[RelationshipMatrix]) -> RelationshipMatrix:
    if not mats:
        raise ContractError("nothing to average")
    stack = np.stack([m.scores for m in mats])
    first = mats[0]
    baseline = {t: float(np.mean([m.baseline[t] for m in mats])) for t in first.baseline}
    pairwise = {k: float(np.mean([m.pairwise[k] for m in mats])) for k in first.pairwise}
    meta = dict(first.meta, seeds=[m.meta.get("seed") for m in mats])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        scores = np.nanmean(stack, axis=0)
    return RelationshipMatrix(first.method, scores, baseline, pairwise, first.higher_is_better, meta)


def _map(fn: Callable, jobs_args: Sequence[tuple], jobs: int = 1) -> list:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(*a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*jobs_args)))


# single-task baselines and the enumeration oracle

@dataclass
class StlResult:
    task: str
    val_metrics: dict[str, float]
    test_metrics: dict[str, float]
    model: MtlModel


def stl_config(config: TrainerConfig) -> TrainerConfig:
    return config.replace(strategy="equal", shared_depth=None)


def train_stl(dataset: MultiTaskDataset, task_id: int, arch: ArchitectureConfig,
              config: TrainerConfig) -> StlResult:
    """Same architecture with nothing shared, trained on one task alone."""
    sub = dataset.subset([task_id])
    model, history, ckpt = train_run(sub, sub.task_specs, arch.with_shared_depth(0), stl_config(config))
    best = ckpt.restore(model)
    name = sub.task_specs[0].name
    return StlResult(name, evaluate_metrics(best, sub, "val")[name], evaluate_metrics(best, sub, "test")[name], best)


def train_stl_baselines(dataset: MultiTaskDataset, arch: ArchitectureConfig, config: TrainerConfig,
                        jobs: int = 1) -> dict[str, StlResult]:
    results = _map(train_stl, [(dataset, t, arch, config) for t in range(len(dataset.task_specs))], jobs)
    return {r.task: r for r in results}


def _train_pair(dataset: MultiTaskDataset, pair: tuple[int, int], arch: ArchitectureConfig,
                config: TrainerConfig, reference: dict) -> dict[str, float]:
    sub = dataset.subset(list(pair))
    shared_bottom = arch.with_shared_depth(arch.total_encoder_depth)
    ref = {t.name: reference[t.name] for t in sub.task_specs}
    _, _, ckpt = train_run(sub, sub.task_specs, shared_bottom, config.replace(strategy="equal", shared_depth=None),
                           reference=ref)
    return dict(ckpt.report.per_task)


def enumerate_pairwise(dataset: MultiTaskDataset, tasks: Sequence[TaskSpec] | None, arch: ArchitectureConfig,
                       config: TrainerConfig, stl: Mapping[str, StlResult] | None = None,
                       jobs: int = 1) -> RelationshipMatrix:
    """Train every task alone and every pair on a shared-bottom model.

    score[s][t] is task t's validation relative improvement (percent) in the
    pair {s, t} over its single-task baseline. ``stl`` reuses already trained
    baselines; ``meta['runs']`` counts the trainings actually performed.
    """
    tasks = list(tasks) if tasks is not None else dataset.task_specs
    T = len(tasks)
    if T < 2:
        raise ContractError("enumeration needs at least two tasks")
    runs = 0
    if stl is None:
        stl = train_stl_baselines(dataset, arch, config, jobs)
        runs += T
    reference = {name: r.val_metrics for name, r in stl.items()}
    pairs = [(a, b) for a in range(T) for b in range(a + 1, T)]
    try:
        results = _map(_train_pair, [(dataset, p, arch, config, reference) for p in pairs], jobs)
    except Exception as exc:
        raise type(exc)(f"pairwise enumeration failed: {exc}") from exc
    runs += len(pairs)
    scores = np.full((T, T), np.nan)
    pairwise = {}
    for (a, b), deltas in zip(pairs, results):
        scores[b, a] = pairwise[(b, a)] = deltas[tasks[a].name]
        scores[a, b] = pairwise[(a, b)] = deltas[tasks[b].name]
    return RelationshipMatrix("enum", scores, {t: 0.0 for t in range(T)}, pairwise, True,
                              {"runs": runs, "seed": config.seed, "task_names": [t.name for t in tasks],
                               "stl_val_metrics": reference})


# look-ahead and gradient angle

def _primary_graphs(model: MtlModel) -> list[Graph]:
    return [training_graph(model, {Route.primary(t).route_id: 1.0}) for t in range(model.num_tasks)]


def lookahead_scores(loss_graphs: Sequence[Graph], params: Mapping[str, np.ndarray],
                     step_inputs: Mapping[str, np.ndarray], eval_inputs: Mapping[str, np.ndarray],
                     eta: float) -> np.ndarray:
    """score[s][t] = L_t(theta) - L_t(theta - eta * grad L_s(theta)); positive means s helps t."""
    T = len(loss_graphs)
    before = [float(evaluate(g, params, eval_inputs)) for g in loss_graphs]
    scores = np.full((T, T), np.nan)
    for s in range(T):
        moved = sgd_step(params, backward(loss_graphs[s], params, step_inputs), eta)
        for t in range(T):
            if t != s:
                scores[s, t] = before[t] - float(evaluate(loss_graphs[t], moved, eval_inputs))
    return scores


def lookahead_loss(model: MtlModel, tasks, train_batch: Batch, val_batch: Batch,
                   eta: float) -> tuple[RelationshipMatrix, RelationshipMatrix]:
    """One-step look-ahead; returns the (train, validation) variants."""
    graphs = _primary_graphs(model)
    params = model.params.tensors
    train = lookahead_scores(graphs, params, train_batch.inputs(), train_batch.inputs(), eta)
    val = lookahead_scores(graphs, params, train_batch.inputs(), val_batch.inputs(), eta)
    return RelationshipMatrix("lookahead_train", train), RelationshipMatrix("lookahead_val", val)


def angle(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return math.nan
    return math.acos(max(-1.0, min(1.0, float(u @ v) / (nu * nv))))


def angle_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    T = len(vectors)
    out = np.full((T, T), np.nan)
    for s in range(T):
        for t in range(s + 1, T):
            out[s, t] = out[t, s] = angle(vectors[s], vectors[t])
    return out


def shared_gradients(model: MtlModel, batch: Batch) -> list[np.ndarray]:
    shared = sorted(model.params.ids_in("shared"))
    if not shared:
        raise ContractError("gradient angle needs shared parameters")
    out = []
    for g in _primary_graphs(model):
        grads = backward(g, model.params.tensors, batch.inputs(), wrt=set(shared))
        out.append(np.concatenate([grads[k].reshape(-1) for k in shared]))
    return out


def gradient_angle(model: MtlModel, tasks, batch: Batch) -> RelationshipMatrix:
    """Angle between shared-parameter gradients; NaN marks a zero-norm gradient."""
    return RelationshipMatrix("gradangle", angle_matrix(shared_gradients(model, batch)), higher_is_better=False)


def estimate_during_training(dataset: MultiTaskDataset, arch: ArchitectureConfig, config: TrainerConfig,
                             every: int = 10) -> dict[str, RelationshipMatrix]:
    """Train a shared-bottom model with equal weighting and probe every ``every`` batches.

    Returns the median look-ahead (train and val) and gradient-angle matrices.
    """
    val_iter = _cycle(dataset, "val", config.batch_size, np.random.default_rng(np.random.SeedSequence([config.seed, 4])))
    samples: dict[str, list[np.ndarray]] = {"lookahead_train": [], "lookahead_val": [], "gradangle": []}

    def probe(model, step, batch, eta):
        if step % every:
            return
        tr, va = lookahead_loss(model, None, batch, next(val_iter), eta)
        samples["lookahead_train"].append(tr.scores)
        samples["lookahead_val"].append(va.scores)
        samples["gradangle"].append(gradient_angle(model, None, batch).scores)

    shared_bottom = arch.with_shared_depth(arch.total_encoder_depth)
    train_run(dataset, dataset.task_specs, shared_bottom, config.replace(strategy="equal", shared_depth=None),
              probe=probe)
    names = [t.name for t in dataset.task_specs]
    out = {}
    for method, mats in samples.items():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # the all-NaN diagonal
            med = np.nanmedian(np.stack(mats), axis=0)
        out[method] = RelationshipMatrix(method, med, higher_is_better=(method != "gradangle"),
                                         meta={"samples": len(mats), "every": every, "seed": config.seed,
                                               "task_names": names})
    return out


# feature transfer

def _transfer_graph(source_prefixes: Sequence[str], activation: str, target: TaskSpec,
                    decoder_depth: int) -> Graph:
    g = Graph()
    h = dense_chain(g, g.input("x"), source_prefixes, activation, False)
    h = dense_chain(g, h, ["xfer0", "xfer1"], activation, False)
    pred = dense_chain(g, h, [f"tdec{j}" for j in range(decoder_depth)] + ["thead"], activation, True)
    g.mark("pred", pred)
    spec = TaskSpec(0, target.name, target.kind, target.dim)
    g.set_output(add_loss(g, spec, pred))
    return g


def transfer_fine_tune(dataset: MultiTaskDataset, source_model: MtlModel, target: TaskSpec,
                       arch: ArchitectureConfig, config: TrainerConfig) -> tuple[dict[str, float], dict]:
    """Freeze ``source_model``'s encoder, train a two-layer transfer head plus a
    fresh decoder for ``target``. Returns (best validation metrics, frozen params)."""
    enc = encoder_prefixes(source_model, 0)
    frozen = {pid: source_model.params.tensors[pid] for p in enc for pid in (f"{p}.W", f"{p}.b")}
    width = arch.hidden_width
    enc_out = width if arch.total_encoder_depth else arch.input_dim
    trainable: dict[str, np.ndarray] = {}
    fan_in = enc_out
    layers = [("xfer0", width), ("xfer1", width)] + [(f"tdec{j}", width) for j in range(arch.decoder_depth)]
    layers.append(("thead", target.dim))
    for name, fan_out in layers:
        w, b = init_dense(f"transfer/{target.name}/{name}", config.seed, fan_in, fan_out)
        trainable[f"{name}.W"], trainable[f"{name}.b"] = w, b
        fan_in = fan_out
    g = _transfer_graph(enc, arch.activation, target, arch.decoder_depth)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 5]))
    labels = dataset.labels[target.task_id]
    val_rows = dataset.splits["val"]
    best, best_key = None, None
    for epoch in range(config.epochs):
        eta = cosine_lr(epoch, config.epochs, config.eta0)
        for batch in dataset.batches("train", config.batch_size, rng):
            inputs = {"x": batch.x, "y0": batch.labels[target.task_id]}
            grads = backward(g, {**frozen, **trainable}, inputs, wrt=set(trainable))
            trainable = sgd_step(trainable, grads, eta)
        values = forward_values(g, {**frozen, **trainable}, {"x": dataset.features[val_rows], "y0": labels[val_rows]})
        pred = values[g.names["pred"]]
        metrics = task_metrics(pred, labels[val_rows], target)
        key = sum((-v if m.lower_is_better else v) for m, v in zip(metric_specs(target), metrics.values()))
        if best_key is None or key > best_key:
            best, best_key = metrics, key
    return best, frozen


def feature_transfer_similarity(dataset: MultiTaskDataset, tasks: Sequence[TaskSpec] | None,
                                arch: ArchitectureConfig, config: TrainerConfig,
                                stl: Mapping[str, StlResult] | None = None) -> RelationshipMatrix:
    """score[s][t]: validation relative improvement of target t when fine-tuned on
    top of source s's frozen single-task encoder. The diagonal self-transfer
    control is kept in ``meta['self_transfer']``."""
    tasks = list(tasks) if tasks is not None else dataset.task_specs
    T = len(tasks)
    stl = stl or train_stl_baselines(dataset, arch, config)
    raw: dict[str, dict[str, dict[str, float]]] = {}
    scores = np.full((T, T), np.nan)
    self_transfer = {}
    for s in range(T):
        src = stl[tasks[s].name].model
        for t in range(T):
            metrics, _ = transfer_fine_tune(dataset, src, tasks[t], arch, config)
            raw.setdefault(tasks[s].name, {})[tasks[t].name] = metrics
            rep = relative_improvement({tasks[t].name: metrics}, {tasks[t].name: stl[tasks[t].name].val_metrics},
                                       {tasks[t].name: metric_specs(tasks[t])})
            if s == t:
                self_transfer[tasks[t].name] = rep.per_task[tasks[t].name]
            else:
                scores[s, t] = rep.per_task[tasks[t].name]
    return RelationshipMatrix("feature", scores, meta={"seed": config.seed, "task_names": [t.name for t in tasks],
                                                       "transfer_metrics": raw, "self_transfer": self_transfer,
                                                       "stl_val_metrics": {k: v.val_metrics for k, v in stl.items()}})


def saal_w_matrix(raw_coefficients: Mapping, num_tasks: int, names=None) -> RelationshipMatrix:
    """End-of-training SAAL_w self-auxiliary coefficients as a relationship estimate."""
    from .strategies import CoefficientSet
    coeffs = CoefficientSet.from_json(raw_coefficients)
    scores = np.full((num_tasks, num_tasks), np.nan)
    for (s, t), w in coeffs.aux.items():
        scores[s, t] = w
    return RelationshipMatrix("saalw", scores, meta={"task_names": names})


# rank agreement

@dataclass
class CorrelationReport:
    per_target: dict[int, float | None]
    mean: float | None
    methods: tuple[str, str] = ("", "")

    def to_json(self) -> dict:
        return {"methods": list(self.methods), "per_target": {str(k): v for k, v in self.per_target.items()},
                "mean": self.mean}


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Pearson correlation of average ranks; None when either side is constant."""
    ra, rb = rankdata(a, method="average"), rankdata(b, method="average")
    ra, rb = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return None
    return max(-1.0, min(1.0, float(ra @ rb) / denom))


def spearman(a: RelationshipMatrix, b: RelationshipMatrix) -> CorrelationReport:
    """Per target task, rank the source tasks by each matrix and correlate."""
    if a.num_tasks != b.num_tasks:
        raise ContractError("relationship matrices cover different task sets")
    T = a.num_tasks
    if T < 3:
        raise ContractError("each target needs at least two source tasks to rank")
    oa, ob = a.oriented(), b.oriented()
    per_target = {}
    for t in range(T):
        src = [s for s in range(T) if s != t]
        per_target[t] = spearman_rho(oa[src, t], ob[src, t])
    defined = [v for v in per_target.values() if v is not None]
    return CorrelationReport(per_target, float(np.mean(defined)) if defined else None, (a.method, b.method))
