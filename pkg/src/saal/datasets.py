"""Synthetic multi-task datasets with planted relationships, and CSV ingestion."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .model import TaskSpec

DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)
SPLITS = ("train", "val", "test")


@dataclass
class Batch:
    x: np.ndarray
    labels: dict[int, np.ndarray]

    def inputs(self) -> dict[str, np.ndarray]:
        out = {"x": self.x}
        out.update({f"y{t}": y for t, y in self.labels.items()})
        return out

    def __len__(self):
        return len(self.x)


@dataclass
class MultiTaskDataset:
    features: np.ndarray
    labels: dict[int, np.ndarray]
    splits: dict[str, np.ndarray]
    task_specs: list[TaskSpec]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.features)
        for t, y in self.labels.items():
            if len(y) != n:
                raise ConfigError(f"task {t} has {len(y)} labels for {n} rows")
        idx = np.concatenate([self.splits[s] for s in SPLITS])
        if len(idx) != n or len(np.unique(idx)) != n:
            raise ConfigError("splits must be disjoint and cover every row")

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def batch(self, rows: np.ndarray) -> Batch:
        return Batch(self.features[rows], {t: y[rows] for t, y in self.labels.items()})

    def split(self, name: str) -> Batch:
        rows = self.splits[name]
        if len(rows) == 0:
            raise ConfigError(f"split {name!r} is empty")
        return self.batch(rows)

    def subset(self, task_ids: Sequence[int]) -> "MultiTaskDataset":
        """View restricted to some tasks, re-indexed densely in the given order."""
        specs = [TaskSpec(i, self.task_specs[t].name, self.task_specs[t].kind, self.task_specs[t].dim)
                 for i, t in enumerate(task_ids)]
        return MultiTaskDataset(self.features, {i: self.labels[t] for i, t in enumerate(task_ids)},
                                self.splits, specs, dict(self.meta, task_subset=list(task_ids)))

    def batches(self, split: str, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
        rows = self.splits[split]
        order = rows[rng.permutation(len(rows))]
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, ...]:
    """Floor each fraction's share; the remainder goes to the first (train) split."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    sizes = [math.floor(f * n + 1e-9) for f in fractions]
    sizes[0] += n - sum(sizes)
    return tuple(sizes)


def make_splits(n: int, fractions: Sequence[float], seed: int) -> dict[str, np.ndarray]:
    sizes = split_sizes(n, fractions)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117])).permutation(n)
    bounds = np.cumsum((0,) + sizes)
    return {name: np.sort(perm[bounds[i]:bounds[i + 1]]) for i, name in enumerate(SPLITS)}


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the planted-relationship generators.

    The helper task is a clean nonlinear function of every latent feature.
    The recipient's clean target is the part of the helper's sum over the
    first ``sub_features`` features (plus, in the asymmetric generator,
    ``corruption`` times features the helper never needs), and it carries
    Gaussian label noise of std ``sigma``. The defaults were tuned so the
    pairwise enumeration shows help in one direction and harm in the other.
    """
    latent_dim: int = 8
    num_samples: int = 2000
    input_dim: int = 16
    num_features: int = 16
    sub_features: int = 8
    sigma: float = 1.0
    corruption: float = 0.0
    input_noise: float = 1.0
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    extra_tasks: int = 0

    def validate(self):
        if self.sigma < 0 or self.corruption < 0 or self.input_noise < 0:
            raise ConfigError("noise scales must be non-negative")
        if min(self.latent_dim, self.num_samples, self.input_dim, self.num_features) < 1:
            raise ConfigError("dimensions must be positive")
        if not 1 <= self.sub_features <= self.num_features:
            raise ConfigError("sub_features must lie in [1, num_features]")
        if self.extra_tasks < 0:
            raise ConfigError("extra_tasks must be non-negative")
        split_sizes(self.num_samples, self.fractions)
        return self


def _nonlinear_features(z: np.ndarray, directions: np.ndarray) -> np.ndarray:
    return np.tanh(z @ directions)


def _unit_columns(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    v = rng.standard_normal((dim, count))
    return v / np.linalg.norm(v, axis=0, keepdims=True)


def _standardise(y: np.ndarray) -> np.ndarray:
    return (y - y.mean()) / y.std()


def _planted(spec: SyntheticSpec, seed: int, symmetric: bool) -> MultiTaskDataset:
    spec.validate()
    root = np.random.SeedSequence([seed, 0xA5A1])
    s_latent, s_mix, s_feat, s_noise, s_split, s_extra = root.spawn(6)
    n, k = spec.num_samples, spec.latent_dim
    z = np.random.default_rng(s_latent).standard_normal((n, k))
    mix_rng = np.random.default_rng(s_mix)
    w_x = mix_rng.standard_normal((k, spec.input_dim)) / math.sqrt(k)
    x = z @ w_x + spec.input_noise * mix_rng.standard_normal((n, spec.input_dim))

    feat_rng = np.random.default_rng(s_feat)
    directions = _unit_columns(feat_rng, k, spec.num_features)
    feats = _nonlinear_features(2.0 * z, directions)
    a = feat_rng.uniform(0.5, 1.5, spec.num_features) * feat_rng.choice([-1.0, 1.0], spec.num_features)
    clean1 = _standardise(feats @ a)

    # the recipient's clean target is a component of the helper's
    clean2 = _standardise(feats[:, :spec.sub_features] @ a[:spec.sub_features])
    if not symmetric and spec.corruption > 0:
        # products of latent pairs: features the helper's target never uses
        c_dirs = _unit_columns(feat_rng, k, 2 * spec.num_features)
        proj = z @ c_dirs
        extra = np.sum(proj[:, 0::2] * proj[:, 1::2], axis=1)
        clean2 = clean2 + spec.corruption * _standardise(extra)

    noise = np.random.default_rng(s_noise).standard_normal(n)
    noisy2 = clean2 + (0.0 if symmetric else spec.sigma) * noise
    tasks = [TaskSpec(0, "helper", "regression", 1), TaskSpec(1, "recipient", "regression", 1)]
    labels = {0: clean1[:, None], 1: noisy2[:, None]}
    clean = {0: clean1[:, None], 1: clean2[:, None]}
    # optional bystanders: clean random combinations of random feature subsets
    extra_rng = np.random.default_rng(s_extra)
    for i in range(spec.extra_tasks):
        t = 2 + i
        cols = extra_rng.choice(spec.num_features, size=max(1, spec.num_features // 2), replace=False)
        w = extra_rng.uniform(0.5, 1.5, len(cols)) * extra_rng.choice([-1.0, 1.0], len(cols))
        labels[t] = clean[t] = _standardise(feats[:, cols] @ w)[:, None]
        tasks.append(TaskSpec(t, f"extra{i}", "regression", 1))
    splits = make_splits(n, spec.fractions, int(np.random.default_rng(s_split).integers(2 ** 31)))
    meta = {"generator": "symmetric_positive" if symmetric else "planted_asymmetric",
            "seed": seed, "spec": asdict(spec), "clean_labels": clean}
    return MultiTaskDataset(x, labels, splits, tasks, meta)


def generate_planted_asymmetric(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> MultiTaskDataset:
    """Task 0 (helper) transfers to task 1; task 1's noisy, partly unrelated
    signal degrades task 0 when the encoder is shared."""
    return _planted(spec, seed, symmetric=False)


def generate_symmetric_positive(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> MultiTaskDataset:
    """Two noiseless tasks over overlapping latent features."""
    return _planted(spec, seed, symmetric=True)


def generate_separable(num_samples: int = 400, input_dim: int = 4, seed: int = 0,
                       fractions: Sequence[float] = DEFAULT_FRACTIONS) -> MultiTaskDataset:
    """Two linearly separable binary classification tasks with a margin."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E9]))
    x = rng.standard_normal((num_samples * 2, input_dim))
    w = _unit_columns(rng, input_dim, 2)
    proj = x @ w
    keep = np.all(np.abs(proj) > 0.3, axis=1)
    x, proj = x[keep][:num_samples], proj[keep][:num_samples]
    labels = {t: (proj[:, t] > 0).astype(np.float64) for t in range(2)}
    tasks = [TaskSpec(0, "sep0", "classification", 2), TaskSpec(1, "sep1", "classification", 2)]
    splits = make_splits(len(x), fractions, seed)
    return MultiTaskDataset(x, labels, splits, tasks, {"generator": "separable", "seed": seed})


GENERATORS = {
    "planted_asymmetric": generate_planted_asymmetric,
    "symmetric_positive": generate_symmetric_positive,
}


def load_schema(path: str | Path) -> dict:
    try:
        schema = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read schema {path}: {exc}") from exc
    if not isinstance(schema.get("features"), list) or not isinstance(schema.get("tasks"), list):
        raise ParseError("schema needs 'features' and 'tasks' lists")
    return schema


def load_csv(path: str | Path, schema: Mapping, fractions: Sequence[float] = DEFAULT_FRACTIONS,
             split_seed: int = 0) -> MultiTaskDataset:
    """Read a header-row CSV. ``schema`` maps columns to features and tasks:
    ``{"features": [...], "tasks": [{"name", "cols", "kind"}, ...]}``.
    Classification tasks take one integer class column; ``num_classes`` is
    optional and defaults to max label + 1."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {i} (line {i + 1}) has {len(row)} cells, expected {len(header)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"{path}: row {i} (line {i + 1}) has a non-numeric cell") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    col = {name: j for j, name in enumerate(header)}
    missing = [c for c in schema["features"] if c not in col]
    for task in schema["tasks"]:
        missing += [c for c in task["cols"] if c not in col]
    if missing:
        raise ParseError(f"{path}: missing columns {missing}")
    data = np.array(rows, dtype=np.float64)
    features = data[:, [col[c] for c in schema["features"]]]
    labels, specs = {}, []
    for t, task in enumerate(schema["tasks"]):
        kind = task.get("kind", "regression")
        values = data[:, [col[c] for c in task["cols"]]]
        if kind == "classification":
            if values.shape[1] != 1:
                raise ParseError(f"classification task {task['name']!r} needs exactly one column")
            y = values[:, 0]
            if np.any(y != np.round(y)) or np.any(y < 0):
                raise ParseError(f"classification task {task['name']!r} has non-integer labels")
            num_classes = int(task.get("num_classes", int(y.max()) + 1))
            specs.append(TaskSpec(t, task["name"], kind, max(num_classes, 2)))
            labels[t] = y
        else:
            specs.append(TaskSpec(t, task["name"], "regression", values.shape[1]))
            labels[t] = values
    splits = make_splits(len(data), fractions, split_seed)
    return MultiTaskDataset(features, labels, splits, specs,
                            {"source": str(path), "split_seed": split_seed, "fractions": list(fractions)})
