"""Config-driven experiment pipelines behind the command line.

Every pipeline takes a validated :class:`ExperimentConfig` and writes JSON
files that embed the resolved config and the seed they were produced with.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .datasets import DEFAULT_FRACTIONS, GENERATORS, MultiTaskDataset, SyntheticSpec, generate_separable, load_csv, load_schema
from .errors import ConfigError
from .metrics import ImprovementReport, format_table, mean_report
from .model import ArchitectureConfig, save_checkpoint
from .relationships import (RelationshipMatrix, average_matrices, enumerate_pairwise, estimate_during_training,
                            feature_transfer_similarity, render_heatmap, spearman, train_stl_baselines)
from .strategies import STRATEGIES
from .trainer import TrainerConfig, compare_batch_runtimes, improvement, train_run

log = logging.getLogger(__name__)

RELATIONSHIP_METHODS = ("enum", "lookahead", "gradangle", "feature")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    generator: str | None = "planted_asymmetric"
    spec: dict[str, Any] = Field(default_factory=dict)
    csv: str | None = None
    schema_path: str | None = Field(default=None, alias="schema")
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    split_seed: int = 0

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @field_validator("generator")
    @classmethod
    def _known_generator(cls, v):
        if v is not None and v not in GENERATORS and v != "separable":
            raise ValueError(f"unknown generator {v!r}; choose from {sorted(GENERATORS) + ['separable']}")
        return v


class ArchitectureSection(_Strict):
    hidden_width: int = 32
    total_encoder_depth: int = 2
    shared_depth: int = 1
    decoder_depth: int = 1
    activation: Literal["tanh", "relu"] = "tanh"


class TrainerSection(_Strict):
    eta0: float = 0.1
    epochs: int = 40
    batch_size: int = 64
    omega_lr: float = 1e-4
    dwa_temperature: float = 2.0


class BenchSection(_Strict):
    strategies: list[str] = Field(default_factory=lambda: ["equal", "saal_e", "saal_ew", "saal_w"])
    warmup: int = 3
    samples: int = 20
    rounds: int = 3


class RelationshipSection(_Strict):
    every: int = 10


class ExperimentConfig(_Strict):
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    architecture: ArchitectureSection = Field(default_factory=ArchitectureSection)
    trainer: TrainerSection = Field(default_factory=TrainerSection)
    strategy: str = "equal"
    seeds: list[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs/experiment"
    bench: BenchSection = Field(default_factory=BenchSection)
    relationships: RelationshipSection = Field(default_factory=RelationshipSection)

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, v):
        if v not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        return v

    @field_validator("seeds")
    @classmethod
    def _some_seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    def resolved(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def set_dotted(obj: dict, path: str, value) -> dict:
    keys = path.split(".")
    cur = obj
    for k in keys[:-1]:
        nxt = cur.get(k)
        if not isinstance(nxt, dict):
            nxt = cur[k] = {}
        cur = nxt
    cur[keys[-1]] = value
    return obj


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read JSON, apply ``key.path=value`` overrides, validate everything before any compute."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        set_dotted(raw, *parse_override(item))
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    # cheap structural checks that would otherwise fail mid-run
    arch = architecture(cfg, input_dim_of(cfg))
    arch.validate()
    trainer_config(cfg, 0).validate()
    if cfg.dataset.generator and cfg.dataset.generator != "separable":
        try:
            SyntheticSpec(**cfg.dataset.spec).validate()
        except TypeError as exc:
            raise ConfigError(f"dataset.spec: {exc}") from exc
    for s in cfg.bench.strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"bench strategy {s!r} is unknown")
    if min(cfg.bench.warmup, cfg.bench.samples, cfg.bench.rounds) < 1:
        raise ConfigError("bench warmup, samples and rounds must be positive")
    return cfg


def input_dim_of(cfg: ExperimentConfig) -> int:
    ds = cfg.dataset
    if ds.csv is not None:
        if ds.schema_path is None:
            raise ConfigError("a csv dataset needs a schema")
        return len(load_schema(ds.schema_path)["features"])
    if ds.generator == "separable":
        return int(ds.spec.get("input_dim", 4))
    return int(ds.spec.get("input_dim", SyntheticSpec.input_dim))


def architecture(cfg: ExperimentConfig, input_dim: int) -> ArchitectureConfig:
    return ArchitectureConfig(input_dim=input_dim, **cfg.architecture.model_dump())


def trainer_config(cfg: ExperimentConfig, seed: int, strategy: str | None = None) -> TrainerConfig:
    return TrainerConfig(seed=seed, strategy=strategy or cfg.strategy, **cfg.trainer.model_dump())


def build_dataset(cfg: ExperimentConfig, seed: int) -> MultiTaskDataset:
    """Generators are seeded by the run seed; CSV splits by ``dataset.split_seed``."""
    ds = cfg.dataset
    if ds.csv is not None:
        return load_csv(ds.csv, load_schema(ds.schema_path), ds.fractions, ds.split_seed)
    if ds.generator == "separable":
        return generate_separable(seed=seed, fractions=ds.fractions, **ds.spec)
    spec = SyntheticSpec(**{**ds.spec, "fractions": tuple(ds.spec.get("fractions", ds.fractions))})
    return GENERATORS[ds.generator](spec, seed)


def resolve_jobs(jobs: int | None) -> int:
    if jobs is not None:
        return max(1, jobs)
    env = os.environ.get("SAAL_JOBS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"SAAL_JOBS must be an integer, got {env!r}") from None


def _pmap(fn, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def write_json(path: Path, payload: Mapping) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=False))
    return path


# run

def run_seed(cfg: ExperimentConfig, seed: int, out: Path, strategy: str | None = None,
             shared_depth: int | None = None) -> ImprovementReport:
    """STL baselines, optional enumeration, the strategy run, and its test report."""
    strategy = strategy or cfg.strategy
    dataset = build_dataset(cfg, seed)
    arch = architecture(cfg, dataset.input_dim)
    if shared_depth is not None:
        arch = arch.with_shared_depth(shared_depth)
    tcfg = trainer_config(cfg, seed, strategy)
    stl = train_stl_baselines(dataset, arch, tcfg)
    ref_val = {k: v.val_metrics for k, v in stl.items()}
    ref_test = {k: v.test_metrics for k, v in stl.items()}
    rel = None
    if strategy in ("saal_e", "saal_ew"):
        rel = enumerate_pairwise(dataset, None, arch, tcfg, stl=stl)
    model, history, ckpt = train_run(dataset, None, arch, tcfg, relationships=rel, reference=ref_val)
    best = ckpt.restore(model)
    report = improvement(best, dataset, "test", ref_test)
    header = {"config": cfg.resolved(), "seed": seed, "strategy": strategy, "shared_depth": arch.shared_depth}
    seed_dir = out / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    history.to_jsonl(seed_dir / "history.jsonl", header)
    save_checkpoint(best, seed_dir / "checkpoint.json", {**header, "epoch": ckpt.epoch,
                                                          "val_report": ckpt.report.to_dict()})
    payload = {**header, "checkpoint_epoch": ckpt.epoch, "split": "test", "report": report.to_dict(),
               "val_report": ckpt.report.to_dict()}
    if rel is not None:
        payload["enumeration"] = rel.to_json()
        rel.save(seed_dir / "relationships_enum.json")
    write_json(seed_dir / "report.json", payload)
    return report


def _run_seed_job(args) -> dict:
    cfg_dict, seed, out = args
    cfg = ExperimentConfig.model_validate(cfg_dict)
    return run_seed(cfg, seed, Path(out)).to_dict()


def run_experiment(cfg: ExperimentConfig, out: Path | None = None, jobs: int = 1) -> ImprovementReport:
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = [(cfg.resolved(), s, str(out)) for s in cfg.seeds]
    reports = [ImprovementReport.from_dict(r) for r in _pmap(_run_seed_job, items, jobs)]
    mean = mean_report(reports)
    write_json(out / "report_mean.json", {"config": cfg.resolved(), "seeds": cfg.seeds, "strategy": cfg.strategy,
                                          "split": "test", "report": mean.to_dict(),
                                          "per_seed": {str(s): r.to_dict() for s, r in zip(cfg.seeds, reports)}})
    (out / "report_mean.txt").write_text(format_table({cfg.strategy: mean}) + "\n")
    return mean


# relationships

def relationship_matrices(cfg: ExperimentConfig, method: str, seed: int, jobs: int = 1) -> RelationshipMatrix:
    if method not in RELATIONSHIP_METHODS:
        raise ConfigError(f"method must be one of {RELATIONSHIP_METHODS}")
    dataset = build_dataset(cfg, seed)
    arch = architecture(cfg, dataset.input_dim)
    tcfg = trainer_config(cfg, seed, "equal")
    names = [t.name for t in dataset.task_specs]
    if method == "enum":
        rel = enumerate_pairwise(dataset, None, arch, tcfg, jobs=jobs)
    elif method == "feature":
        rel = feature_transfer_similarity(dataset, None, arch, tcfg)
    else:
        est = estimate_during_training(dataset, arch, tcfg, every=cfg.relationships.every)
        rel = est["gradangle"] if method == "gradangle" else est["lookahead_val"]
        if method == "lookahead":
            rel.meta["train_variant"] = est["lookahead_train"].to_json()
    rel.meta.update(seed=seed, task_names=names)
    return rel


def run_relationships(cfg: ExperimentConfig, method: str, out: Path | None = None, jobs: int = 1) -> dict:
    """One matrix per seed plus their average; correlates against any other averaged matrices in ``out``."""
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mats = []
    for seed in cfg.seeds:
        rel = relationship_matrices(cfg, method, seed, jobs)
        write_json(out / f"relationships_{method}_seed{seed}.json",
                   {"config": cfg.resolved(), "seed": seed, "matrix": rel.to_json()})
        mats.append(rel)
    avg = average_matrices(mats)
    write_json(out / f"relationships_{method}.json", {"config": cfg.resolved(), "seeds": cfg.seeds,
                                                      "matrix": avg.to_json()})
    heat = render_heatmap(avg, avg.meta.get("task_names"))
    (out / f"relationships_{method}.txt").write_text(heat + "\n")
    correlations = {}
    for other in RELATIONSHIP_METHODS:
        path = out / f"relationships_{other}.json"
        if not path.exists():
            continue
        other_rel = RelationshipMatrix.from_json(json.loads(path.read_text())["matrix"])
        key = f"{method}_vs_{other}"
        try:
            rep = spearman(avg, other_rel)
            correlations[key] = rep.to_json()
        except Exception as exc:
            correlations[key] = {"error": str(exc)}
        write_json(out / f"correlation_{key}.json", {"config": cfg.resolved(), "seeds": cfg.seeds,
                                                     "correlation": correlations[key]})
    return {"matrix": avg, "heatmap": heat, "correlations": correlations}


# bench

def run_bench(cfg: ExperimentConfig, out: Path | None = None) -> dict:
    """Mean batch time per strategy relative to equal weighting on identical batches."""
    out = Path(out or cfg.output_dir)
    seed = cfg.seeds[0]
    dataset = build_dataset(cfg, seed)
    arch = architecture(cfg, dataset.input_dim)
    tcfg = trainer_config(cfg, seed, "equal")
    warmup, samples = cfg.bench.warmup, cfg.bench.samples
    rel = None
    if any(s in ("saal_e", "saal_ew") for s in cfg.bench.strategies):
        rel = enumerate_pairwise(dataset, None, arch, tcfg)
    strategies = list(dict.fromkeys(["equal"] + list(cfg.bench.strategies)))
    seconds = compare_batch_runtimes(dataset, arch, tcfg, strategies, rel, warmup, samples, cfg.bench.rounds)
    base = seconds["equal"]
    rows = {s: {"seconds": seconds[s], "ratio": seconds[s] / base} for s in cfg.bench.strategies}
    result = {"config": cfg.resolved(), "seed": seed, "warmup": warmup, "samples": samples,
              "rounds": cfg.bench.rounds, "active_aux_routes": sorted(k for k, v in (rel.pairwise.items() if rel else []) if v > 0),
              "rows": rows}
    write_json(out / "bench.json", result)
    (out / "bench.txt").write_text(format_bench(result) + "\n")
    return result


def format_bench(result: Mapping) -> str:
    lines = [f"batch runtime relative to equal (warmup={result['warmup']}, samples={result['samples']}, "
             f"rounds={result.get('rounds', 1)})",
             f"{'strategy':<12}{'ms/batch':>10}{'ratio':>8}"]
    for s, row in result["rows"].items():
        lines.append(f"{s:<12}{1000 * row['seconds']:>10.3f}{row['ratio']:>8.2f}")
    return "\n".join(lines)


# shared-depth sweep

def _sweep_job(args) -> dict:
    cfg_dict, seed, strategy, depth, out = args
    cfg = ExperimentConfig.model_validate(cfg_dict)
    rep = run_seed(cfg, seed, Path(out) / f"{strategy}_depth{depth}", strategy=strategy, shared_depth=depth)
    return rep.to_dict()


def run_sweep(cfg: ExperimentConfig, out: Path | None = None, jobs: int = 1,
              strategies: Sequence[str] = ("equal", "saal_e")) -> dict:
    """Every shared depth 0..D for each strategy; per-depth, per-task Δ averaged over seeds."""
    out = Path(out or cfg.output_dir)
    D = cfg.architecture.total_encoder_depth
    items = [(cfg.resolved(), seed, s, d, str(out)) for s in strategies for d in range(D + 1) for seed in cfg.seeds]
    results = _pmap(_sweep_job, items, jobs)
    table: dict[str, dict[int, ImprovementReport]] = {}
    k = 0
    for s in strategies:
        for d in range(D + 1):
            reps = [ImprovementReport.from_dict(r) for r in results[k:k + len(cfg.seeds)]]
            k += len(cfg.seeds)
            table.setdefault(s, {})[d] = mean_report(reps)
    payload = {"config": cfg.resolved(), "seeds": cfg.seeds,
               "rows": [{"strategy": s, "shared_depth": d, "report": r.to_dict()}
                        for s, by_depth in table.items() for d, r in by_depth.items()]}
    write_json(out / "sweep.json", payload)
    (out / "sweep.txt").write_text(format_sweep(payload) + "\n")
    return payload


def format_sweep(payload: Mapping) -> str:
    rows = {f"{r['strategy']}@{r['shared_depth']}": ImprovementReport.from_dict(r["report"]) for r in payload["rows"]}
    return format_table(rows)


def render_report(path: str | Path) -> str:
    """Re-render any JSON output of the pipelines as text."""
    obj = json.loads(Path(path).read_text())
    if "rows" in obj and isinstance(obj["rows"], list):
        return format_sweep(obj)
    if "rows" in obj:
        return format_bench(obj)
    if "matrix" in obj:
        rel = RelationshipMatrix.from_json(obj["matrix"])
        return render_heatmap(rel, rel.meta.get("task_names"))
    if "correlation" in obj:
        c = obj["correlation"]
        if "error" in c:
            return f"correlation unavailable: {c['error']}"
        lines = [f"spearman {c['methods'][0]} vs {c['methods'][1]}"]
        lines += [f"  target {t}: {'n/a' if v is None else f'{v:+.3f}'}" for t, v in c["per_target"].items()]
        lines.append(f"  mean: {'n/a' if c['mean'] is None else format(c['mean'], '+.3f')}")
        return "\n".join(lines)
    if "report" in obj:
        name = obj.get("strategy", "mtl")
        return format_table({name: ImprovementReport.from_dict(obj["report"])})
    raise ConfigError(f"{path}: not a recognised report file")
