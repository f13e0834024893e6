"""Multi-task network with shared trunk, per-task tails and self-auxiliary decoders.

Parameter ids follow ``<owner>.<layer>.<W|b>`` where owner is ``shared``,
``t<k>`` for task k, or ``aux<s>-><t>`` for the self-auxiliary that feeds
task s labels through task t's encoder. Every id carries one partition
label: ``shared``, ``task:<k>`` or ``self_aux:<s>-><t>``.
"""
from __future__ import annotations

import base64
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .diffcore import Graph, evaluate
from .errors import ConfigError, ContractError

ACTIVATIONS = ("tanh", "relu")
TASK_KINDS = ("regression", "classification")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    kind: str
    dim: int  # output_dim for regression, num_classes for classification

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.dim < 1 or (self.kind == "classification" and self.dim < 2):
            raise ConfigError(f"task {self.name!r}: invalid output dimension {self.dim}")

    @property
    def loss(self) -> str:
        return "mse" if self.kind == "regression" else "softmax_xent"


def regression(task_id: int, output_dim: int = 1, name: str | None = None) -> TaskSpec:
    return TaskSpec(task_id, name or f"task{task_id}", "regression", output_dim)


def classification(task_id: int, num_classes: int, name: str | None = None) -> TaskSpec:
    return TaskSpec(task_id, name or f"task{task_id}", "classification", num_classes)


@dataclass(frozen=True)
class ArchitectureConfig:
    input_dim: int
    hidden_width: int = 32
    total_encoder_depth: int = 2
    shared_depth: int = 1
    decoder_depth: int = 1
    activation: str = "tanh"

    def validate(self):
        if self.input_dim < 1 or self.hidden_width < 1:
            raise ConfigError("input_dim and hidden_width must be positive")
        if self.total_encoder_depth < 0 or self.decoder_depth < 0:
            raise ConfigError("depths must be non-negative")
        if not 0 <= self.shared_depth <= self.total_encoder_depth:
            raise ConfigError(f"shared_depth={self.shared_depth} must lie in "
                              f"[0, total_encoder_depth={self.total_encoder_depth}]")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        return self

    def with_shared_depth(self, depth: int) -> "ArchitectureConfig":
        return ArchitectureConfig(**{**asdict(self), "shared_depth": depth}).validate()


@dataclass(frozen=True)
class Route:
    source: int
    target: int

    @property
    def is_primary(self) -> bool:
        return self.source == self.target

    @property
    def route_id(self) -> str:
        if self.is_primary:
            return f"primary:{self.target}"
        return f"aux:{self.source}->{self.target}"

    @classmethod
    def primary(cls, t: int) -> "Route":
        return cls(t, t)

    @classmethod
    def aux(cls, s: int, t: int) -> "Route":
        if s == t:
            raise ContractError("self-auxiliary routes need source != target")
        return cls(s, t)

    @classmethod
    def parse(cls, route_id: str) -> "Route":
        kind, _, rest = route_id.partition(":")
        if kind == "primary":
            return cls.primary(int(rest))
        if kind == "aux":
            s, _, t = rest.partition("->")
            return cls.aux(int(s), int(t))
        raise ContractError(f"unknown route id {route_id!r}")

    def __str__(self):
        return self.route_id


@dataclass
class ParameterStore:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    partition: dict[str, str] = field(default_factory=dict)

    def add(self, pid: str, value: np.ndarray, label: str):
        if pid in self.tensors:
            raise ContractError(f"duplicate parameter id {pid!r}")
        self.tensors[pid] = np.asarray(value, dtype=np.float64)
        self.partition[pid] = label

    def ids_in(self, label: str) -> list[str]:
        return [pid for pid, lab in self.partition.items() if lab == label]

    def without_self_aux(self) -> dict[str, np.ndarray]:
        return {pid: v for pid, v in self.tensors.items()
                if not self.partition[pid].startswith("self_aux:")}

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.tensors.items()}, dict(self.partition))

    def size(self, ids: Iterable[str] | None = None) -> int:
        ids = self.tensors if ids is None else ids
        return int(sum(self.tensors[i].size for i in ids))


@dataclass
class MtlModel:
    arch: ArchitectureConfig
    tasks: list[TaskSpec]
    params: ParameterStore
    routes: dict[str, list[str]]

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def primary_routes(self) -> list[Route]:
        return [Route.primary(t) for t in range(self.num_tasks)]

    def aux_routes(self) -> list[Route]:
        return [Route.aux(s, t) for t in range(self.num_tasks)
                for s in range(self.num_tasks) if s != t]

    def encoder_ids(self, target: int) -> list[str]:
        return [pid for pid in self.routes[Route.primary(target).route_id]
                if ".enc" in pid]

    def inference_parameter_count(self) -> int:
        return self.params.size(self.params.without_self_aux())


def _layer_owner(layer: int, arch: ArchitectureConfig, target: int) -> str:
    return "shared" if layer < arch.shared_depth else f"t{target}"


def _decoder_owner(route: Route) -> str:
    return f"t{route.target}" if route.is_primary else f"aux{route.source}->{route.target}"


def init_dense(rng_key: str, seed: int, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    ss = np.random.SeedSequence([seed, zlib.crc32(rng_key.encode())])
    rng = np.random.default_rng(ss)
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)), np.zeros(fan_out)


def _check_tasks(tasks: Sequence[TaskSpec]):
    ids = [t.task_id for t in tasks]
    if ids != list(range(len(tasks))):
        raise ConfigError(f"task ids must be dense and ordered 0..T-1, got {ids}")
    if len({t.name for t in tasks}) != len(tasks):
        raise ConfigError("task names must be unique")


def build_model(arch: ArchitectureConfig, tasks: Sequence[TaskSpec], seed: int) -> MtlModel:
    """Deterministically initialise all primary and self-auxiliary parameters.

    Each layer draws from its own stream keyed by (seed, owner name, layer),
    keyed on task *names* so a task keeps its initialisation when it appears
    in a different task subset. Self-auxiliary decoders use separate keys and
    never copy the source decoder.
    """
    arch.validate()
    _check_tasks(tasks)
    if len(tasks) < 1:
        raise ConfigError("need at least one task")
    store = ParameterStore()
    routes: dict[str, list[str]] = {}
    width = arch.hidden_width

    def dense(pid_prefix, key, fan_in, fan_out, label):
        w, b = init_dense(key, seed, fan_in, fan_out)
        if f"{pid_prefix}.W" not in store.tensors:
            store.add(f"{pid_prefix}.W", w, label)
            store.add(f"{pid_prefix}.b", b, label)
        return [f"{pid_prefix}.W", f"{pid_prefix}.b"]

    enc_paths: dict[int, list[str]] = {}
    for spec in tasks:
        t = spec.task_id
        path, fan_in = [], arch.input_dim
        for layer in range(arch.total_encoder_depth):
            owner = _layer_owner(layer, arch, t)
            if owner == "shared":
                path += dense(f"shared.enc{layer}", f"shared/enc{layer}", fan_in, width, "shared")
            else:
                path += dense(f"t{t}.enc{layer}", f"task:{spec.name}/enc{layer}", fan_in, width, f"task:{t}")
            fan_in = width
        enc_paths[t] = path

    enc_out = width if arch.total_encoder_depth else arch.input_dim

    def decoder(route: Route, key_prefix: str, label: str) -> list[str]:
        source = tasks[route.source]
        owner = _decoder_owner(route)
        path, fan_in = [], enc_out
        for j in range(arch.decoder_depth):
            path += dense(f"{owner}.dec{j}", f"{key_prefix}/dec{j}", fan_in, width, label)
            fan_in = width
        path += dense(f"{owner}.head", f"{key_prefix}/head", fan_in, source.dim, label)
        return path

    for spec in tasks:
        r = Route.primary(spec.task_id)
        routes[r.route_id] = enc_paths[spec.task_id] + decoder(r, f"task:{spec.name}", f"task:{spec.task_id}")
    for t in range(len(tasks)):
        for s in range(len(tasks)):
            if s == t:
                continue
            r = Route.aux(s, t)
            key = f"selfaux:{tasks[s].name}->{tasks[t].name}"
            routes[r.route_id] = enc_paths[t] + decoder(r, key, f"self_aux:{s}->{t}")
    return MtlModel(arch, list(tasks), store, routes)


def dense_chain(g: Graph, h: int, prefixes: Sequence[str], activation: str, last_linear: bool) -> int:
    for i, prefix in enumerate(prefixes):
        h = g.add(g.matmul(h, g.param(f"{prefix}.W")), g.param(f"{prefix}.b"))
        if not (last_linear and i == len(prefixes) - 1):
            h = g.activation(h, activation)
    return h


def encoder_prefixes(model: MtlModel, target: int) -> list[str]:
    return [f"{_layer_owner(i, model.arch, target)}.enc{i}"
            for i in range(model.arch.total_encoder_depth)]


def decoder_prefixes(model: MtlModel, route: Route) -> list[str]:
    owner = _decoder_owner(route)
    return [f"{owner}.dec{j}" for j in range(model.arch.decoder_depth)] + [f"{owner}.head"]


def _check_route(model: MtlModel, route: Route):
    if route.route_id not in model.routes:
        raise ContractError(f"unknown route {route.route_id!r}")


def add_loss(g: Graph, spec: TaskSpec, pred: int) -> int:
    y = g.input(f"y{spec.task_id}")
    return g.mse(pred, y) if spec.loss == "mse" else g.softmax_xent(pred, y)


def route_graph(model: MtlModel, route: Route, with_loss: bool = True) -> Graph:
    """Graph for one route: input ``x`` (and ``y<source>`` when with_loss)."""
    _check_route(model, route)
    g = Graph()
    h = dense_chain(g, g.input("x"), encoder_prefixes(model, route.target), model.arch.activation, False)
    pred = g.mark("pred", dense_chain(g, h, decoder_prefixes(model, route), model.arch.activation, True))
    if with_loss:
        g.set_output(g.mark(route.route_id, add_loss(g, model.tasks[route.source], pred)))
    else:
        g.set_output(pred)
    return g


def training_graph(model: MtlModel, weights: Mapping[str, float]) -> Graph:
    """Composite loss sum_r w_r * L_r over routes with positive weight.

    The shared trunk and each target's encoder tail are built once and reused
    by every route through that target, so gradients from a primary task and
    the self-auxiliaries cloning it both reach the shared layers. Each route's
    loss node is marked with its route id.
    """
    g = Graph()
    x = g.input("x")
    act = model.arch.activation
    arch = model.arch
    trunk = dense_chain(g, x, [f"shared.enc{i}" for i in range(arch.shared_depth)], act, False)
    enc_cache: dict[int, int] = {}
    total = None
    for rid in sorted(weights, key=_route_order):
        w = weights[rid]
        if w <= 0:
            continue
        route = Route.parse(rid)
        _check_route(model, route)
        if route.target not in enc_cache:
            tail = encoder_prefixes(model, route.target)[arch.shared_depth:]
            enc_cache[route.target] = dense_chain(g, trunk, tail, act, False)
        pred = dense_chain(g, enc_cache[route.target], decoder_prefixes(model, route), act, True)
        loss = g.mark(rid, add_loss(g, model.tasks[route.source], pred))
        term = g.scale(loss, w)
        total = term if total is None else g.add(total, term)
    if total is None:
        raise ContractError("composite loss needs at least one route with positive weight")
    g.set_output(total)
    return g


def _route_order(rid: str):
    r = Route.parse(rid)
    return (0 if r.is_primary else 1, r.target, r.source)


def forward(model: MtlModel, route: Route, x: np.ndarray) -> np.ndarray:
    return evaluate(route_graph(model, route, with_loss=False), model.params.tensors, {"x": x})


def predict_primary(model: MtlModel, task_id: int, x: np.ndarray) -> np.ndarray:
    """Inference path; self-auxiliary parameters are not even visible to it."""
    if not 0 <= task_id < model.num_tasks:
        raise ContractError(f"no task {task_id}")
    g = route_graph(model, Route.primary(task_id), with_loss=False)
    return evaluate(g, model.params.without_self_aux(), {"x": x})


# checkpoint I/O

def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape),
            "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")}


def _decode(obj: Mapping) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def model_to_dict(model: MtlModel) -> dict:
    return {
        "arch": asdict(model.arch),
        "tasks": [asdict(t) for t in model.tasks],
        "params": {pid: {"partition": model.params.partition[pid], **_encode(v)}
                   for pid, v in model.params.tensors.items()},
        "routes": model.routes,
    }


def model_from_dict(obj: Mapping) -> MtlModel:
    arch = ArchitectureConfig(**obj["arch"]).validate()
    tasks = [TaskSpec(**t) for t in obj["tasks"]]
    store = ParameterStore()
    for pid, p in obj["params"].items():
        store.add(pid, _decode(p), p["partition"])
    return MtlModel(arch, tasks, store, {k: list(v) for k, v in obj["routes"].items()})


def save_checkpoint(model: MtlModel, path: str | Path, extra: Mapping | None = None) -> Path:
    path = Path(path)
    payload = {"model": model_to_dict(model)}
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=1))
    return path


def load_checkpoint(path: str | Path) -> MtlModel:
    return model_from_dict(json.loads(Path(path).read_text())["model"])
