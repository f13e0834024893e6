"""Task coefficients: composite losses, normalisation, SAAL strategies and baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .datasets import Batch
from .diffcore import AdamState, GradientMap, adam_step, backward, forward_values, sgd_step
from .errors import ContractError, DegenerateGroupError, NumericError
from .model import MtlModel, Route, training_graph

if TYPE_CHECKING:
    from .relationships import RelationshipMatrix

log = logging.getLogger(__name__)

STRATEGIES = ("equal", "uncertainty", "dwa", "pcgrad", "saal_e", "saal_w", "saal_ew")
SAAL_STRATEGIES = ("saal_e", "saal_w", "saal_ew")


@dataclass
class CoefficientSet:
    primary: dict[int, float]
    aux: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, val in self.items():
            if not val >= 0 or not math.isfinite(val):
                raise ContractError(f"coefficient {key} must be finite and >= 0, got {val}")

    def items(self):
        for t, w in self.primary.items():
            yield Route.primary(t).route_id, w
        for (s, t), w in self.aux.items():
            yield Route.aux(s, t).route_id, w

    def route_weights(self) -> dict[str, float]:
        return dict(self.items())

    def keys(self) -> set[str]:
        return {rid for rid, _ in self.items()}

    def get(self, route_id: str) -> float:
        r = Route.parse(route_id)
        return self.primary[r.target] if r.is_primary else self.aux[(r.source, r.target)]

    @classmethod
    def from_route_weights(cls, weights: Mapping[str, float]):
        primary, aux = {}, {}
        for rid, w in weights.items():
            r = Route.parse(rid)
            if r.is_primary:
                primary[r.target] = float(w)
            else:
                aux[(r.source, r.target)] = float(w)
        return cls(primary, aux)

    def to_json(self) -> dict:
        return {"primary": {str(t): w for t, w in sorted(self.primary.items())},
                "aux": {f"{s}->{t}": w for (s, t), w in sorted(self.aux.items())}}

    @classmethod
    def from_json(cls, obj: Mapping):
        aux = {}
        for key, w in obj.get("aux", {}).items():
            s, _, t = key.partition("->")
            aux[(int(s), int(t))] = float(w)
        return cls({int(t): float(w) for t, w in obj["primary"].items()}, aux)


class NormalizedCoefficients(CoefficientSet):
    pass


def all_aux_coefficients(num_tasks: int, value: float = 1.0) -> CoefficientSet:
    """Uniform initialisation over every primary task and self-auxiliary."""
    return CoefficientSet({t: value for t in range(num_tasks)},
                          {(s, t): value for t in range(num_tasks) for s in range(num_tasks) if s != t})


def _group_sums(coeffs: CoefficientSet) -> dict[int, float]:
    sums = dict(coeffs.primary)
    for (s, t), w in coeffs.aux.items():
        if t not in sums:
            raise ContractError(f"self-auxiliary {s}->{t} targets unknown primary task {t}")
        sums[t] += w
    return sums


def normalize(coeffs: CoefficientSet) -> NormalizedCoefficients:
    """Divide every coefficient by the total of its target group."""
    sums = _group_sums(coeffs)
    for t, total in sums.items():
        if total <= 0:
            raise DegenerateGroupError(f"coefficients targeting task {t} sum to zero")
    return NormalizedCoefficients({t: w / sums[t] for t, w in coeffs.primary.items()},
                                  {(s, t): w / sums[t] for (s, t), w in coeffs.aux.items()})


def composite_train_loss(per_route_losses: Mapping[str, float], coeffs: CoefficientSet) -> float:
    total = 0.0
    for rid, w in coeffs.items():
        if w <= 0:
            continue
        if rid not in per_route_losses:
            raise ContractError(f"no loss for route {rid} with positive coefficient")
        total += w * per_route_losses[rid]
    return total


def primary_weights(num_tasks: int) -> dict[str, float]:
    return {Route.primary(t).route_id: 1.0 for t in range(num_tasks)}


def validation_loss(model: MtlModel, val_batch: Batch, params: Mapping[str, np.ndarray] | None = None) -> float:
    """Unweighted sum of primary-task losses; no coefficients, no self-auxiliaries."""
    if len(val_batch) == 0:
        raise ContractError("validation batch is empty")
    g = training_graph(model, primary_weights(model.num_tasks))
    params = model.params.tensors if params is None else params
    return float(forward_values(g, params, val_batch.inputs())[g.output])


def saal_enumeration(rel: "RelationshipMatrix") -> CoefficientSet:
    """Primary tasks always on; a self-auxiliary only if pairing strictly helped its target."""
    T = rel.num_tasks
    aux = {}
    for t in range(T):
        if t not in rel.baseline:
            raise ContractError(f"relationship matrix lacks the single-task value for task {t}")
        for s in range(T):
            if s == t:
                continue
            if (s, t) not in rel.pairwise:
                raise ContractError(f"relationship matrix lacks pair ({s}, {t})")
            aux[(s, t)] = 1.0 if rel.pairwise[(s, t)] > rel.baseline[t] else 0.0
    return CoefficientSet({t: 1.0 for t in range(T)}, aux)


def saal_combined(omega_e: CoefficientSet, omega_w_normalized: CoefficientSet) -> CoefficientSet:
    if omega_e.keys() != omega_w_normalized.keys():
        raise ContractError("enumeration and weighting coefficients cover different routes")
    return CoefficientSet({t: omega_e.primary[t] * omega_w_normalized.primary[t] for t in omega_e.primary},
                          {k: omega_e.aux[k] * omega_w_normalized.aux[k] for k in omega_e.aux})


def training_coefficients(raw: CoefficientSet, mask: CoefficientSet | None = None) -> NormalizedCoefficients:
    """Coefficients the training loss consumes.

    With an enumeration mask this is normalize(mask * normalize(raw)), which
    equals normalize(mask * raw): the inner normalisation cancels.
    """
    if mask is None:
        return normalize(raw)
    return normalize(saal_combined(mask, normalize(raw)))


def coefficient_gradient(route_losses: Mapping[str, float], raw: CoefficientSet,
                         mask: CoefficientSet | None = None) -> dict[str, float]:
    """d L_train / d raw_omega through the (masked) normalisation.

    For route r in target group G with mask e: e_r * (L_r - sum_G wbar L) / sum_G e*omega.
    """
    mask_w = mask.route_weights() if mask is not None else {rid: 1.0 for rid in raw.keys()}
    raw_w = raw.route_weights()
    group_sum: dict[int, float] = {}
    for rid, w in raw_w.items():
        t = Route.parse(rid).target
        group_sum[t] = group_sum.get(t, 0.0) + mask_w[rid] * w
    weighted_loss: dict[int, float] = {}
    for rid, w in raw_w.items():
        t = Route.parse(rid).target
        if group_sum[t] <= 0:
            raise DegenerateGroupError(f"coefficients targeting task {t} sum to zero")
        if mask_w[rid] > 0:
            weighted_loss[t] = weighted_loss.get(t, 0.0) + mask_w[rid] * w / group_sum[t] * route_losses[rid]
    grads = {}
    for rid in raw_w:
        t = Route.parse(rid).target
        e = mask_w[rid]
        grads[rid] = 0.0 if e == 0 else e * (route_losses[rid] - weighted_loss[t]) / group_sum[t]
    return grads


def _route_losses(model: MtlModel, params: Mapping[str, np.ndarray], routes: Sequence[str],
                  batch: Batch) -> dict[str, float]:
    g = training_graph(model, {rid: 1.0 for rid in routes})
    values = forward_values(g, params, batch.inputs())
    return {rid: float(values[g.names[rid]]) for rid in routes}


def hypergradient(model: MtlModel, raw: CoefficientSet, train_batch: Batch, val_batch: Batch,
                  eta: float, epsilon: float, mask: CoefficientSet | None = None) -> dict[str, float]:
    """Finite-difference estimate of d L_val(theta') / d raw_omega.

    theta' = theta - eta * grad L_train(theta, omega) is a virtual step on a
    copy; the model's own parameters are never written.
    """
    if epsilon <= 0 or eta <= 0:
        raise ContractError("eta and epsilon must be positive")
    theta = model.params.tensors
    weights = training_coefficients(raw, mask).route_weights()
    g_train = backward(training_graph(model, weights), theta, train_batch.inputs())
    theta_virtual = sgd_step(theta, g_train, eta)
    g_val = backward(training_graph(model, primary_weights(model.num_tasks)), theta_virtual, val_batch.inputs())

    candidates = [rid for rid, e in (mask.items() if mask is not None else raw.items())
                  if mask is None or e > 0]
    if all(not np.any(g) for g in g_val.values()):
        return {rid: 0.0 for rid in raw.keys()}
    theta_plus = {k: (v + epsilon * g_val[k]) if k in g_val else v for k, v in theta.items()}
    theta_minus = {k: (v - epsilon * g_val[k]) if k in g_val else v for k, v in theta.items()}
    loss_plus = _route_losses(model, theta_plus, candidates, train_batch)
    loss_minus = _route_losses(model, theta_minus, candidates, train_batch)
    # excluded routes need a placeholder loss; their mask weight zeroes them out
    fill = {rid: 0.0 for rid in raw.keys()}
    d_plus = coefficient_gradient({**fill, **loss_plus}, raw, mask)
    d_minus = coefficient_gradient({**fill, **loss_minus}, raw, mask)
    out = {rid: -eta * (d_plus[rid] - d_minus[rid]) / (2.0 * epsilon) for rid in raw.keys()}
    for rid, v in out.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite hypergradient for {rid}")
    return out


def saal_weight_update(model: MtlModel, coeffs: CoefficientSet, train_batch: Batch, val_batch: Batch,
                       eta: float, epsilon: float, omega_optimizer_state: AdamState,
                       omega_lr: float = 1e-4, mask: CoefficientSet | None = None,
                       ) -> tuple[CoefficientSet, AdamState]:
    """One Adam step on the raw coefficients along the hypergradient, then clamp at zero."""
    grads = hypergradient(model, coeffs, train_batch, val_batch, eta, epsilon, mask)
    params = {rid: np.asarray(w, dtype=np.float64) for rid, w in coeffs.items()}
    new, state = adam_step(params, {rid: np.asarray(g) for rid, g in grads.items()},
                           omega_optimizer_state, omega_lr)
    updated = CoefficientSet.from_route_weights({rid: max(float(v), 0.0) for rid, v in new.items()})
    for t, w in updated.primary.items():
        if w == 0.0 and coeffs.primary[t] > 0.0:
            log.warning("primary task %d coefficient reached zero", t)
    return updated, state


def equal_weights(num_tasks: int) -> CoefficientSet:
    return CoefficientSet({t: 1.0 for t in range(num_tasks)})


def uncertainty_weights(per_task_losses: Mapping[int, float], log_vars: Mapping[int, float]) -> float:
    """sum_t exp(-s_t) * L_t / 2 + s_t / 2 with learnable log-variances s_t."""
    return sum(math.exp(-log_vars[t]) * loss / 2.0 + log_vars[t] / 2.0
               for t, loss in per_task_losses.items())


def uncertainty_coefficients(log_vars: Mapping[int, float]) -> CoefficientSet:
    return CoefficientSet({t: math.exp(-s) / 2.0 for t, s in log_vars.items()})


def uncertainty_log_var_grad(per_task_losses: Mapping[int, float], log_vars: Mapping[int, float]) -> dict[int, float]:
    return {t: -math.exp(-log_vars[t]) * loss / 2.0 + 0.5 for t, loss in per_task_losses.items()}


def dwa_weights(loss_history: Sequence[Mapping[int, float]], num_tasks: int,
                temperature: float = 2.0) -> CoefficientSet:
    """Dynamic weight averaging from the last two epochs' mean task losses."""
    if len(loss_history) < 2:
        return equal_weights(num_tasks)
    prev, prev2 = loss_history[-1], loss_history[-2]
    ratios = np.array([prev[t] / prev2[t] if prev2[t] != 0 else 1.0 for t in range(num_tasks)])
    logits = ratios / temperature
    e = np.exp(logits - logits.max())
    w = num_tasks * e / e.sum()
    return CoefficientSet({t: float(w[t]) for t in range(num_tasks)})


def _flatten(grads: Mapping[str, np.ndarray], keys: Sequence[str], shapes: Mapping[str, tuple]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[k]).reshape(-1) if k in grads else np.zeros(int(np.prod(shapes[k])))
                           for k in keys]) if keys else np.zeros(0)


def pcgrad_vectors(vectors: Sequence[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """Project each task gradient off the others it conflicts with (random order)."""
    projected = []
    for i, g in enumerate(vectors):
        gi = np.array(g, dtype=np.float64)
        others = [j for j in range(len(vectors)) if j != i]
        for j in rng.permutation(others) if others else []:
            gj = vectors[j]
            norm2 = float(gj @ gj)
            if norm2 == 0.0:
                continue
            dot = float(gi @ gj)
            if dot < 0.0:
                scale = float(np.linalg.norm(gi))
                gi = gi - dot / norm2 * gj
                # a (near-)collinear conflict leaves only rounding residue; that is zero
                if float(np.linalg.norm(gi)) <= 8 * np.finfo(np.float64).eps * scale:
                    gi = np.zeros_like(gi)
        projected.append(gi)
    return projected


def pcgrad(per_task_grads: Sequence[GradientMap], seed: int | np.random.Generator = 0) -> GradientMap:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = {}
    for grads in per_task_grads:
        for k, v in grads.items():
            shapes[k] = np.shape(v)
    keys = sorted(shapes)
    merged = sum(pcgrad_vectors([_flatten(g, keys, shapes) for g in per_task_grads], rng))
    out, offset = {}, 0
    for k in keys:
        size = int(np.prod(shapes[k]))
        out[k] = np.asarray(merged[offset:offset + size]).reshape(shapes[k])
        offset += size
    return out
