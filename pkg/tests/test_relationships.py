import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import three_task_model
from saal.datasets import Batch, SyntheticSpec, generate_planted_asymmetric
from saal.diffcore import Graph
from saal.errors import ContractError
from saal.model import ArchitectureConfig
from saal.relationships import (RelationshipMatrix, angle, angle_matrix, average_matrices, enumerate_pairwise,
                                estimate_during_training, gradient_angle, lookahead_loss, lookahead_scores,
                                render_heatmap, saal_w_matrix, spearman, spearman_rho, train_stl_baselines,
                                transfer_fine_tune)
from saal.trainer import TrainerConfig


def quadratic_graphs(targets, param_names):
    graphs = []
    for target, name in zip(targets, param_names):
        g = Graph()
        g.set_output(g.mse(g.param(name), g.const(np.array([target]))))
        graphs.append(g)
    return graphs


def _batch(model, rng, n=6):
    labels = {0: rng.standard_normal((n, 2)), 1: rng.integers(0, 3, n).astype(float), 2: rng.standard_normal((n, 1))}
    return Batch(rng.standard_normal((n, 3)), labels)


# look-ahead

def test_lookahead_quadratic_toy():
    # L1 = L2 = (w - 1)^2 at w = 3, eta = 0.1: w' = 3 - 0.1 * 4 = 2.6, reduction 4 - 2.56
    graphs = quadratic_graphs([1.0, 1.0], ["w", "w"])
    s = lookahead_scores(graphs, {"w": np.array([3.0])}, {}, {}, 0.1)
    assert s[0, 1] == pytest.approx(4.0 - 2.56) and s[1, 0] == pytest.approx(4.0 - 2.56)


def test_lookahead_opposed_targets_hurt():
    graphs = quadratic_graphs([1.0, -1.0], ["w", "w"])
    s = lookahead_scores(graphs, {"w": np.array([0.5])}, {}, {}, 0.1)
    # w sits between the optima, so each task's step moves away from the other's
    assert s[0, 1] < 0 and s[1, 0] < 0


def test_lookahead_disjoint_and_stationary():
    graphs = quadratic_graphs([1.0, 1.0], ["a", "b"])
    s = lookahead_scores(graphs, {"a": np.array([3.0]), "b": np.array([2.0])}, {}, {}, 0.1)
    assert s[0, 1] == 0.0 and s[1, 0] == 0.0
    graphs = quadratic_graphs([1.0, 2.0], ["w", "w"])
    s = lookahead_scores(graphs, {"w": np.array([1.0])}, {}, {}, 0.1)
    assert s[0, 1] == 0.0  # task 0 is at its optimum, so its step is zero


def test_lookahead_on_model(rng):
    model = three_task_model()
    tr, va = lookahead_loss(model, None, _batch(model, rng), _batch(model, rng), 0.1)
    assert tr.method == "lookahead_train" and va.method == "lookahead_val"
    off = ~np.eye(3, dtype=bool)
    assert np.all(np.isfinite(tr.scores[off])) and np.all(np.isnan(np.diag(tr.scores)))


# gradient angle

def test_angle_examples():
    u = np.array([1.0, 2.0, -1.0])
    assert angle(u, u) == pytest.approx(0.0, abs=1e-7)
    assert angle(u, -u) == pytest.approx(math.pi)
    assert math.isnan(angle(u, np.zeros(3)))


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_angle_matches_direct_cosine(seed):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal(5), rng.standard_normal(5)
    cos = sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))
    assert angle(u, v) == pytest.approx(math.acos(cos), abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_angle_symmetric(seed):
    model = three_task_model(seed, shared_depth=2)
    rel = gradient_angle(model, None, _batch(model, np.random.default_rng(seed)))
    s = rel.scores
    off = ~np.eye(3, dtype=bool)
    assert np.array_equal(s[off], s.T[off])
    assert np.all((s[off] >= 0) & (s[off] <= math.pi))
    assert not rel.higher_is_better


def test_gradient_angle_needs_shared():
    model = three_task_model(shared_depth=0)
    with pytest.raises(ContractError):
        gradient_angle(model, None, _batch(model, np.random.default_rng(0)))


# spearman

def test_spearman_rho_basic():
    assert spearman_rho([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman_rho([1, 2, 3], [3, 2, 1]) == -1.0
    assert spearman_rho([1, 1, 1], [1, 2, 3]) is None


@settings(max_examples=200)
@given(st.permutations(list(range(7))))
def test_spearman_rho_against_rank_formula(perm):
    n = len(perm)
    d2 = sum((i - p) ** 2 for i, p in enumerate(perm))
    assert spearman_rho(list(range(n)), perm) == pytest.approx(1 - 6 * d2 / (n * (n * n - 1)), abs=1e-12)


def _random_matrix(seed, T=4, method="x"):
    rng = np.random.default_rng(seed)
    return RelationshipMatrix(method, rng.standard_normal((T, T)))


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32 - 1))
def test_spearman_matrix_properties(seed):
    a = _random_matrix(seed)
    assert spearman(a, a).mean == 1.0
    assert spearman(a, RelationshipMatrix("neg", -a.scores)).mean == -1.0
    mono = RelationshipMatrix("exp", np.exp(3 * a.scores) + 2)
    assert spearman(a, mono).mean == 1.0
    # a lower-is-better matrix of the same values ranks the opposite way
    flipped = RelationshipMatrix("angle", a.scores, higher_is_better=False)
    assert spearman(a, flipped).mean == -1.0


def test_spearman_constant_column_missing():
    a = _random_matrix(0, T=3)
    b = RelationshipMatrix("c", np.ones((3, 3)))
    rep = spearman(a, b)
    assert rep.mean is None and all(v is None for v in rep.per_target.values())
    with pytest.raises(ContractError):
        spearman(_random_matrix(0, T=2), _random_matrix(1, T=2))


# serialisation and rendering

def test_matrix_json_round_trip(tmp_path):
    rel = RelationshipMatrix("enum", np.arange(9.0).reshape(3, 3), {0: 1.0, 1: 2.0, 2: 3.0},
                             {(0, 1): 2.5, (1, 0): 0.5}, meta={"seed": 1})
    back = RelationshipMatrix.load(rel.save(tmp_path / "r.json"))
    assert np.array_equal(np.isnan(back.scores), np.isnan(rel.scores))
    assert np.array_equal(np.nan_to_num(back.scores), np.nan_to_num(rel.scores))
    assert back.baseline == rel.baseline and back.pairwise == rel.pairwise and back.meta == rel.meta


def test_heatmap_and_average():
    a = RelationshipMatrix("enum", np.ones((2, 2)))
    b = RelationshipMatrix("enum", 3 * np.ones((2, 2)))
    avg = average_matrices([a, b])
    assert avg[0, 1] == 2.0
    text = render_heatmap(avg, ["helper", "recipient"])
    assert "+2.000" in text and "--" in text


def test_saal_w_matrix():
    rel = saal_w_matrix({"primary": {"0": 1.0, "1": 1.0}, "aux": {"0->1": 1.2, "1->0": 0.8}}, 2)
    assert rel[0, 1] == 1.2 and rel[1, 0] == 0.8


# training-based estimators (small runs)

@pytest.fixture(scope="module")
def three_tasks():
    ds = generate_planted_asymmetric(SyntheticSpec(num_samples=300, extra_tasks=1), seed=0)
    arch = ArchitectureConfig(input_dim=ds.input_dim, hidden_width=8)
    return ds, arch, TrainerConfig(epochs=3, batch_size=32)


def test_enumeration_counts_runs(three_tasks):
    ds, arch, cfg = three_tasks
    rel = enumerate_pairwise(ds, None, arch, cfg)
    assert rel.meta["runs"] == 6
    assert set(rel.pairwise) == {(s, t) for s in range(3) for t in range(3) if s != t}
    for (s, t), v in rel.pairwise.items():
        assert rel[s, t] == v - rel.baseline[t]
    assert spearman(rel, rel).mean == 1.0


def test_estimators_during_training(three_tasks):
    ds, arch, cfg = three_tasks
    out = estimate_during_training(ds, arch, cfg, every=5)
    assert set(out) == {"lookahead_train", "lookahead_val", "gradangle"}
    ga = out["gradangle"].scores
    off = ~np.eye(3, dtype=bool)
    assert np.array_equal(ga[off], ga.T[off])
    assert out["lookahead_val"].meta["samples"] >= 2


def test_feature_transfer_freezes_encoder_and_recovers_self():
    ds = generate_planted_asymmetric(SyntheticSpec(num_samples=600), seed=0)
    arch = ArchitectureConfig(input_dim=ds.input_dim, hidden_width=16)
    cfg = TrainerConfig(epochs=30, batch_size=32)
    stl = train_stl_baselines(ds, arch, cfg)
    src = stl["helper"].model
    before = {k: v.copy() for k, v in src.params.tensors.items()}
    metrics, frozen = transfer_fine_tune(ds, src, ds.task_specs[0], arch, cfg)
    assert all(np.array_equal(before[k], src.params.tensors[k]) for k in before)
    assert all(np.array_equal(frozen[k], before[k]) for k in frozen)
    ref = stl["helper"].val_metrics["mse"]
    assert abs(metrics["mse"] - ref) <= 0.05 * ref
