import numpy as np
import pytest

from saal.datasets import (SyntheticSpec, generate_planted_asymmetric, generate_separable,
                           generate_symmetric_positive, load_csv, make_splits, split_sizes)
from saal.errors import ConfigError, ParseError

SCHEMA = {"features": ["f1", "f2"], "tasks": [{"name": "y", "cols": ["y"], "kind": "regression"}]}


def _same(a, b):
    return (np.array_equal(a.features, b.features)
            and all(np.array_equal(a.labels[t], b.labels[t]) for t in a.labels)
            and all(np.array_equal(a.splits[s], b.splits[s]) for s in a.splits))


def test_generators_are_deterministic():
    assert _same(generate_planted_asymmetric(seed=4), generate_planted_asymmetric(seed=4))
    assert _same(generate_symmetric_positive(seed=4), generate_symmetric_positive(seed=4))
    assert _same(generate_separable(seed=1), generate_separable(seed=1))
    assert not _same(generate_planted_asymmetric(seed=4), generate_planted_asymmetric(seed=5))


def test_planted_shapes_and_tasks():
    ds = generate_planted_asymmetric(seed=0)
    spec = SyntheticSpec()
    assert ds.features.shape == (spec.num_samples, spec.input_dim)
    assert [t.name for t in ds.task_specs] == ["helper", "recipient"]
    assert sum(len(v) for v in ds.splits.values()) == spec.num_samples


def test_recipient_noise_level():
    sigma = 0.7
    ds = generate_planted_asymmetric(SyntheticSpec(sigma=sigma), seed=2)
    noise = ds.labels[1] - ds.meta["clean_labels"][1]
    assert abs(noise.std() - sigma) < 0.1 * sigma
    assert np.array_equal(ds.labels[0], ds.meta["clean_labels"][0])


def test_symmetric_is_noiseless():
    ds = generate_symmetric_positive(seed=0)
    assert np.array_equal(ds.labels[1], ds.meta["clean_labels"][1])


def test_extra_tasks():
    ds = generate_planted_asymmetric(SyntheticSpec(extra_tasks=2), seed=0)
    assert [t.task_id for t in ds.task_specs] == [0, 1, 2, 3]
    base = generate_planted_asymmetric(seed=0)
    assert np.array_equal(ds.labels[1], base.labels[1])


def test_invalid_specs():
    with pytest.raises(ConfigError):
        SyntheticSpec(sub_features=20).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(sigma=-1).validate()
    with pytest.raises(ConfigError):
        generate_planted_asymmetric(SyntheticSpec(input_dim=0))


def test_split_sizes():
    assert split_sizes(10, (0.6, 0.2, 0.2)) == (6, 2, 2)
    assert split_sizes(11, (0.6, 0.2, 0.2)) == (7, 2, 2)
    with pytest.raises(ConfigError):
        split_sizes(10, (0.5, 0.2, 0.2))


def test_splits_deterministic_and_disjoint():
    a, b = make_splits(50, (0.6, 0.2, 0.2), 9), make_splits(50, (0.6, 0.2, 0.2), 9)
    assert all(np.array_equal(a[s], b[s]) for s in a)
    assert len(np.unique(np.concatenate(list(a.values())))) == 50


def test_csv_round_trip(tmp_path):
    rows = [[0.5, -1.25, 3.0], [1.0, 2.0, 4.5], [7.125, 0.0, -2.0], [1e-3, 1e3, 0.1]]
    p = tmp_path / "d.csv"
    p.write_text("f1,f2,y\n" + "\n".join(",".join(repr(v) for v in r) for r in rows) + "\n")
    ds = load_csv(p, SCHEMA, (0.5, 0.25, 0.25))
    data = np.array(rows)
    assert np.array_equal(ds.features, data[:, :2])
    assert np.array_equal(ds.labels[0][:, 0], data[:, 2])
    assert ds.task_specs[0].kind == "regression"


def test_csv_classification(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("f1,f2,c\n0,1,0\n1,0,2\n1,1,1\n0,0,0\n")
    ds = load_csv(p, {"features": ["f1", "f2"], "tasks": [{"name": "c", "cols": ["c"], "kind": "classification"}]})
    assert ds.task_specs[0].dim == 3


def test_csv_malformed_row_named(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("f1,f2,y\n1,2,3\n4,5,6\n7,8\n1,1,1\n")
    with pytest.raises(ParseError, match="row 3"):
        load_csv(p, SCHEMA)
    p.write_text("f1,f2,y\n1,2,3\n4,5,6\n7,x,9\n")
    with pytest.raises(ParseError, match="row 3"):
        load_csv(p, SCHEMA)


def test_csv_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("f1,y\n1,2\n")
    with pytest.raises(ParseError, match="f2"):
        load_csv(p, SCHEMA)


def test_subset_reindexes():
    ds = generate_planted_asymmetric(SyntheticSpec(extra_tasks=1), seed=0)
    sub = ds.subset([2, 0])
    assert [t.name for t in sub.task_specs] == ["extra0", "helper"]
    assert np.array_equal(sub.labels[0], ds.labels[2])
