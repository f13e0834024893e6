import numpy as np
import pytest
from hypothesis import given, strategies as st

from saal.errors import ContractError, DimensionError
from saal.metrics import (ACCURACY, MSE, MetricSpec, ImprovementReport, aggregate, format_table, mean_report,
                          relative_improvement, task_delta, task_metrics)
from saal.model import classification, regression

HIGHER = {"a": False, "b": False}
LOWER = {"a": True, "b": True}


def test_segmentation_fixture():
    assert task_delta({"a": 39.21, "b": 59.52}, {"a": 38.05, "b": 57.44}, HIGHER) == pytest.approx(3.33, abs=0.01)


def test_depth_fixture_value():
    # unrounded value from the printed raw metrics; the table shows 16.53
    d = task_delta({"a": 50.67, "b": 20.68}, {"a": 60.64, "b": 24.81}, LOWER)
    assert d == pytest.approx(16.5439, abs=1e-4)


def test_mtl_aggregate_fixture():
    assert aggregate([3.33, 16.53, -0.54]) == pytest.approx(6.44, abs=0.01)


def test_identity_is_zero():
    assert task_delta({"a": 1.5}, {"a": 1.5}, {"a": True}) == 0.0


def test_zero_baseline_and_mismatch():
    with pytest.raises(ZeroDivisionError):
        task_delta({"a": 1.0}, {"a": 0.0}, {"a": False})
    with pytest.raises(ContractError):
        task_delta({"a": 1.0}, {"b": 1.0}, {"a": False})


@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_sign_convention(m, s):
    lower = task_delta({"x": m}, {"x": s}, {"x": True})
    higher = task_delta({"x": m}, {"x": s}, {"x": False})
    assert lower == -higher
    if m < s:
        assert lower > 0


@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100))
def test_scale_invariance(m, s, c):
    d = task_delta({"x": m}, {"x": s}, {"x": True})
    assert task_delta({"x": c * m}, {"x": c * s}, {"x": True}) == pytest.approx(d, rel=1e-9, abs=1e-9)


def test_task_metrics():
    clf = classification(0, 3)
    assert task_metrics(np.eye(3)[[0, 1, 2, 2]], np.array([0, 1, 2, 1.0]), clf) == {"accuracy": 0.75}
    y = np.ones((4, 1))
    assert task_metrics(y, y, regression(0)) == {"mse": 0.0}
    with pytest.raises(DimensionError):
        task_metrics(np.ones((3, 1)), y, regression(0))


def test_relative_improvement_report():
    rep = relative_improvement({"r": {"mse": 0.5}, "c": {"accuracy": 0.9}},
                               {"r": {"mse": 1.0}, "c": {"accuracy": 0.75}},
                               {"r": [MSE], "c": [ACCURACY]})
    assert rep.per_task == pytest.approx({"r": 50.0, "c": 20.0})
    assert rep.delta_mtl == pytest.approx(35.0)
    again = ImprovementReport.from_dict(rep.to_dict())
    assert again == rep
    with pytest.raises(ContractError):
        relative_improvement({"r": {"mse": 1.0}}, {"r": {"mse": 1.0}}, {"r": [MetricSpec("acc", False)]})


def test_mean_report_and_table():
    a = ImprovementReport({"t": 2.0}, 2.0, {"t": {"mse": 1.0}}, {"t": {"mse": 2.0}})
    b = ImprovementReport({"t": 4.0}, 4.0, {"t": {"mse": 3.0}}, {"t": {"mse": 2.0}})
    m = mean_report([a, b])
    assert m.per_task == {"t": 3.0} and m.mtl_metrics == {"t": {"mse": 2.0}}
    table = format_table({"equal": m})
    lines = table.splitlines()
    assert lines[0].split() == ["method", "D_t", "D_MTL", "t.mse"]
    assert lines[2].split()[0] == "STL" and lines[3].split()[:3] == ["equal", "3.00", "3.00"]
