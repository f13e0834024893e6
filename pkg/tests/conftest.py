import re
import sys

import numpy as np
import pytest

from saal.diffcore import Graph
from saal.model import ArchitectureConfig, build_model, classification, regression


def random_mlp(rng: np.random.Generator, depth: int = 2, width: int = 3, in_dim: int = 2, out_dim: int = 2,
               batch: int = 4, activation: str = "tanh", loss: str = "mse", scale: float = 1.0):
    """A random dense network with a scalar loss; returns (graph, params, inputs)."""
    g = Graph()
    h = g.input("x")
    params = {}
    fan_in = in_dim
    for i in range(depth):
        fan_out = out_dim if i == depth - 1 else width
        params[f"W{i}"] = scale * rng.standard_normal((fan_in, fan_out))
        params[f"b{i}"] = scale * rng.standard_normal(fan_out)
        h = g.add(g.matmul(h, g.param(f"W{i}")), g.param(f"b{i}"))
        if i < depth - 1:
            h = g.activation(h, activation)
        fan_in = fan_out
    inputs = {"x": rng.standard_normal((batch, in_dim))}
    if loss == "mse":
        inputs["y"] = rng.standard_normal((batch, out_dim))
        g.set_output(g.mse(h, g.input("y")))
    else:
        inputs["y"] = rng.integers(0, out_dim, batch).astype(float)
        g.set_output(g.softmax_xent(h, g.input("y")))
    return g, params, inputs


def three_task_model(seed: int = 0, shared_depth: int = 1, activation: str = "tanh"):
    arch = ArchitectureConfig(input_dim=3, hidden_width=4, total_encoder_depth=2, shared_depth=shared_depth,
                              decoder_depth=1, activation=activation)
    tasks = [regression(0, 2), classification(1, 3), regression(2, 1)]
    return build_model(arch, tasks, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        terminalreporter.write_line(mod.RESULTS[n])
