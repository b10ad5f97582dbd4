import sys

import numpy as np
import pytest

from hierafl.model import HierarchyNetSpec, build_network


def finite_difference(fn, params, eps=1e-4):
    """Central differences of scalar ``fn(params)`` for every entry of every array."""
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += eps
            minus[name][idx] -= eps
            g[idx] = (fn(plus) - fn(minus)) / (2 * eps)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    assert set(analytic) <= set(numeric)
    for name, num in numeric.items():
        ana = analytic.get(name, np.zeros_like(num))
        err = np.abs(ana - num)
        bound = atol + rtol * np.maximum(np.abs(ana), np.abs(num))
        assert np.all(err <= bound), f"{name}: max err {err.max():.3g}"


@pytest.fixture
def small_spec():
    return HierarchyNetSpec(num_exits=3, input_dim=5, trunk_widths=(6, 5, 4), feature_dim=3, num_classes=4)


@pytest.fixture
def small_net(small_spec):
    return build_network(small_spec, seed=7)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
