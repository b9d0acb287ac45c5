import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_simplex(rng, n, k, spread=3.0):
    z = rng.normal(0, spread, (n, k))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@pytest.fixture(scope="session")
def small_task():
    from divqat.datasets import TaskSpec, generate

    return generate(TaskSpec(n_train=2000, n_test=500, seed=5))


@pytest.fixture(scope="session")
def trained_float(small_task):
    from divqat.nn import build_model
    from divqat.optim import SgdConfig
    from divqat.training import TrainConfig, train_float

    m = build_model("mini_conv", small_task.input_shape, small_task.num_classes, seed=0)
    train_float(m, small_task, TrainConfig(epochs=30, optimizer=SgdConfig(learning_rate=0.05)), seed=0)
    return m


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by the test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        n, text = mark.args
        crit = item.config._criteria
        passed, _ = crit.get(n, (True, text))
        if report.when == "call" or report.failed:
            crit[n] = (passed and report.passed, text)


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        passed, text = crit[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}: {text}")
