"""Shared fixtures: the default desk-scale run is trained once per session."""
import time

import numpy as np
import pytest

from scaleup import experiment as ex

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")


@pytest.fixture(scope="session")
def default_cfg():
    return ex.RunConfig()


@pytest.fixture(scope="session")
def poisoned_run(default_cfg):
    start = time.perf_counter()
    run = ex.train_poisoned(default_cfg)
    run.seconds = time.perf_counter() - start
    return run


@pytest.fixture(scope="session")
def benign_model(default_cfg, poisoned_run):
    return ex.train_benign(default_cfg, poisoned_run.datasets).model


@pytest.fixture(scope="session")
def adaptive_model(default_cfg, poisoned_run):
    return ex.run_adaptive(default_cfg, poisoned_run.datasets).model


@pytest.fixture(scope="session")
def poisoned_eval(default_cfg, poisoned_run):
    return ex.evaluate(default_cfg, poisoned_run.model, poisoned_run.datasets, poisoned_run.triggers)


@pytest.fixture(scope="session")
def benign_eval(default_cfg, poisoned_run, benign_model):
    return ex.evaluate(default_cfg, benign_model, poisoned_run.datasets, poisoned_run.triggers)


@pytest.fixture(scope="session")
def poisoned_test(default_cfg, poisoned_run):
    return ex.merge_testsets(ex.poisoned_testsets(default_cfg, poisoned_run.datasets.test, poisoned_run.triggers))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cli_eval_runs(tmp_path_factory):
    """Two independent end-to-end ``eval`` invocations with the default config."""
    import contextlib
    import io

    from scaleup import cli

    runs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"eval{i}")
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.main(["eval", "--out", str(out)])
        runs.append((code, out, buf.getvalue()))
    return runs
