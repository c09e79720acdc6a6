import numpy as np
import pytest

from itta.encoders import make_world
from itta.labels import LabelSystem, build_cache, synth_descriptions


@pytest.fixture(scope="session")
def world():
    return make_world(0)


@pytest.fixture(scope="session")
def labels(world):
    return LabelSystem.from_world(world)


@pytest.fixture(scope="session")
def cache(world, labels):
    return build_cache(synth_descriptions(labels, world, 8, 0), world, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------------ acceptance reporting

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}")


@pytest.fixture
def criterion():
    """Record (and print) one pass/fail line per acceptance criterion."""

    def record(n, ok, text):
        ACCEPTANCE[n] = (bool(ok), text)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}")
        return ok

    return record


@pytest.fixture(scope="session")
def bench_sweep_result():
    import time

    from itta import bench

    t0 = time.perf_counter()
    recs = bench.bench_sweep(bench.DEFAULT_GRID, reps=100, itm_reps=10)
    return recs, time.perf_counter() - t0
