import numpy as np
import pytest

from orient import refdb, so3


def random_sources(seed, n_objects=2, n_refs=12, dims=((3, 3), (6, 6)), channels=4):
    rng = np.random.default_rng(seed)
    sources = []
    for o in range(n_objects):
        maps = [rng.random((n_refs, h, w, channels)).astype(np.float32) for h, w in dims]
        rots = so3.sample_rotations(n_refs, seed * 100 + o)
        sources.append(refdb.ObjectSource(f"obj{o}", rots, maps=maps))
    return sources


@pytest.fixture
def make_sources():
    return random_sources


@pytest.fixture
def small_db():
    return refdb.build(random_sources(0), k_ac=4)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(ok, detail)`` then assert ``ok``."""

    def record(ok, detail=""):
        name = request.node.name.removeprefix("test_")
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        request.node.criterion_recorded = True
        print(line)
        assert ok, detail

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    # a criterion that crashed before reaching its check still gets a FAIL line
    if (report.when == "call" and report.failed and "criterion" in getattr(item, "fixturenames", ())
            and not getattr(item, "criterion_recorded", False)):
        name = item.name.removeprefix("test_")
        ACCEPTANCE_LINES.append(f"[FAIL] {name}: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
