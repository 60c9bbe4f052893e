import numpy as np
import pytest

from hetseg.experiments import DESK_PHANTOM
from hetseg.phantom import generate_suite, load_suite


@pytest.fixture(scope="session")
def small_suite(tmp_path_factory):
    """Three subjects per dataset at desk resolution, written once per session."""
    out = tmp_path_factory.mktemp("suite")
    generate_suite(DESK_PHANTOM, 3, out)
    return out, load_suite(out), load_suite(out, oracle=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance")
    for n in sorted(mod.RESULTS):
        name, ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'} {name}: {detail}")
