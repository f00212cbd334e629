import numpy as np
import pytest

from odemarkov.chain import ChainModel, build_shift_register

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = str(mark.args[0])
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _criteria.setdefault(key, []).append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: (len(k), k)):
        results = _criteria[key]
        failed = [name for name, ok in results if not ok]
        status = "FAIL" if failed else "PASS"
        detail = f"failed: {', '.join(failed)}" if failed else f"{len(results)} test(s)"
        terminalreporter.write_line(f"criterion {key:>3}: {status}  ({detail})")


@pytest.fixture(scope="session")
def sr2():
    return build_shift_register(2)


@pytest.fixture(scope="session")
def sr3():
    return build_shift_register(3)


@pytest.fixture
def diag_chain():
    """Single state, ``m = diag(2, 5)``."""
    return ChainModel(np.ones((1, 1)), np.diag([2.0, 5.0])[None], None, name="diag25")


@pytest.fixture
def scalar_chain():
    """Single state, ``k = 1``, ``m = 1``, ``w = 1``."""
    return ChainModel(np.ones((1, 1)), np.ones((1, 1, 1)), np.ones((1, 1)), name="scalar")
