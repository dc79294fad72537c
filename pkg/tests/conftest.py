import os

import pytest


@pytest.fixture(autouse=True, scope="session")
def isolated_reference_cache(tmp_path_factory):
    """Keep reference solutions of the suite out of the user cache."""
    old = os.environ.get("RDEADAPT_CACHE")
    os.environ["RDEADAPT_CACHE"] = str(tmp_path_factory.mktemp("reference-cache"))
    yield
    if old is None:
        os.environ.pop("RDEADAPT_CACHE", None)
    else:
        os.environ["RDEADAPT_CACHE"] = old


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
