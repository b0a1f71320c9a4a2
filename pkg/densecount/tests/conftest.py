import pytest

from densecount.decorators import debug_enabled, set_debug


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run end-to-end training tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def debug_mode():
    previous = debug_enabled()
    set_debug(True)
    yield
    set_debug(previous)
