import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dnsmorph.config import TunnelConfig  # noqa: E402

PASSWORD = b"correct horse battery staple"


@pytest.fixture
def password():
    return PASSWORD


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def cfg():
    return TunnelConfig(password=PASSWORD, seed=7)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
