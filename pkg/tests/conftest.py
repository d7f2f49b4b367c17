import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from screencrawl.scenario import load_scenario  # noqa: E402


@pytest.fixture(scope="session")
def scenario():
    return load_scenario()
