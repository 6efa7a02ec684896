import os
import sys
from pathlib import Path

import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))


@pytest.fixture(autouse=True)
def backward_threads(monkeypatch):
    """Попримерный обратный проход в одном потоке, если MISGRAD_THREADS не задан явно."""
    if 'MISGRAD_THREADS' not in os.environ:
        monkeypatch.setenv('MISGRAD_THREADS', '1')
    yield os.environ['MISGRAD_THREADS']
