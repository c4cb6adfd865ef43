import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.core.config import settings
from app.services.spectral_service import builtin_measure


@pytest.fixture(autouse=True)
def isolate_output_dir(tmp_path: Path, monkeypatch) -> Path:
    out = tmp_path / "results"
    monkeypatch.setattr(settings, "output_dir", out)
    return out


@pytest.fixture
def rpw():
    return builtin_measure("rpw_circle", {"M": 64})


@pytest.fixture
def small_rpw():
    return builtin_measure("rpw_circle", {"M": 16})
