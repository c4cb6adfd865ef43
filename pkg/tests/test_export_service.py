import math

import numpy as np
import pytest

from app.core.config import settings
from app.services.export_service import (
    POLYLINE_COLUMNS,
    config_hash,
    ensure_output_dir,
    format_value,
    json_ready,
    load_summary,
    read_rows,
    write_polylines,
    write_rows,
    write_summary,
)


def test_config_hash_ignores_key_order() -> None:
    first = config_hash({"R": 4.0, "levels": [0.0, 1.0]})
    second = config_hash({"levels": [0.0, 1.0], "R": 4.0})
    assert first == second
    assert len(first) == 64
    assert config_hash({"R": 5.0, "levels": [0.0, 1.0]}) != first


def test_format_value() -> None:
    assert format_value(None) == ""
    assert format_value(True) == "true"
    assert format_value(np.bool_(False)) == "false"
    assert format_value(np.int64(7)) == "7"
    assert format_value(0.1) == "0.1"
    assert format_value(np.float64(1.0 / 3.0)) == repr(1.0 / 3.0)
    assert format_value(math.nan) == "nan"
    assert format_value("x=+R") == "x=+R"


def test_json_ready_replaces_non_finite() -> None:
    payload = json_ready({"a": np.array([1.0, np.inf]), "b": (np.int32(2), math.nan), 3: np.bool_(True)})
    assert payload == {"a": [1.0, None], "b": [2, None], "3": True}


def test_rows_round_trip(tmp_path) -> None:
    path = write_rows(tmp_path / "nested" / "rows.csv", ("seed", "value", "flag"), [{"seed": 1, "value": 0.25}])
    rows = read_rows(path)
    assert rows == [{"seed": "1", "value": "0.25", "flag": ""}]
    assert path.read_bytes().endswith(b"\n")


def test_summary_is_stable(tmp_path) -> None:
    summary = {"z": 1, "a": [0.5, math.nan]}
    path = write_summary(tmp_path / "summary.json", summary)
    first = path.read_bytes()
    write_summary(path, dict(reversed(list(summary.items()))))
    assert path.read_bytes() == first
    assert load_summary(path) == {"a": [0.5, None], "z": 1}
    with pytest.raises(FileNotFoundError):
        load_summary(tmp_path / "missing.json")


def test_write_polylines(tmp_path) -> None:
    segments = np.array([[[0.0, 0.0], [1.0, 0.5]], [[1.0, 0.5], [2.0, 0.0]]])
    rows = read_rows(write_polylines(tmp_path / "poly.csv", segments))
    assert list(rows[0]) == list(POLYLINE_COLUMNS)
    assert rows[1] == {"segment": "1", "x0": "1.0", "y0": "0.5", "x1": "2.0", "y1": "0.0"}


def test_ensure_output_dir_defaults_to_settings() -> None:
    out = ensure_output_dir()
    assert out == settings.output_dir
    assert out.is_dir()
