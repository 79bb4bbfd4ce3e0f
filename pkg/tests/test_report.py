import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from metric import MetricMode
from report import (
    RunReport,
    atomic_write,
    jsonable,
    plot_cost_spread,
    plot_design,
    staged_outputs,
    write_csv,
    write_report,
)


def test_jsonable_conversions():
    converted = jsonable(
        {
            "gamma": math.inf,
            "nan": float("nan"),
            "zero": complex(2.0, -1.0),
            "mode": MetricMode.CYCLO,
            "matrix": np.eye(2),
            "count": np.int64(3),
            "flag": np.bool_(True),
            "nested": (1.5, -math.inf),
        }
    )
    assert converted == {
        "gamma": "UNBOUNDED",
        "nan": None,
        "zero": {"real": 2.0, "imag": -1.0},
        "mode": "cyclo",
        "matrix": [[1.0, 0.0], [0.0, 1.0]],
        "count": 3,
        "flag": True,
        "nested": [1.5, "-UNBOUNDED"],
    }
    json.dumps(converted)


def test_report_json_is_stable(tmp_path):
    report = RunReport(
        command="metric",
        config_digest="abc",
        results={"value": math.inf, "b": 1, "a": 2},
        seed=5,
        scenario="s.yaml",
        outputs={"trajectory": "t.csv", "plot": "p.svg"},
    )
    path = write_report(report, str(tmp_path))
    with open(path, encoding="utf-8") as f:
        text = f.read()
    assert text == report.to_json()
    loaded = json.loads(text)
    assert loaded["schema_version"] == 1
    assert loaded["results"]["value"] == "UNBOUNDED"
    assert list(loaded["outputs"]) == ["plot", "trajectory"]


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "nested" / "file.txt"
    atomic_write(str(target), "first\n")
    atomic_write(str(target), "second\n")
    assert target.read_text(encoding="utf-8") == "second\n"
    assert os.listdir(target.parent) == ["file.txt"]


def test_csv_is_byte_identical_across_writes(tmp_path):
    frame = pd.DataFrame({"k": [0, 1], "x": [0.1, 1.0 / 3.0], "alarm": [False, True]})
    first = write_csv(frame, str(tmp_path / "a.csv"))
    second = write_csv(frame.copy(), str(tmp_path / "b.csv"))
    with open(first, "rb") as a, open(second, "rb") as b:
        content = a.read()
        assert content == b.read()
    assert b"\r\n" not in content
    assert pd.read_csv(first, float_precision="round_trip")["x"].iloc[1] == 1.0 / 3.0


def test_design_plot_handles_unbounded_rows(tmp_path):
    pytest.importorskip("matplotlib")
    frame = pd.DataFrame(
        {"candidate": ["v1", "v2"], "expected_cost": [1.0, math.inf], "winner": [True, False]}
    )
    path = plot_design(frame, str(tmp_path / "design.svg"))
    assert path is not None and os.path.getsize(path) > 0


def test_cost_spread_plot_skips_unbounded_draws(tmp_path):
    pytest.importorskip("matplotlib")
    frame = pd.DataFrame(
        {
            "draw": [0, 0, 1, 1],
            "candidate": ["none", "e1,3", "none", "e1,3"],
            "expected_cost": [4.0, 5.0, math.inf, 3.0],
        }
    )
    path = plot_cost_spread(frame, str(tmp_path / "design.svg"))
    assert path is not None and os.path.getsize(path) > 0


def test_staged_outputs_publish_the_report_with_its_artifacts(tmp_path):
    out = tmp_path / "out"
    with staged_outputs(str(out)) as staging:
        write_csv(pd.DataFrame({"k": [0]}), os.path.join(staging, "trajectory.csv"))
        assert not (out / "trajectory.csv").exists()
        write_report(RunReport(command="simulate", config_digest="abc", results={}), staging)
    assert sorted(os.listdir(out)) == ["report.json", "trajectory.csv"]


def test_staged_outputs_discard_everything_on_failure(tmp_path):
    out = tmp_path / "out"
    with pytest.raises(OSError):
        with staged_outputs(str(out)) as staging:
            write_csv(pd.DataFrame({"k": [0]}), os.path.join(staging, "trajectory.csv"))
            raise OSError("disk full")
    assert os.listdir(out) == []
