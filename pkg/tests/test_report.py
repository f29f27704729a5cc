import itertools
import json
import math

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from features.report import RunResult, best_column, lead_column, score_report, write_report
from features.verify import MetricSeries

LEADS = [48.0, 96.0]


def _run(name, cw, n, lat, values):
    if values is None:
        return RunResult(name, cw, n, lat)
    return RunResult(name, cw, n, lat, {"z500": MetricSeries("rmse", "z500", LEADS, values)})


def _grid_runs(seed):
    rng = np.random.default_rng(seed)
    runs = []
    for cw, n, lat in itertools.product([False, True], [1, 8], [False, True]):
        runs.append(_run(f"cw{int(cw)}-n{n}-lat{int(lat)}", cw, n, lat, rng.integers(1, 6, size=2).astype(float)))
    return runs


@pytest.mark.parametrize("seed", range(5))
def test_best_flags_match_group_scan(seed):
    runs = _grid_runs(seed)
    report = score_report(runs, "z500", LEADS)
    table = report.table
    assert list(table["run"]) == [r.name for r in runs]
    for lead_index, lead in enumerate(LEADS):
        for i, run in enumerate(runs):
            group = [r.rmse["z500"].values[lead_index] for r in runs if r.n_steps == run.n_steps]
            expected = run.rmse["z500"].values[lead_index] == min(group)
            assert bool(table[best_column(lead)].iloc[i]) == expected


def test_missing_runs_are_listed_not_tabulated(tmp_path):
    runs = [
        _run("a", False, 1, True, [1.0, 2.0]),
        _run("b", True, 1, True, None),
        _run("c", True, 8, True, [3.0, 1.0]),
    ]
    report = score_report(runs, "z500", LEADS)
    assert list(report.table["run"]) == ["a", "c"]
    assert report.missing == ["b"]
    paths = write_report(report, tmp_path)
    lines = paths["csv"].read_text().splitlines()
    assert lines[0].startswith("run,channel_weighting,n_steps,lat_weighting,rmse_48h,rmse_96h")
    assert lines[-1] == "# missing runs: b"
    document = json.loads(paths["json"].read_text())
    assert document["missing_runs"] == ["b"]
    assert document["rows"][0]["best_48h"] is True


def test_absent_channel_or_lead_gives_empty_cell(tmp_path):
    runs = [_run("a", False, 1, True, [1.0, 2.0]), RunResult("b", True, 1, True, {})]
    report = score_report(runs, "z500", [48.0, 120.0])
    assert math.isnan(report.table[lead_column(120.0)].iloc[0])
    assert not report.table[best_column(120.0)].any()
    assert report.table[best_column(48.0)].tolist() == [True, False]
    document = report.to_dict()
    assert document["rows"][1]["rmse_48h"] is None
    text = write_report(report, tmp_path, stem="custom")["csv"].read_text()
    assert "# missing" not in text


def test_report_needs_leads():
    with pytest.raises(InvalidArgumentError):
        score_report([], "z500", [])


def test_column_names():
    assert lead_column(48.0) == "rmse_48h"
    assert best_column(7.5) == "best_7.5h"
