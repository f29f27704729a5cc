"""Ablation score tables: one row per trained run, RMSE per lead, group minima flagged"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from core.errors import InvalidArgumentError, PersistenceError
from features.verify import MetricSeries
from services.binary_io import write_json

logger = logging.getLogger(__name__)

FACTORS = ["channel_weighting", "n_steps", "lat_weighting"]
GROUP_BY = "n_steps"
FLOAT_FORMAT = "%.6g"


@dataclass
class RunResult:
    """
    Scores of one trained configuration.

    rmse maps channel -> per-lead series; None marks a run whose outputs are missing.
    """
    name: str
    channel_weighting: bool
    n_steps: int
    lat_weighting: bool
    rmse: Optional[Dict[str, MetricSeries]] = None


@dataclass
class ScoreReport:
    channel: str
    lead_hours: List[float]
    table: pd.DataFrame
    missing: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        rows = []
        for record in self.table.to_dict(orient="records"):
            rows.append({
                k: (None if isinstance(v, float) and math.isnan(v) else v.item() if hasattr(v, "item") else v)
                for k, v in record.items()
            })
        return {
            "channel": self.channel,
            "lead_hours": list(self.lead_hours),
            "rows": rows,
            "missing_runs": list(self.missing),
        }


def lead_column(lead_hours: float) -> str:
    return f"rmse_{lead_hours:g}h"


def best_column(lead_hours: float) -> str:
    return f"best_{lead_hours:g}h"


def _value(series: Optional[MetricSeries], lead_hours: float) -> float:
    if series is None:
        return float("nan")
    try:
        return series.at(lead_hours)
    except InvalidArgumentError:
        return float("nan")


def score_report(runs: Sequence[RunResult], channel: str, lead_hours: Sequence[float]) -> ScoreReport:
    """
    Build the ablation table for one channel.

    Rows follow the order of `runs`. Within each n_steps group the smallest RMSE
    per lead is flagged (ties all flagged). Runs without results are left out of
    the table and listed in `missing`.
    """
    if not lead_hours:
        raise InvalidArgumentError("score_report needs at least one lead")
    records, missing = [], []
    for run in runs:
        if run.rmse is None:
            missing.append(run.name)
            continue
        series = run.rmse.get(channel)
        record = {"run": run.name, **{f: getattr(run, f) for f in FACTORS}}
        for lead in lead_hours:
            record[lead_column(lead)] = _value(series, lead)
        records.append(record)

    columns = ["run"] + FACTORS + [lead_column(l) for l in lead_hours]
    table = pd.DataFrame.from_records(records, columns=columns)
    for lead in lead_hours:
        scores = table[lead_column(lead)]
        group_min = scores.groupby(table[GROUP_BY]).transform("min")
        table[best_column(lead)] = scores.notna() & (scores == group_min)
    if missing:
        logger.warning("report for %s: %d missing run(s): %s", channel, len(missing), ", ".join(missing))
    return ScoreReport(channel, list(lead_hours), table, missing)


def write_report(report: ScoreReport, directory: Union[str, Path], stem: Optional[str] = None) -> Dict[str, Path]:
    """
    Write <stem>.csv and <stem>.json. The CSV gets a '# missing runs:' footer line
    when some runs had no results.
    """
    directory = Path(directory)
    stem = stem or f"report_{report.channel}"
    csv_path = directory / f"{stem}.csv"
    json_path = directory / f"{stem}.json"
    try:
        directory.mkdir(parents=True, exist_ok=True)
        text = report.table.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        if report.missing:
            text += f"# missing runs: {', '.join(report.missing)}\n"
        csv_path.write_text(text)
    except OSError as e:
        raise PersistenceError(csv_path, f"cannot write report: {e}") from e
    write_json(json_path, report.to_dict())
    logger.info("wrote %s (%d rows)", csv_path, len(report.table))
    return {"csv": csv_path, "json": json_path}
