from datetime import datetime

import pytest

from app import build_parser, exit_code, main
from core.errors import (
    AlignmentError,
    ChecksumError,
    ConfigError,
    DegenerateChannelError,
    InvalidArgumentError,
    NumericFailureError,
    PersistenceError,
)
from features.pipeline import Pipeline


def test_exit_codes_by_error_kind(tmp_path):
    assert exit_code(ConfigError("train.epochs", "must be >= 0")) == 2
    assert exit_code(InvalidArgumentError("bad")) == 2
    assert exit_code(AlignmentError(datetime(2020, 1, 1))) == 2
    assert exit_code(NumericFailureError("nan", step=3)) == 3
    assert exit_code(DegenerateChannelError("u10", "std")) == 3
    assert exit_code(PersistenceError(tmp_path, "disk full")) == 4
    assert exit_code(ChecksumError(tmp_path, "mismatch")) == 4
    assert exit_code(RuntimeError("other")) == 1


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["forecast"])
    args = build_parser().parse_args(["finetune", "--steps", "4", "--set", "a=1", "--set", "b=2"])
    assert args.steps == 4
    assert args.overrides == ["a=1", "b=2"]
    assert args.source == "train"


def test_main_maps_config_problems_to_exit_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2
    assert main(["train", "--output-dir", str(tmp_path), "--set", "train.epochs=-1"]) == 2
    assert main(["finetune", "--output-dir", str(tmp_path)]) == 2
    assert main(["rollout", "--output-dir", str(tmp_path), "--source", "best"]) == 2


def _gradcheck_reports(passed_two_step):
    entry = {"max_rel_error": 1e-4, "tolerance": 2e-3, "passed": True}
    return {
        "format_version": 1,
        "1-step": entry,
        "2-step": {**entry, "max_rel_error": 0.5, "tolerance": 5e-3, "passed": passed_two_step},
    }


def test_gradcheck_exit_code_follows_the_reports(tmp_path, monkeypatch):
    monkeypatch.setattr(Pipeline, "gradcheck", lambda self: _gradcheck_reports(False))
    assert main(["gradcheck", "--output-dir", str(tmp_path)]) == 3
    monkeypatch.setattr(Pipeline, "gradcheck", lambda self: _gradcheck_reports(True))
    assert main(["gradcheck", "--output-dir", str(tmp_path)]) == 0
