"""Experiment pipeline: RunConfig, content-addressed cached stages, ablation grid

Stage directories live under the output root and are named by a hash of the config
sections they depend on, so runs that share a prefix (same data, same pre-training)
share its outputs:

    data-<h>/dataset/            generated toy dataset (unless data.path is set)
    data-<h>/stats/              stats.json, climatology.bin
    train-<h>/                   best/, last/, metrics.jsonl
    finetune<n>-<h>/             same layout, n-step fine-tuning of train-<h>/best
    eval-<h>/forecasts/          one forecast directory per init time
    eval-<h>/metrics/            metrics.json
    report-<run hash>/           report_<channel>.csv/.json, *.svg
    ablate-<run hash>/           ablation tables and figures
    gradcheck-<h>/               gradcheck.json

A stage directory holding _DONE is a cache hit; a failing stage leaves _FAILED with
the error text.
"""
import hashlib
import itertools
import json
import logging
import math
import re
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

import config
from core.data import Dataset, compute_climatology, compute_norm_stats
from core.errors import AeriscastError, ConfigError, InvalidArgumentError, PersistenceError
from core.grid import make_grid
from core.model import ModelConfig
from core.schema import NormStats
from features.report import RunResult, score_report, write_report
from features.rollout import (
    climatology_forecast,
    evaluation_inits,
    lagged_inits,
    persistence_forecast,
    rollout_many,
)
from features.toy_atmosphere import ToyConfig, generate_toy_dataset
from features.training import FineTuneConfig, TrainConfig, fine_tune, gradient_check, load_checkpoint, train
from features.verify import (
    MetricSeries,
    acc,
    complete_inits,
    high_wavenumber_ratio,
    lagged_ensemble_scores,
    lat_rmse,
    mean_ps1d,
    psd_ratio,
)
from services.binary_io import array_to_bytes, bytes_to_array, read_blob, read_json, write_blob, write_json
from services.checkpoint_store import load_model
from services.dataset_store import DEFAULT_SHARD_TIMES, ForecastStore, load_dataset
from services.plotting import plot_ensemble_panel, plot_lead_curves, plot_spectra

logger = logging.getLogger(__name__)

SOURCE_PATTERN = re.compile(r"^(train|finetune(\d+))$")
GRADCHECK_TOLERANCES = {1: 2e-3, 2: 5e-3}
ENSEMBLE_METRICS = ("ens_mean_rmse", "spread", "spread_skill", "crps")


def canonical_json(value: Any) -> str:
    if isinstance(value, BaseModel):
        value = value.model_dump(mode="json")
    return json.dumps(value, sort_keys=True, separators=(",", ":"), default=str)


def content_hash(value: Any) -> str:
    """12 hex digits of the SHA-256 of the canonical JSON form"""
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()[:12]


class DataConfig(BaseModel):
    """Either an existing dataset directory (path) or a toy atmosphere to generate"""
    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = None
    toy: ToyConfig = Field(default_factory=ToyConfig)
    n_lat: int = 32
    n_lon: int = 64
    shard_times: int = DEFAULT_SHARD_TIMES

    @model_validator(mode="after")
    def _check(self) -> "DataConfig":
        if self.n_lat < 2 or self.n_lon < 2:
            raise ValueError("n_lat and n_lon must be >= 2")
        if self.shard_times < 1:
            raise ValueError("shard_times must be >= 1")
        return self


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_inits: int = 11
    lead_days: float = 7.0
    init_times: Optional[List[datetime]] = None
    split: Literal["train", "val", "test"] = "test"
    channels: List[str] = ["z500", "t850", "t2m"]
    report_leads_hours: List[float] = [48.0, 96.0, 168.0]
    ensemble_members: int = 9
    ensemble_newest_leads: Optional[int] = None     # None: every lead the members can reach
    fair_crps: bool = False
    sources: List[str] = ["train"]

    @field_validator("sources")
    @classmethod
    def _known_sources(cls, value: List[str]) -> List[str]:
        for source in value:
            if not SOURCE_PATTERN.match(source):
                raise ValueError(f"unknown source '{source}' (expected 'train' or 'finetune<n>')")
        if not value:
            raise ValueError("sources must not be empty")
        return value

    @model_validator(mode="after")
    def _check(self) -> "EvalConfig":
        if self.n_inits < 1:
            raise ValueError("n_inits must be >= 1")
        if self.lead_days <= 0:
            raise ValueError("lead_days must be > 0")
        if self.ensemble_members < 2:
            raise ValueError("ensemble_members must be >= 2")
        if self.ensemble_newest_leads is not None and self.ensemble_newest_leads < 1:
            raise ValueError("ensemble_newest_leads must be >= 1")
        if not self.channels:
            raise ValueError("channels must not be empty")
        return self

    def forecast_key(self) -> Dict[str, Any]:
        """Fields that change forecasts or metrics (report layout excluded)"""
        return self.model_dump(mode="json", exclude={"sources", "report_leads_hours"})


class RunConfig(BaseModel):
    """
    One experiment. `seed` seeds pre-training and fine-tuning (it replaces the seed of
    the train and finetune sections); the toy data keeps its own data.toy.seed.
    """
    model_config = ConfigDict(extra="forbid")

    name: str = "run"
    seed: int = 0
    output_dir: Optional[str] = None
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    finetune: FineTuneConfig = Field(default_factory=FineTuneConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def run_hash(self) -> str:
        """Hash of everything that shapes results; the output location is left out"""
        return content_hash(self.model_dump(mode="json", exclude={"output_dir"}))

    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": self.seed})

    def finetune_config(self, n_steps: int) -> FineTuneConfig:
        """Fine-tuning keeps the pre-training loss weighting and dtype"""
        inherited = {k: getattr(self.train, k) for k in ("lat_weighting", "channel_weighting", "surface_emphasis", "dtype")}
        return self.finetune.model_copy(update={**inherited, "seed": self.seed, "n_steps": n_steps})


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply --set key.path=value items to a raw config document.

    Values are parsed as JSON when possible (numbers, booleans, lists), else kept as strings.
    """
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "expected key.path=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = document
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"'{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return document


def parse_run_config(document: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(field, first["msg"]) from e


def load_run_config(path: Optional[Union[str, Path]], overrides: Sequence[str] = ()) -> RunConfig:
    """Read a RunConfig JSON file (or defaults when path is None), then apply overrides"""
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            document = read_json(path, check_version=False)
        except PersistenceError as e:
            raise ConfigError(str(path), e.reason) from e
    return parse_run_config(apply_overrides(document, overrides))


def run_stage(directory: Path, name: str, work: Callable[[], Optional[bool]], provenance: Dict[str, Any]) -> bool:
    """
    Run work() unless directory/_DONE exists. work() returning False leaves the stage
    without _DONE, so the next call runs it again.

    Returns:
        True when work ran, False on a cache hit
    """
    done = directory / config.DONE_MARKER
    failed = directory / config.FAILED_MARKER
    if done.exists():
        logger.info("%s: cached in %s", name, directory)
        return False
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise PersistenceError(directory, f"cannot create directory: {e}") from e
    if failed.exists():
        failed.unlink()
    logger.info("%s: running in %s", name, directory)
    try:
        complete = work()
    except BaseException as e:
        failed.write_text(f"{type(e).__name__}: {e}\n")
        raise
    if complete is False:
        logger.warning("%s: incomplete, will run again", name)
        return True
    write_json(done, {"format_version": config.FORMAT_VERSION, "stage": name, **provenance})
    return True


def _nan_to_none(values) -> List[Optional[float]]:
    return [None if not math.isfinite(v) else float(v) for v in np.asarray(values, dtype=np.float64)]


def _none_to_nan(values) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


class Pipeline:
    """Stages of one RunConfig; each stage runs its prerequisites first (cache hits when done)"""

    def __init__(self, cfg: RunConfig, root: Optional[Union[str, Path]] = None):
        self.cfg = cfg
        self.root = Path(root or cfg.output_dir or config.RUNS_DIR)
        self.run_hash = cfg.run_hash()
        self._dataset: Optional[Dataset] = None

    # -- directories -------------------------------------------------------

    @property
    def data_dir(self) -> Path:
        return self.root / f"data-{content_hash(self.cfg.data)}"

    @property
    def dataset_path(self) -> Path:
        return Path(self.cfg.data.path) if self.cfg.data.path else self.data_dir / "dataset"

    @property
    def stats_dir(self) -> Path:
        return self.data_dir / "stats"

    @property
    def train_key(self) -> str:
        return content_hash({
            "data": self.cfg.data.model_dump(mode="json"),
            "model": self.cfg.model.model_dump(mode="json"),
            "train": self.cfg.train_config().model_dump(mode="json"),
        })

    @property
    def train_dir(self) -> Path:
        return self.root / f"train-{self.train_key}"

    def finetune_dir(self, n_steps: int) -> Path:
        key = content_hash({"parent": self.train_key, "finetune": self.cfg.finetune_config(n_steps).model_dump(mode="json")})
        return self.root / f"finetune{n_steps}-{key}"

    def source_dir(self, source: str) -> Path:
        match = SOURCE_PATTERN.match(source)
        if match is None:
            raise InvalidArgumentError(f"unknown source '{source}'")
        return self.train_dir if match.group(2) is None else self.finetune_dir(int(match.group(2)))

    def eval_dir(self, source: str) -> Path:
        key = content_hash({"source": self.source_dir(source).name, "eval": self.cfg.eval.forecast_key()})
        return self.root / f"eval-{key}"

    @property
    def report_dir(self) -> Path:
        return self.root / f"report-{self.run_hash}"

    def _provenance(self) -> Dict[str, Any]:
        return {"run_hash": self.run_hash, "name": self.cfg.name}

    # -- data --------------------------------------------------------------

    def generate_data(self) -> bool:
        if self.cfg.data.path:
            load_dataset(self.dataset_path)
            return False
        grid = make_grid(self.cfg.data.n_lat, self.cfg.data.n_lon)
        return run_stage(
            self.data_dir, "generate-data",
            lambda: generate_toy_dataset(self.cfg.data.toy, grid, self.dataset_path, self.cfg.data.shard_times),
            self._provenance(),
        )

    def compute_stats(self) -> bool:
        self.generate_data()

        def work():
            dataset = load_dataset(self.dataset_path)
            stats = compute_norm_stats(dataset)
            climatology = compute_climatology(dataset)
            write_blob(self.stats_dir / "climatology.bin", array_to_bytes(climatology, "<f8"))
            write_json(self.stats_dir / "stats.json", {
                "format_version": config.FORMAT_VERSION,
                "run_hash": self.run_hash,
                "channels": dataset.schema.labels[:dataset.schema.n_prognostic],
                "stats": stats.to_dict(),
                "climatology_shape": list(climatology.shape),
            })

        return run_stage(self.stats_dir, "compute-stats", work, self._provenance())

    def dataset(self) -> Dataset:
        """The dataset with normalization statistics attached"""
        if self._dataset is None:
            self.compute_stats()
            document = read_json(self.stats_dir / "stats.json")
            self._dataset = load_dataset(self.dataset_path).with_stats(NormStats.from_dict(document["stats"]))
        return self._dataset

    def climatology(self) -> np.ndarray:
        document = read_json(self.stats_dir / "stats.json")
        shape = tuple(document["climatology_shape"])
        payload = read_blob(self.stats_dir / "climatology.bin", int(np.prod(shape)) * 8)
        return bytes_to_array(payload, shape, "<f8")

    # -- training ----------------------------------------------------------

    def train(self) -> bool:
        dataset = self.dataset()
        return run_stage(
            self.train_dir, "train",
            lambda: train(self.cfg.model, dataset, self.cfg.train_config(), out_dir=self.train_dir),
            self._provenance(),
        )

    def finetune(self, n_steps: int) -> bool:
        if n_steps < 1:
            raise InvalidArgumentError("finetune needs n_steps >= 1")
        self.train()
        dataset = self.dataset()
        out_dir = self.finetune_dir(n_steps)

        def work():
            parent = load_checkpoint(self.train_dir / "best")
            fine_tune(parent, dataset, n_steps, self.cfg.finetune_config(n_steps), out_dir=out_dir)

        return run_stage(out_dir, f"finetune-{n_steps}", work, self._provenance())

    def ensure_source(self, source: str) -> None:
        match = SOURCE_PATTERN.match(source)
        if match is None:
            raise InvalidArgumentError(f"unknown source '{source}'")
        if match.group(2) is None:
            self.train()
        else:
            self.finetune(int(match.group(2)))

    # -- forecasts and metrics ---------------------------------------------

    def lead_steps(self, dataset: Dataset) -> int:
        steps = self.cfg.eval.lead_days * 24.0 / dataset.meta.dt_hours
        if steps < 1 or abs(steps - round(steps)) > 1e-9:
            raise InvalidArgumentError(
                f"lead_days {self.cfg.eval.lead_days} is not a whole number of {dataset.meta.dt_hours}h steps"
            )
        return int(round(steps))

    def eval_inits(self, dataset: Dataset) -> List[datetime]:
        n_steps = self.lead_steps(dataset)
        if self.cfg.eval.init_times:
            for t in self.cfg.eval.init_times:
                dataset.index_of(t)
                dataset.index_of(t + dataset.dt * n_steps)
            return sorted(self.cfg.eval.init_times)
        return evaluation_inits(dataset, self.cfg.eval.n_inits, n_steps, self.cfg.eval.split)

    def rollout(self, source: str = "train") -> bool:
        """Forecasts from every evaluation init plus the older lags the ensembles need"""
        self.ensure_source(source)
        dataset = self.dataset()
        directory = self.eval_dir(source) / "forecasts"

        def work():
            n_steps = self.lead_steps(dataset)
            inits = self.eval_inits(dataset)
            wanted = lagged_inits(inits, self.cfg.eval.ensemble_members, dataset.dt)
            available = [t for t in wanted if t >= dataset.times[0]]
            if len(available) < len(wanted):
                logger.warning("%d lagged init(s) precede the dataset and are skipped", len(wanted) - len(available))
            model = load_model(self.source_dir(source) / "best")
            store = ForecastStore(directory)
            for forecast in rollout_many(model, dataset, available, n_steps, tag=source):
                store.put(forecast)
            write_json(directory / "inits.json", {
                "format_version": config.FORMAT_VERSION,
                "run_hash": self.run_hash,
                "source": source,
                "n_steps": n_steps,
                "inits": [t.isoformat() for t in inits],
            })
            logger.info("%s: %d forecasts x %d leads (+%d lagged)", source, len(inits), n_steps,
                        len(available) - len(inits))

        return run_stage(directory, f"rollout-{source}", work, self._provenance())

    def evaluate(self, source: str = "train") -> bool:
        self.rollout(source)
        dataset = self.dataset()
        directory = self.eval_dir(source) / "metrics"
        return run_stage(directory, f"evaluate-{source}", lambda: self._evaluate(source, dataset, directory),
                         self._provenance())

    def _evaluate(self, source: str, dataset: Dataset, directory: Path) -> None:
        ecfg = self.cfg.eval
        forecast_dir = self.eval_dir(source) / "forecasts"
        document = read_json(forecast_dir / "inits.json")
        inits = [datetime.fromisoformat(t) for t in document["inits"]]
        n_steps = document["n_steps"]
        store = ForecastStore(forecast_dir)
        forecasts = [store.get(t) for t in inits]
        climatology = self.climatology()
        grid = dataset.grid
        persistence = [persistence_forecast(dataset.state(dataset.index_of(t)), n_steps, dataset.dt) for t in inits]
        clim = [climatology_forecast(climatology, dataset.state(dataset.index_of(t)), n_steps, dataset.dt)
                for t in inits]

        deterministic: Dict[str, List[Dict[str, Any]]] = {"model": [], "persistence": [], "climatology": []}
        spectra, ensemble = {}, {}
        m = ecfg.ensemble_members
        reachable = n_steps - (m - 1)
        n_newest = reachable if ecfg.ensemble_newest_leads is None else min(reachable, ecfg.ensemble_newest_leads)
        newest_leads = [dataset.dt * k for k in range(1, n_newest + 1)]
        ensemble_inits = complete_inits(store, inits, m, dataset.dt)
        if len(ensemble_inits) < len(inits):
            logger.warning("%d of %d inits lack older lags and get no ensemble scores",
                           len(inits) - len(ensemble_inits), len(inits))
        for channel in ecfg.channels:
            for label, runs in (("model", forecasts), ("persistence", persistence), ("climatology", clim)):
                deterministic[label].append(lat_rmse(runs, dataset, grid, channel).to_dict())
                deterministic[label].append(acc(runs, dataset, climatology, grid, channel).to_dict())
            spectrum = mean_ps1d(forecasts, dataset, grid, channel)
            ratio = psd_ratio(spectrum["pred"], spectrum["truth"])
            spectra[channel] = {
                "pred": _nan_to_none(spectrum["pred"]),
                "truth": _nan_to_none(spectrum["truth"]),
                "ratio": _nan_to_none(ratio),
                "high_wavenumber_ratio": _nan_to_none([high_wavenumber_ratio(ratio)])[0],
            }
            if newest_leads and ensemble_inits:
                scores = lagged_ensemble_scores(store, dataset, grid, channel, ensemble_inits, m,
                                                newest_leads, ecfg.fair_crps)
                ensemble[channel] = [scores[k].to_dict() for k in ENSEMBLE_METRICS]
            elif not newest_leads:
                logger.warning("%d-member ensembles do not fit in %d leads; skipping ensemble scores", m, n_steps)

        write_json(directory / "metrics.json", {
            "format_version": config.FORMAT_VERSION,
            "run_hash": self.run_hash,
            "source": source,
            "n_inits": len(inits),
            "n_steps": n_steps,
            "deterministic": deterministic,
            "spectra": spectra,
            "ensemble": ensemble,
        })

    def metrics(self, source: str = "train") -> Dict[str, Any]:
        self.evaluate(source)
        return read_json(self.eval_dir(source) / "metrics" / "metrics.json")

    def rmse_series(self, source: str, label: str = "model") -> Dict[str, MetricSeries]:
        series = [MetricSeries.from_dict(d) for d in self.metrics(source)["deterministic"][label]]
        return {s.channel: s for s in series if s.metric == "rmse"}

    def run_result(self, source: str, name: Optional[str] = None) -> RunResult:
        match = SOURCE_PATTERN.match(source)
        n_steps = 1 if match is None or match.group(2) is None else int(match.group(2))
        cfg = self.cfg.train_config()
        return RunResult(
            name=name or f"{self.cfg.name}/{source}",
            channel_weighting=cfg.channel_weighting,
            n_steps=n_steps,
            lat_weighting=cfg.lat_weighting,
            rmse=self.rmse_series(source),
        )

    # -- reports -----------------------------------------------------------

    def report(self) -> bool:
        for source in self.cfg.eval.sources:
            self.evaluate(source)
        return run_stage(self.report_dir, "report", self._report, self._provenance())

    def _report(self) -> None:
        ecfg = self.cfg.eval
        runs = [self.run_result(source) for source in ecfg.sources]
        for channel in ecfg.channels:
            write_report(score_report(runs, channel, ecfg.report_leads_hours), self.report_dir)

        rmse_panels: Dict[str, Dict[str, Tuple[List[float], List[float]]]] = {c: {} for c in ecfg.channels}
        spectra: Dict[str, Dict[str, np.ndarray]] = {c: {} for c in ecfg.channels}
        for i, source in enumerate(ecfg.sources):
            metrics = self.metrics(source)
            curves = {source: metrics["deterministic"]["model"]}
            if i == 0:
                curves.update({b: metrics["deterministic"][b] for b in ("persistence", "climatology")})
            for name, series in curves.items():
                for d in series:
                    if d["metric"] == "rmse":
                        rmse_panels[d["channel"]][name] = (d["lead_hours"], list(_none_to_nan(d["values"])))
            for channel, entry in metrics["spectra"].items():
                spectra[channel]["truth"] = _none_to_nan(entry["truth"])
                spectra[channel][source] = _none_to_nan(entry["pred"])
        plot_lead_curves(rmse_panels, "latitude-weighted RMSE", self.report_dir / "rmse.svg")
        plot_spectra(spectra, self.report_dir / "spectra.svg")

        ensemble = self.metrics(ecfg.sources[0])["ensemble"]
        if ensemble:
            panel = {
                channel: {s["metric"]: (s["lead_hours"], list(_none_to_nan(s["values"]))) for s in series}
                for channel, series in ensemble.items()
            }
            plot_ensemble_panel(panel, self.report_dir / "ensemble.svg")

    def ablation_cells(self, fine_tune_steps: int = 8) -> List[Tuple[str, "Pipeline", str]]:
        """
        The 2 x 2 x 2 grid: channel weighting x {1, n}-step training x latitude weighting.

        Channel weighting moves together with the prediction mode (residual targets
        carry the temporal-difference normalization; direct targets do not).
        """
        cells = []
        for cw, n_steps, lat in itertools.product((False, True), (1, fine_tune_steps), (False, True)):
            cell_cfg = self.cfg.model_copy(update={
                "model": self.cfg.model.model_copy(update={"prediction_mode": "residual" if cw else "direct"}),
                "train": self.cfg.train.model_copy(update={"channel_weighting": cw, "lat_weighting": lat}),
            })
            source = "train" if n_steps == 1 else f"finetune{n_steps}"
            name = f"cw{int(cw)}-n{n_steps}-lat{int(lat)}"
            cells.append((name, Pipeline(cell_cfg, self.root), source))
        return cells

    def ablate(self, fine_tune_steps: int = 8) -> bool:
        """Train, evaluate and tabulate every ablation cell; a failed cell is reported as missing"""
        directory = self.root / f"ablate-{self.run_hash}"

        def work() -> bool:
            runs = []
            for name, cell, source in self.ablation_cells(fine_tune_steps):
                try:
                    runs.append(cell.run_result(source, name))
                except AeriscastError as e:
                    logger.error("ablation cell %s failed: %s", name, e)
                    n_steps = 1 if source == "train" else fine_tune_steps
                    runs.append(RunResult(name, cell.cfg.train.channel_weighting, n_steps, cell.cfg.train.lat_weighting))
            for channel in self.cfg.eval.channels:
                write_report(score_report(runs, channel, self.cfg.eval.report_leads_hours), directory)
            panels = {
                channel: {r.name: (r.rmse[channel].lead_hours, list(r.rmse[channel].values))
                          for r in runs if r.rmse is not None and channel in r.rmse}
                for channel in self.cfg.eval.channels
            }
            plot_lead_curves(panels, "latitude-weighted RMSE", directory / "rmse.svg")
            return all(r.rmse is not None for r in runs)

        return run_stage(directory, "ablate", work, self._provenance())

    def gradcheck(self, n_coords: int = 200) -> Dict[str, Any]:
        directory = self.root / f"gradcheck-{content_hash({'seed': self.cfg.seed, 'n_coords': n_coords})}"

        def work():
            reports = {}
            for n_steps, tolerance in GRADCHECK_TOLERANCES.items():
                report = gradient_check(seed=self.cfg.seed, n_steps=n_steps, n_coords=n_coords)
                reports[f"{n_steps}-step"] = {**report.to_dict(), "tolerance": tolerance,
                                              "passed": report.passed(tolerance)}
            write_json(directory / "gradcheck.json", {"format_version": config.FORMAT_VERSION, **reports})

        run_stage(directory, "gradcheck", work, self._provenance())
        return read_json(directory / "gradcheck.json")
