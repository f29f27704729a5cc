"""Configuration management for aeriscast"""
import logging
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Base directory
BASE_DIR = Path(__file__).parent
DATA_DIR = Path(os.getenv("AERISCAST_HOME", BASE_DIR / "data"))
RUNS_DIR = DATA_DIR / "runs"
CONFIGS_DIR = BASE_DIR / "data" / "configs"

# Worker configuration (0 = torch default)
THREADS = int(os.getenv("AERISCAST_THREADS", 0) or 0)

# Application Configuration
DEBUG = os.getenv("DEBUG", "False").lower() == "true"
LOG_LEVEL = "DEBUG" if DEBUG else os.getenv("AERISCAST_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# On-disk formats (datasets, forecasts, checkpoints)
FORMAT_VERSION = 1
META_FILE = "meta.json"
MODEL_FILE = "model.json"
WEIGHTS_FILE = "weights.bin"
OPTIMIZER_FILE = "optimizer.bin"
STATE_FILE = "state.json"
METRICS_LOG_FILE = "metrics.jsonl"
DONE_MARKER = "_DONE"
FAILED_MARKER = "_FAILED"


def configure_logging(level: str = LOG_LEVEL) -> None:
    """Install the root handler once; library modules only create loggers"""
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def configure_threads(threads: int = THREADS) -> None:
    """Cap torch worker threads when AERISCAST_THREADS is set"""
    if threads > 0:
        import torch
        torch.set_num_threads(threads)
