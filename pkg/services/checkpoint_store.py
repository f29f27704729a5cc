"""Model and optimizer checkpoint files

    model.json     ModelConfig, grid, and a tensor index [{name, shape, dtype, offset}]
    weights.bin    tensors concatenated in index order (little-endian), 8-byte checksum
    optimizer.bin  Adam first then second moments per parameter, index order, checksum
    state.json     epoch, step counters, RNG state, best-validation record, metric history

offset is a byte offset into the payload.
"""
import logging
from pathlib import Path
from typing import Dict, Any, List, Tuple, Union

import numpy as np
import torch

import config
from core.errors import InvalidArgumentError, PersistenceError, TruncatedFileError
from core.grid import make_grid
from core.model import ForecastNet, ModelConfig
from services.binary_io import array_to_bytes, bytes_to_array, read_blob, read_json, write_blob, write_json

logger = logging.getLogger(__name__)

DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise PersistenceError(path, f"cannot create directory: {e}") from e


def _pack(tensors: List[Tuple[str, torch.Tensor]]) -> Tuple[bytes, List[Dict[str, Any]]]:
    """Concatenate tensors into one payload and describe where each one sits"""
    chunks, index, offset = [], [], 0
    for name, tensor in tensors:
        code = DTYPES.get(tensor.dtype)
        if code is None:
            raise InvalidArgumentError(f"cannot store tensor '{name}' of dtype {tensor.dtype}")
        raw = array_to_bytes(tensor.detach().cpu().numpy(), code)
        index.append({"name": name, "shape": list(tensor.shape), "dtype": code, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), index


def _payload_size(index: List[Dict[str, Any]]) -> int:
    if not index:
        return 0
    last = index[-1]
    return last["offset"] + int(np.prod(last["shape"], dtype=np.int64)) * np.dtype(last["dtype"]).itemsize


def _unpack(payload: bytes, index: List[Dict[str, Any]]) -> Dict[str, torch.Tensor]:
    tensors = {}
    for entry in index:
        size = int(np.prod(entry["shape"], dtype=np.int64)) * np.dtype(entry["dtype"]).itemsize
        chunk = payload[entry["offset"]: entry["offset"] + size]
        values = bytes_to_array(chunk, tuple(entry["shape"]), entry["dtype"])
        tensors[entry["name"]] = torch.from_numpy(values.copy())
    return tensors


def save_model(directory: Union[str, Path], model: ForecastNet) -> None:
    directory = Path(directory)
    _ensure_dir(directory)
    payload, index = _pack(list(model.state_dict().items()))
    write_blob(directory / config.WEIGHTS_FILE, payload)
    write_json(directory / config.MODEL_FILE, {
        "format_version": config.FORMAT_VERSION,
        "model_config": model.cfg.model_dump(mode="json"),
        "grid": model.grid.to_dict(),
        "tensors": index,
    })


def load_model(directory: Union[str, Path]) -> ForecastNet:
    """
    Rebuild a ForecastNet from model.json + weights.bin.

    Raises:
        NotFoundError, VersionMismatchError, TruncatedFileError, ChecksumError
    """
    directory = Path(directory)
    document = read_json(directory / config.MODEL_FILE)
    cfg = ModelConfig.model_validate(document["model_config"])
    grid = make_grid(**document["grid"])
    index = document["tensors"]
    payload = read_blob(directory / config.WEIGHTS_FILE, _payload_size(index))
    tensors = _unpack(payload, index)
    model = ForecastNet(cfg, grid)
    dtypes = {t.dtype for t in tensors.values()}
    if len(dtypes) == 1:
        model = model.to(dtypes.pop())
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise TruncatedFileError(directory / config.MODEL_FILE, f"tensor index does not fit the model: {e}") from e
    return model


def save_optimizer(directory: Union[str, Path], optimizer: torch.optim.Optimizer, names: List[str]) -> Dict[str, Any]:
    """
    Write Adam moments to optimizer.bin.

    Returns:
        JSON-ready description (param groups, per-parameter step counts, tensor index)
        to be stored in state.json
    """
    directory = Path(directory)
    _ensure_dir(directory)
    state = optimizer.state_dict()
    tensors, steps = [], {}
    for i, name in enumerate(names):
        entry = state["state"].get(i)
        if entry is None:
            continue
        tensors.append((f"{name}.exp_avg", entry["exp_avg"]))
        tensors.append((f"{name}.exp_avg_sq", entry["exp_avg_sq"]))
        steps[name] = float(entry["step"])
    payload, index = _pack(tensors)
    write_blob(directory / config.OPTIMIZER_FILE, payload)
    return {"param_groups": state["param_groups"], "steps": steps, "tensors": index}


def load_optimizer(
    directory: Union[str, Path],
    optimizer: torch.optim.Optimizer,
    names: List[str],
    description: Dict[str, Any],
) -> None:
    """Restore moments and step counters written by save_optimizer into `optimizer`"""
    directory = Path(directory)
    index = description["tensors"]
    payload = read_blob(directory / config.OPTIMIZER_FILE, _payload_size(index))
    tensors = _unpack(payload, index)
    state = {}
    for i, name in enumerate(names):
        if name not in description["steps"]:
            continue
        state[i] = {
            "step": torch.tensor(description["steps"][name], dtype=torch.float32),
            "exp_avg": tensors[f"{name}.exp_avg"],
            "exp_avg_sq": tensors[f"{name}.exp_avg_sq"],
        }
    optimizer.load_state_dict({"state": state, "param_groups": description["param_groups"]})


def rng_state_to_hex(state: torch.Tensor) -> str:
    return state.numpy().tobytes().hex()


def rng_state_from_hex(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(bytes.fromhex(text), dtype=np.uint8).copy())


def write_state(directory: Union[str, Path], state: Dict[str, Any]) -> None:
    write_json(Path(directory) / config.STATE_FILE, {"format_version": config.FORMAT_VERSION, **state})


def read_state(directory: Union[str, Path]) -> Dict[str, Any]:
    return read_json(Path(directory) / config.STATE_FILE)
