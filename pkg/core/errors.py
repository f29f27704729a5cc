"""Exception hierarchy shared by every aeriscast module"""
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence, Union


class AeriscastError(Exception):
    """Base class for all errors raised by aeriscast"""


class InvalidArgumentError(AeriscastError, ValueError):
    """Bad shapes, bad arguments or unknown channel names"""


class ConfigError(AeriscastError):
    """RunConfig failed to parse or validate"""

    def __init__(self, field: str, constraint: str):
        self.field = field
        self.constraint = constraint
        super().__init__(f"{field}: {constraint}")


class BoundsError(AeriscastError, IndexError):
    """Sample index outside its split"""


class DegenerateChannelError(AeriscastError):
    """A channel has zero spread, so it cannot be normalized"""

    def __init__(self, channel: str, statistic: str):
        self.channel = channel
        self.statistic = statistic
        super().__init__(f"channel '{channel}' is degenerate: {statistic} = 0")


class NumericFailureError(AeriscastError, FloatingPointError):
    """Non-finite values in activations, losses or gradients"""

    def __init__(
        self,
        message: str,
        block: Optional[int] = None,
        step: Optional[int] = None,
        tensor: Optional[str] = None,
        epoch: Optional[int] = None,
    ):
        self.message = message
        self.block = block
        self.step = step
        self.tensor = tensor
        self.epoch = epoch
        context = []
        if epoch is not None:
            context.append(f"epoch={epoch}")
        if step is not None:
            context.append(f"step={step}")
        if block is not None:
            context.append(f"block={block}")
        if tensor is not None:
            context.append(f"tensor={tensor}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(message + suffix)

    def with_context(self, **context) -> "NumericFailureError":
        """Copy of this error with additional location fields filled in"""
        fields = {
            "block": self.block,
            "step": self.step,
            "tensor": self.tensor,
            "epoch": self.epoch,
        }
        fields.update({k: v for k, v in context.items() if v is not None})
        return NumericFailureError(self.message, **fields)


class AlignmentError(AeriscastError):
    """A forecast valid time has no matching truth"""

    def __init__(self, valid_time: datetime):
        self.valid_time = valid_time
        super().__init__(f"no truth state at valid time {valid_time.isoformat()}")


class MissingInitError(AeriscastError):
    """Lagged-ensemble members are absent from the forecast store"""

    def __init__(self, missing: Sequence[datetime]):
        self.missing = list(missing)
        listed = ", ".join(t.isoformat() for t in self.missing)
        super().__init__(f"missing forecasts for init times: {listed}")


class PersistenceError(AeriscastError, OSError):
    """I/O failure on a dataset, forecast or checkpoint file"""

    def __init__(self, path: Union[str, Path], reason: str):
        self.path = Path(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class NotFoundError(PersistenceError):
    pass


class VersionMismatchError(PersistenceError):
    pass


class ChecksumError(PersistenceError):
    pass


class TruncatedFileError(ChecksumError):
    """File size disagrees with its declared shape; the checksum cannot be verified"""
