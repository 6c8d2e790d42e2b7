"""
Binary checkpoint format for ``ModelParams``.

Layout (all integers unsigned 32-bit little-endian)::

    b"ICCS" | version | len | architecture JSON (UTF-8)
    then, until end of file, one record per tensor:
    len | name (UTF-8) | rank | dim_0 ... dim_{rank-1} | float64 LE data, row-major

Tensor names are the model's ``state_dict`` keys, ``optim.<param>.<moment>``
for the Adam state and ``train.loss_log`` for the per-epoch losses.
"""

from __future__ import annotations

import io
import logging
import struct
from pathlib import Path

import numpy as np

try:
    import torch
except ImportError:
    raise ImportError("torch package is required")

from pydantic import ValidationError

from .errors import CheckpointError
from .neuralsc import Architecture, ModelParams, SemanticTransceiver

logger = logging.getLogger(__name__)

MAGIC = b"ICCS"
VERSION = 1
OPTIMIZER_PREFIX = "optim."
LOSS_LOG_NAME = "train.loss_log"
OPTIMIZER_FIELDS = ("step", "exp_avg", "exp_avg_sq")

_U32 = struct.Struct("<I")


def _write_u32(out: io.BufferedIOBase, value: int) -> None:
    out.write(_U32.pack(value))


def _write_blob(out: io.BufferedIOBase, payload: bytes) -> None:
    _write_u32(out, len(payload))
    out.write(payload)


def _write_tensor(out: io.BufferedIOBase, name: str, values: np.ndarray) -> None:
    # scalar buffers keep rank 0
    values = np.asarray(values, dtype="<f8")
    _write_blob(out, name.encode("utf-8"))
    _write_u32(out, values.ndim)
    for dim in values.shape:
        _write_u32(out, dim)
    out.write(values.tobytes(order="C"))


def checkpoint_tensors(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    """Every tensor stored in a checkpoint, in file order."""
    tensors = [
        (name, value.detach().to(torch.float64).numpy())
        for name, value in params.model.state_dict().items()
    ]
    for name, _ in params.model.named_parameters():
        moments = params.optimizer_state.get(name)
        if moments is None:
            continue
        for key in OPTIMIZER_FIELDS:
            tensors.append((f"{OPTIMIZER_PREFIX}{name}.{key}", np.asarray(moments[key], dtype=float)))
    tensors.append((LOSS_LOG_NAME, np.asarray(params.loss_log, dtype=float)))
    return tensors


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    """Write ``params`` to ``path``; the same parameters always give the same bytes."""
    path = Path(path)
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    _write_u32(buffer, VERSION)
    _write_blob(buffer, params.arch.model_dump_json().encode("utf-8"))
    for name, values in checkpoint_tensors(params):
        _write_tensor(buffer, name, values)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    logger.info("saved checkpoint %s (%d parameters)", path, params.parameter_count())
    return path


class _Reader:
    def __init__(self, data: bytes, source: Path):
        self.data = data
        self.offset = 0
        self.source = source

    def at_end(self) -> bool:
        return self.offset == len(self.data)

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointError(f"{self.source}: truncated while reading {what}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(_U32.size, what))[0]

    def blob(self, what: str) -> bytes:
        return self.take(self.u32(f"{what} length"), what)


def _read_tensors(reader: _Reader) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    while not reader.at_end():
        name = reader.blob("tensor name").decode("utf-8")
        rank = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"shape of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(8 * count, f"data of {name}")
        if name in tensors:
            raise CheckpointError(f"{reader.source}: duplicate tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return tensors


def load_checkpoint(path: str | Path) -> ModelParams:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: bad magic or version, truncation, or tensors that do
            not match the architecture descriptor.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    reader = _Reader(data, path)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        arch = Architecture.model_validate_json(reader.blob("architecture"))
    except (ValidationError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid architecture descriptor: {exc}") from exc

    tensors = _read_tensors(reader)
    model = SemanticTransceiver(arch)
    state = model.state_dict()
    restored = {}
    for name, target in state.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        values = tensors.pop(name)
        if values.shape != tuple(target.shape):
            raise CheckpointError(
                f"{path}: tensor {name} has shape {values.shape}, "
                f"architecture expects {tuple(target.shape)}"
            )
        restored[name] = torch.from_numpy(values).to(target.dtype)
    model.load_state_dict(restored)

    loss_log = tensors.pop(LOSS_LOG_NAME, np.zeros(0))
    optimizer_state: dict[str, dict[str, np.ndarray]] = {}
    shapes = {name: tuple(p.shape) for name, p in model.named_parameters()}
    for name, values in tensors.items():
        param, _, key = name.removeprefix(OPTIMIZER_PREFIX).rpartition(".")
        if not name.startswith(OPTIMIZER_PREFIX) or param not in shapes or key not in OPTIMIZER_FIELDS:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        expected = () if key == "step" else shapes[param]
        if values.shape != expected:
            raise CheckpointError(f"{path}: tensor {name} has shape {values.shape}, expected {expected}")
        optimizer_state.setdefault(param, {})[key] = values
    for param, moments in optimizer_state.items():
        if set(moments) != set(OPTIMIZER_FIELDS):
            raise CheckpointError(f"{path}: incomplete optimizer state for {param}")

    logger.info("loaded checkpoint %s (%d tensors)", path, len(state))
    return ModelParams(
        arch=arch,
        model=model,
        optimizer_state={name: optimizer_state[name] for name in shapes if name in optimizer_state},
        loss_log=[float(v) for v in loss_log.reshape(-1)],
    )
