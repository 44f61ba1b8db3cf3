"""
Binary checkpoint container.

Layout (all integers little-endian)::

    offset 0    8 bytes   magic b"AFFCKPT1"
    offset 8    8 bytes   header length N (uint64)
    offset 16   N bytes   header, UTF-8 JSON with sorted keys
    offset 16+N           payload: raw little-endian tensor bytes, back to back

The header holds ``version``, ``tensors`` (a list of ``{name, shape, dtype, offset, length}`` with
offsets relative to the payload start), ``config`` (the run configuration the tensors were trained
under) and ``state`` (step counter, stage and best held-out MAE). Optimizer moments are stored as
ordinary tensors named ``optimizer/m/<param>`` and ``optimizer/v/<param>``. Decoding an encoded
container reproduces every tensor bit for bit.
"""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import attrs
import numpy as np

from .exceptions import CheckpointError
from .model import AffordanceDenoiser, ModelConfig
from .numerics import Array

_LOGGER = logging.getLogger(__name__)

MAGIC = b"AFFCKPT1"
FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = ".ckpt"
_LENGTH = struct.Struct("<Q")
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}

OPTIMIZER_FIRST = "optimizer/m/"
OPTIMIZER_SECOND = "optimizer/v/"


@attrs.frozen
class TrainingState:
    step: int = 0
    updates: int = 0
    stage: str | None = None
    best_mae: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return attrs.asdict(self)


@attrs.frozen(eq=False)
class Checkpoint:
    tensors: dict[str, Array]
    config: dict[str, Any] = attrs.field(factory=dict)
    state: TrainingState = attrs.field(factory=TrainingState)

    @property
    def parameters(self) -> dict[str, Array]:
        return {
            name: value
            for name, value in self.tensors.items()
            if not name.startswith((OPTIMIZER_FIRST, OPTIMIZER_SECOND))
        }

    def moments(self) -> tuple[dict[str, Array], dict[str, Array]]:
        first = {n[len(OPTIMIZER_FIRST) :]: v for n, v in self.tensors.items() if n.startswith(OPTIMIZER_FIRST)}
        second = {n[len(OPTIMIZER_SECOND) :]: v for n, v in self.tensors.items() if n.startswith(OPTIMIZER_SECOND)}
        return first, second


def encode(checkpoint: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(checkpoint.tensors):
        value = np.asarray(checkpoint.tensors[name])
        dtype_name = value.dtype.name
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dtype_name}")
        raw = np.ascontiguousarray(value, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(value.shape),
                "dtype": dtype_name,
                "offset": offset,
                "length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)

    header = {
        "version": FORMAT_VERSION,
        "tensors": entries,
        "config": checkpoint.config,
        "state": checkpoint.state.to_dict(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(chunks)


def decode(data: bytes) -> Checkpoint:
    prefix = len(MAGIC) + _LENGTH.size
    if len(data) < prefix or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    (header_length,) = _LENGTH.unpack_from(data, len(MAGIC))
    if prefix + header_length > len(data):
        raise CheckpointError("checkpoint header is truncated")
    try:
        header = json.loads(data[prefix : prefix + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is not valid JSON: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")

    payload = memoryview(data)[prefix + header_length :]
    tensors: dict[str, Array] = {}
    for entry in header.get("tensors", []):
        name = entry["name"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {entry['dtype']!r}")
        start, length = int(entry["offset"]), int(entry["length"])
        shape = tuple(int(extent) for extent in entry["shape"])
        if start + length > len(payload) or length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"tensor {name!r} payload is truncated or inconsistent")
        values = np.frombuffer(payload[start : start + length], dtype=dtype).reshape(shape)
        tensors[name] = values.astype(dtype.newbyteorder("="))

    try:
        state = TrainingState(**header.get("state", {}))
    except TypeError as exc:
        raise CheckpointError(f"malformed training state: {exc}") from exc
    return Checkpoint(tensors=tensors, config=header.get("config", {}), state=state)


def resolve(path: Path) -> Path:
    """Accept ``dir/best`` as shorthand for ``dir/best.ckpt``."""
    if path.is_file():
        return path
    candidate = path.with_name(path.name + CHECKPOINT_SUFFIX)
    if candidate.is_file():
        return candidate
    raise CheckpointError(f"no checkpoint at {path}")


def save(path: Path, checkpoint: Checkpoint) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(checkpoint))
    _LOGGER.info("Wrote checkpoint %s (%d tensors)", path, len(checkpoint.tensors))


def load(path: Path) -> Checkpoint:
    source = resolve(path)
    try:
        data = source.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {source}: {exc}") from exc
    return decode(data)


def model_checkpoint(
    model: AffordanceDenoiser,
    config: Mapping[str, Any],
    state: TrainingState,
    moments: tuple[Mapping[str, Array], Mapping[str, Array]] | None = None,
) -> Checkpoint:
    tensors = model.store.state()
    if moments is not None:
        first, second = moments
        tensors.update({OPTIMIZER_FIRST + name: value.copy() for name, value in first.items()})
        tensors.update({OPTIMIZER_SECOND + name: value.copy() for name, value in second.items()})
    return Checkpoint(tensors=tensors, config=dict(config), state=state)


def restore_model(checkpoint: Checkpoint, config: ModelConfig | None = None) -> AffordanceDenoiser:
    """
    Rebuild the denoiser a checkpoint was saved from and load its parameters.

    With an explicit ``config`` the parameters are loaded into that architecture instead; any
    missing tensor or shape mismatch raises ``CheckpointError`` naming the tensor.
    """
    if config is None:
        try:
            config = ModelConfig.from_dict(checkpoint.config["model"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"checkpoint carries no usable model config: {exc}") from exc
    model = AffordanceDenoiser(config)
    model.store.load(checkpoint.parameters)
    return model
