"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    magic        16 bytes  b"\\x89SGDFUSE-CKPT\\r\\n\\x1a"
    version      u32
    header_len   u32       followed by a UTF-8 JSON header
    blob_count   u32
    blob_count x:
        name_len u32, name (UTF-8)
        meta_len u32, meta (UTF-8 JSON: {"dtype": ..., "shape": [...]})
        data_len u64, raw bytes (C order)

Parameter blobs are named ``param/<state_dict key>``. ``optimizer`` holds a
``torch.save`` stream of the optimizer state and ``rng/torch`` the global
torch RNG state.
"""

import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np
import torch
from torch import nn

from sgdfuse.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"\x89SGDFUSE-CKPT\r\n\x1a"
FORMAT_VERSION = 1
PARAM_PREFIX = "param/"
OPTIMIZER_BLOB = "optimizer"
RNG_BLOB = "rng/torch"
BYTES_DTYPE = "bytes"

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class StageTag(str, Enum):
    """Which network a checkpoint holds."""

    STAGE1 = "stage1"
    STAGE2 = "stage2"


@dataclass
class Checkpoint:
    """Parameters plus everything needed to resume training bit-for-bit."""

    stage: StageTag
    params: dict[str, torch.Tensor]
    config: dict[str, Any] = field(default_factory=dict)
    step: int = 0
    history: list[dict[str, float]] = field(default_factory=list)
    best_loss: float | None = None
    optimizer_state: bytes | None = None
    rng_state: torch.Tensor | None = None
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def capture(
    stage: StageTag,
    module: nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
    **kwargs: Any,
) -> Checkpoint:
    """Snapshot a module (and optimizer) into a detached Checkpoint."""
    params = {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
    opt_state = None
    if optimizer is not None:
        buf = io.BytesIO()
        torch.save(optimizer.state_dict(), buf)
        opt_state = buf.getvalue()
    return Checkpoint(
        stage=stage,
        params=params,
        optimizer_state=opt_state,
        rng_state=torch.get_rng_state(),
        **kwargs,
    )


def _dtype_name(dtype: torch.dtype) -> str:
    return str(dtype).removeprefix("torch.")


def _tensor_blob(tensor: torch.Tensor) -> tuple[dict[str, Any], bytes]:
    t = tensor.detach().cpu().contiguous()
    meta = {"dtype": _dtype_name(t.dtype), "shape": list(t.shape)}
    return meta, t.numpy().tobytes()


def _blob_tensor(name: str, meta: dict[str, Any], data: bytes) -> torch.Tensor:
    dtype = getattr(torch, str(meta.get("dtype")), None)
    if not isinstance(dtype, torch.dtype):
        raise CheckpointError(f"Blob '{name}' has unknown dtype {meta.get('dtype')!r}")
    np_dtype = torch.empty(0, dtype=dtype).numpy().dtype
    arr = np.frombuffer(data, dtype=np_dtype).reshape(meta["shape"])
    return torch.from_numpy(arr.copy())


def _write_blob(fh: BinaryIO, name: str, meta: dict[str, Any], data: bytes) -> None:
    raw_name = name.encode("utf-8")
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    fh.write(_U32.pack(len(raw_name)) + raw_name)
    fh.write(_U32.pack(len(raw_meta)) + raw_meta)
    fh.write(_U64.pack(len(data)))
    fh.write(data)


def _header(ckpt: Checkpoint) -> dict[str, Any]:
    return {
        "stage": ckpt.stage.value,
        "config": ckpt.config,
        "step": ckpt.step,
        "history": ckpt.history,
        "best_loss": ckpt.best_loss,
        "metadata": ckpt.metadata,
    }


def save_checkpoint(ckpt: Checkpoint, path: Path) -> str:
    """Write ``ckpt`` atomically and return its git-style content hash."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    blobs: list[tuple[str, dict[str, Any], bytes]] = []
    for key in sorted(ckpt.params):
        meta, data = _tensor_blob(ckpt.params[key])
        blobs.append((PARAM_PREFIX + key, meta, data))
    if ckpt.optimizer_state is not None:
        blobs.append((OPTIMIZER_BLOB, {"dtype": BYTES_DTYPE, "shape": []}, ckpt.optimizer_state))
    if ckpt.rng_state is not None:
        meta, data = _tensor_blob(ckpt.rng_state)
        blobs.append((RNG_BLOB, meta, data))

    header = json.dumps(_header(ckpt), sort_keys=True).encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(ckpt.version))
        fh.write(_U32.pack(len(header)) + header)
        fh.write(_U32.pack(len(blobs)))
        for name, meta, data in blobs:
            _write_blob(fh, name, meta, data)
    os.replace(tmp, path)
    digest = content_hash(path)
    logger.info(f"Saved {ckpt.stage.value} checkpoint at step {ckpt.step} to {path} ({digest[:12]})")
    return digest


class _Reader:
    def __init__(self, data: bytes, path: Path) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"Checkpoint {self.path} is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return int(_U32.unpack(self.take(_U32.size))[0])

    def u64(self) -> int:
        return int(_U64.unpack(self.take(_U64.size))[0])

    def json(self, n: int) -> Any:
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Checkpoint {self.path} has a corrupt JSON section: {e}") from e


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: On a missing file, bad magic, unsupported version or truncation.
    """
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    reader = _Reader(data, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not an sgdfuse checkpoint (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} in {path}")
    header = reader.json(reader.u32())
    params: dict[str, torch.Tensor] = {}
    optimizer_state: bytes | None = None
    rng_state: torch.Tensor | None = None
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        meta = reader.json(reader.u32())
        blob = reader.take(reader.u64())
        if name == OPTIMIZER_BLOB:
            optimizer_state = blob
        elif name == RNG_BLOB:
            rng_state = _blob_tensor(name, meta, blob)
        elif name.startswith(PARAM_PREFIX):
            params[name.removeprefix(PARAM_PREFIX)] = _blob_tensor(name, meta, blob)
        else:
            logger.warning(f"Ignoring unknown blob '{name}' in {path}")
    if reader.pos != len(data):
        raise CheckpointError(f"Checkpoint {path} has {len(data) - reader.pos} trailing bytes")
    try:
        stage = StageTag(header["stage"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} has no valid stage tag") from e
    return Checkpoint(
        stage=stage,
        params=params,
        config=header.get("config", {}),
        step=int(header.get("step", 0)),
        history=list(header.get("history", [])),
        best_loss=header.get("best_loss"),
        optimizer_state=optimizer_state,
        rng_state=rng_state,
        metadata=header.get("metadata", {}),
        version=version,
    )


def content_hash(path: Path) -> str:
    """Git blob SHA-1 of a file."""
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def check_compatible(ckpt: Checkpoint, module: nn.Module, stage: StageTag) -> None:
    """Raise CheckpointError listing every difference between ``ckpt`` and ``module``."""
    mismatches: list[str] = []
    if ckpt.version != FORMAT_VERSION:
        mismatches.append(f"version {ckpt.version} != {FORMAT_VERSION}")
    if ckpt.stage is not stage:
        mismatches.append(f"stage '{ckpt.stage.value}' != '{stage.value}'")
    expected = module.state_dict()
    for key in sorted(set(expected) - set(ckpt.params)):
        mismatches.append(f"missing '{key}'")
    for key in sorted(set(ckpt.params) - set(expected)):
        mismatches.append(f"unexpected '{key}'")
    for key in sorted(set(expected) & set(ckpt.params)):
        want, got = expected[key], ckpt.params[key]
        if tuple(want.shape) != tuple(got.shape):
            mismatches.append(f"'{key}' shape {tuple(got.shape)} != {tuple(want.shape)}")
        elif want.dtype != got.dtype:
            mismatches.append(f"'{key}' dtype {got.dtype} != {want.dtype}")
    if mismatches:
        raise CheckpointError("Checkpoint does not match the configured model", mismatches)


def load_into(
    module: nn.Module,
    ckpt: Checkpoint,
    stage: StageTag,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    """Check compatibility, then copy parameters (and optimizer state) into place."""
    check_compatible(ckpt, module, stage)
    module.load_state_dict(ckpt.params, strict=True)
    if optimizer is not None and ckpt.optimizer_state is not None:
        state = torch.load(io.BytesIO(ckpt.optimizer_state), weights_only=True)
        optimizer.load_state_dict(state)
