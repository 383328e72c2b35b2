"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic        4 bytes   b"PFCK"
    version      uint32    container version (1)
    header_len   uint32
    header       UTF-8 JSON: {"tag", "model_config", "extra"}
    n_tensors    uint32
    n_tensors x:
        name_len uint16, name (UTF-8)
        ndim     uint8, shape (ndim x uint32)
        data     float32 little-endian, C order

Model parameters and buffers are stored under their ``state_dict`` names.
Optimizer moments, when present, are stored as ``optim/<param>/<slot>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from ..voxel import _atomic_write
from .config import ModelConfig
from .network import VERSION, CompletionTransformer

MAGIC = b"PFCK"
CONTAINER_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, tag: str, model_config: dict, tensors: dict, extra: dict | None = None):
    buf = io.BytesIO()
    header = json.dumps({"tag": tag, "model_config": model_config, "extra": extra or {}}).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CONTAINER_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    _atomic_write(Path(path), buf.getvalue())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != CONTAINER_VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        pos = 12
        header = json.loads(raw[pos:pos + hlen])
        pos += hlen
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return header, tensors


def save_model(model: CompletionTransformer, path, optimizer=None, extra=None) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for slot, value in optimizer.state.get(p, {}).items():
                    tensors[f"optim/{names[id(p)]}/{slot}"] = value.detach().cpu().numpy()
    write_container(path, VERSION, model.config.to_dict(), tensors, extra)


def load_model(path: str | os.PathLike, optimizer_factory=None):
    """Rebuild the model from a checkpoint.

    Returns ``(model, optimizer_or_None, extra)``. Shapes are checked against
    the stored config; any mismatch raises :class:`CheckpointError`.
    """
    header, tensors = read_container(path)
    if header.get("tag") != VERSION:
        raise CheckpointError(f"{path}: unexpected model tag {header.get('tag')!r}")
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from exc
    model = CompletionTransformer(cfg)
    state = model.state_dict()
    params = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    if set(params) != set(state):
        missing = sorted(set(state) - set(params))[:3]
        raise CheckpointError(f"{path}: tensor names do not match the model (e.g. {missing})")
    for name, arr in params.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, config implies {tuple(state[name].shape)}"
            )
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: {name} holds non-finite values")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        named = dict(model.named_parameters())
        for key, arr in tensors.items():
            if key.startswith("optim/"):
                _, pname, slot = key.split("/")
                optimizer.state[named[pname]][slot] = torch.from_numpy(arr.copy())
    return model, optimizer, header.get("extra", {})
