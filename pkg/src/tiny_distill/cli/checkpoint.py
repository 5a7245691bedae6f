"""TWCK checkpoint files.

Layout: ``b"TWCK"``, u16 format version, u32 header length, a UTF-8 JSON
header (model config, metadata, tensor table), then the tensor payload as
little-endian float32. Every integer field is little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, TinyDistillError
from ..numerics import Tensor
from ..transformer import ModelConfig, TransformerLM

MAGIC = b"TWCK"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(TinyDistillError, ValueError):
    pass


@dataclass
class Checkpoint:
    model: TransformerLM
    metadata: dict
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, model: TransformerLM, metadata: dict | None = None,
                    optimizer: dict[str, np.ndarray] | None = None) -> None:
    """Write atomically via a sibling temp file."""
    tensors = [(name, t.data) for name, t in model.params.items()]
    tensors += [(f"opt.{k}", v) for k, v in (optimizer or {}).items()]
    table = []
    offset = 0
    for name, arr in tensors:
        nbytes = int(arr.size) * 4
        table.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = json.dumps(
        {"model_config": model.config.to_dict(), "metadata": metadata or {}, "tensors": table},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(header)))
        f.write(header)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    tmp.replace(path)


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 10 + hlen
    try:
        header = json.loads(blob[10:start].decode("utf-8"))
        config = ModelConfig.from_dict(header["model_config"])
    except (ValueError, KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if expect_config is not None and config != expect_config:
        raise CheckpointError(f"{path}: model config {config} does not match the run config {expect_config}")
    payload = memoryview(blob)[start:]
    shapes = config.param_shapes()
    params, optimizer = {}, {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {entry.get('dtype')}")
        lo, n = entry["offset"], entry["nbytes"]
        if n != 4 * int(np.prod(shape, dtype=np.int64)) or lo + n > len(payload):
            raise CheckpointError(f"{path}: tensor {name} is truncated or mis-sized")
        arr = np.frombuffer(payload[lo : lo + n], dtype=_F32).reshape(shape).astype(np.float32)
        if name.startswith("opt."):
            optimizer[name[4:]] = arr
            continue
        if shapes.get(name) != shape:
            raise CheckpointError(f"{path}: tensor {name} shape {shape} incompatible with config")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if set(params) != set(shapes):
        raise CheckpointError(f"{path}: tensors do not match the model config")
    ordered = {k: params[k] for k in shapes}
    return Checkpoint(TransformerLM(config, ordered), header.get("metadata", {}), optimizer)
