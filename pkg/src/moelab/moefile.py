"""Binary ``.moem`` model format.

Layout::

    b"MOEM" | u16 version | u32 n | n bytes canonical JSON config
    repeated per tensor, in declaration order:
        4-byte tag | u32 rows | u32 cols | u32 reserved (0) | rows*cols float32 LE, row-major

Vectors are stored as 1 x n matrices.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .model import LayerWeights, ModelConfig, ModelWeights, expected_shapes

MAGIC = b"MOEM"
VERSION = 1

_TAGS = {
    "embedding": b"EMBD", "positions": b"POSE", "unembedding": b"UNEM",
    "wq": b"ATTQ", "wk": b"ATTK", "wv": b"ATTV", "wo": b"ATTO",
    "gate_w": b"GATW", "gate_b": b"GATB",
    "experts.w1": b"EXW1", "experts.b1": b"EXB1", "experts.w2": b"EXW2",
    "shared.w1": b"SHW1", "shared.b1": b"SHB1", "shared.w2": b"SHW2",
}


def _tag(name: str) -> bytes:
    if "." not in name:
        return _TAGS[name]
    tail = name.split(".", 1)[1]
    if tail.startswith("experts"):
        return _TAGS["experts." + tail.rsplit(".", 1)[1]]
    if tail.startswith("shared"):
        return _TAGS[tail]
    return _TAGS[tail.split("[", 1)[0]]


def _as_matrix_shape(shape: tuple[int, ...]) -> tuple[int, int]:
    return (1, shape[0]) if len(shape) == 1 else (shape[0], shape[1])


def encode(weights: ModelWeights) -> bytes:
    cfg_bytes = weights.config.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg_bytes)), cfg_bytes]
    for name, arr in weights.named_tensors():
        rows, cols = _as_matrix_shape(arr.shape)
        parts.append(_tag(name) + struct.pack("<III", rows, cols, 0))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> ModelWeights:
    view = memoryview(data)
    if len(data) < 10:
        raise FormatError("file too short for header", field="header")
    if bytes(view[:4]) != MAGIC:
        raise FormatError("bad magic bytes", field="magic")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", field="version")
    off = 10
    if off + n > len(data):
        raise FormatError("truncated config block", field="config")
    try:
        cfg = ModelConfig.from_dict(json.loads(bytes(view[off:off + n]).decode("utf-8")))
    except (ValueError, ConfigError) as exc:
        raise FormatError(f"invalid config: {exc}", field="config") from exc
    off += n
    arrays = {}
    for name, shape in expected_shapes(cfg):
        if off + 16 > len(data):
            raise FormatError(f"truncated before tensor {name}", field=name)
        tag = bytes(view[off:off + 4])
        rows, cols, reserved = struct.unpack_from("<III", data, off + 4)
        off += 16
        if tag != _tag(name):
            raise FormatError(f"tensor {name}: expected tag {_tag(name)!r}, found {tag!r}", field=name)
        if reserved != 0:
            raise FormatError(f"tensor {name}: reserved field must be 0", field=name)
        if (rows, cols) != _as_matrix_shape(shape):
            raise ShapeError(f"tensor {name}: declared {rows}x{cols}, config implies "
                             f"{_as_matrix_shape(shape)[0]}x{_as_matrix_shape(shape)[1]}")
        nbytes = rows * cols * 4
        if off + nbytes > len(data):
            raise FormatError(f"truncated data for tensor {name}", field=name)
        arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).astype(np.float64)
        off += nbytes
        if not np.isfinite(arr).all():
            raise FormatError(f"tensor {name}: non-finite entries", field=name)
        arrays[name] = arr.reshape(shape)
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after last tensor", field="trailer")
    return _assemble(cfg, arrays)


def _assemble(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelWeights:
    H, N = cfg.num_heads, cfg.num_experts
    layers = []
    for l in range(cfg.num_layers):
        p = f"layers[{l}]"
        kw = dict(
            wq=np.stack([arrays[f"{p}.wq[{h}]"] for h in range(H)]),
            wk=np.stack([arrays[f"{p}.wk[{h}]"] for h in range(H)]),
            wv=np.stack([arrays[f"{p}.wv[{h}]"] for h in range(H)]),
            wo=np.stack([arrays[f"{p}.wo[{h}]"] for h in range(H)]),
            gate_w=arrays[f"{p}.gate_w"], gate_b=arrays[f"{p}.gate_b"],
            w1=np.stack([arrays[f"{p}.experts[{j}].w1"] for j in range(N)]),
            b1=np.stack([arrays[f"{p}.experts[{j}].b1"] for j in range(N)]),
            w2=np.stack([arrays[f"{p}.experts[{j}].w2"] for j in range(N)]),
        )
        if cfg.has_shared_expert:
            kw.update(shared_w1=arrays[f"{p}.shared.w1"], shared_b1=arrays[f"{p}.shared.b1"],
                      shared_w2=arrays[f"{p}.shared.w2"])
        layers.append(LayerWeights(**kw))
    return ModelWeights(cfg, arrays["embedding"], arrays["positions"], arrays["unembedding"], tuple(layers))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(weights: ModelWeights, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode(weights))


def load_model(path: str | os.PathLike) -> ModelWeights:
    return decode(Path(path).read_bytes())
