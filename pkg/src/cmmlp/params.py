"""Named parameter storage, seeded initialization and the checkpoint format."""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, MutableMapping

import numpy as np

from .autodiff import Tensor

MAGIC = b"CMML"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class InitScheme:
    kind: str = "fan_in_normal"  # fan_in_normal | zeros | identity
    seed: int = 0
    gain: float = 2.0

    def __post_init__(self):
        if self.kind not in ("fan_in_normal", "zeros", "identity"):
            raise ValueError(f"unknown init kind {self.kind!r}")


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator, so values do not depend on creation order."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def init_array(name: str, shape: tuple[int, ...], scheme: InitScheme,
               fan_in: int | None = None, dtype=np.float32) -> np.ndarray:
    if scheme.kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme.kind == "identity":
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ValueError(f"identity init needs a square matrix, got {shape} for {name}")
        return np.eye(shape[0], dtype=dtype)
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    std = np.sqrt(scheme.gain / max(fan_in, 1))
    return (param_rng(scheme.seed, name).standard_normal(shape) * std).astype(dtype)


class ParamStore(MutableMapping[str, np.ndarray]):
    """Ordered name -> array mapping for model parameters."""

    def __init__(self, items: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = {}
        if items:
            for k, v in items.items():
                self[k] = v

    def __getitem__(self, key: str) -> np.ndarray:
        return self._data[key]

    def __setitem__(self, key: str, value) -> None:
        self._data[key] = np.asarray(value)

    def __delitem__(self, key: str) -> None:
        del self._data[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._data.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._data.items()})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._data.items()}

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self._data.items()}

    def to_bytes(self) -> bytes:
        return dumps(self)

    def save(self, path) -> None:
        Path(path).write_bytes(dumps(self))

    @classmethod
    def load(cls, path) -> "ParamStore":
        return loads(Path(path).read_bytes())


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[le], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> ParamStore:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version, count = struct.unpack_from("<II", view, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = ParamStore()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            dtype = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out
