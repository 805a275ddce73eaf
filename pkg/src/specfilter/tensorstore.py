"""Bit-exact tensor containers: ``.npy``, ``.npz`` and ``.safetensors``.

Everything here is written against the published container layouts rather
than ``np.load``/``safetensors`` so that every malformed input maps onto a
specific exception and payload bytes are never reinterpreted.  Arrays are
decoded with ``np.frombuffer``; bf16 uses the ``ml_dtypes`` numpy dtype.

Writes go to a temporary file in the destination directory and are moved
into place with ``os.replace`` so a reader never sees a half-written file.
"""

from __future__ import annotations

import ast
import contextlib
import io
import json
import math
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping

import ml_dtypes
import numpy as np

__all__ = [
    "Tensor",
    "TensorInfo",
    "LazyTensor",
    "CheckpointHandle",
    "read_npy",
    "write_npy",
    "read_npz",
    "write_npz",
    "open_safetensors",
    "read_tensor",
    "write_safetensors",
    "FLOAT_DTYPES",
]


class TensorStoreError(Exception):
    """Base class for container errors."""


class FormatError(TensorStoreError, ValueError):
    """The bytes on disk do not describe a valid container."""


class MalformedHeader(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class NotAnArchive(FormatError):
    pass


class BadMagicLength(FormatError):
    pass


class BadJson(FormatError):
    pass


class OverlappingOffsets(FormatError):
    """Tensor byte ranges overlap, disagree with the shape, or run past EOF."""


class UnknownDtypeTag(FormatError):
    pass


class DuplicateName(TensorStoreError, ValueError):
    pass


class NameNotFound(TensorStoreError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class IoFailure(TensorStoreError, OSError):
    pass


# short tag -> (numpy dtype, safetensors tag)
_DTYPES: dict[str, tuple[np.dtype, str]] = {
    "f16": (np.dtype("<f2"), "F16"),
    "bf16": (np.dtype(ml_dtypes.bfloat16), "BF16"),
    "f32": (np.dtype("<f4"), "F32"),
    "f64": (np.dtype("<f8"), "F64"),
    # integer/bool tensors are carried through checkpoints untouched
    "i8": (np.dtype("i1"), "I8"),
    "u8": (np.dtype("u1"), "U8"),
    "i16": (np.dtype("<i2"), "I16"),
    "u16": (np.dtype("<u2"), "U16"),
    "i32": (np.dtype("<i4"), "I32"),
    "u32": (np.dtype("<u4"), "U32"),
    "i64": (np.dtype("<i8"), "I64"),
    "u64": (np.dtype("<u8"), "U64"),
    "bool": (np.dtype("?"), "BOOL"),
}
FLOAT_DTYPES = frozenset({"f16", "bf16", "f32", "f64"})
_SAFETENSORS_TAGS = {st: short for short, (_, st) in _DTYPES.items()}
_NPY_DESCR = {"<f2": "f16", "<f4": "f32", "<f8": "f64"}
_NPY_MAGIC = b"\x93NUMPY"
_ALIGN = 64
_V1_MAX_HEADER = 0xFFFF


def _tag_for(dtype: np.dtype) -> str:
    for tag, (dt, _) in _DTYPES.items():
        if dt == dtype:
            return tag
    raise UnsupportedDtype(f"unsupported dtype {dtype}")


@dataclass(frozen=True, eq=False)
class Tensor:
    """A dense row-major tensor in one of the supported dtypes.

    Equality is bitwise on the payload (so ``nan == nan`` when the bit
    patterns match, and ``0.0 != -0.0``).
    """

    array: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.array)
        tag = _tag_for(arr.dtype)  # big-endian dtypes do not match and are rejected
        arr = np.asarray(arr, dtype=_DTYPES[tag][0], order="C")
        object.__setattr__(self, "array", arr)

    @classmethod
    def from_bytes(cls, dtype: str, shape: Iterable[int], payload: bytes) -> "Tensor":
        if dtype not in _DTYPES:
            raise UnsupportedDtype(f"unsupported dtype {dtype!r}")
        shape = tuple(int(s) for s in shape)
        arr = np.frombuffer(payload, dtype=_DTYPES[dtype][0]).reshape(shape)
        return cls(arr)

    @property
    def dtype(self) -> str:
        return _tag_for(self.array.dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def nbytes(self) -> int:
        return self.array.nbytes

    @property
    def is_float(self) -> bool:
        return self.dtype in FLOAT_DTYPES

    def to_bytes(self) -> bytes:
        return self.array.tobytes(order="C")

    def as_f64(self) -> np.ndarray:
        return self.array.astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.to_bytes() == other.to_bytes()
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Tensor(dtype={self.dtype}, shape={list(self.shape)})"


# ---------------------------------------------------------------------------
# atomic writes


@contextlib.contextmanager
def _atomic_writer(path: str | os.PathLike) -> Iterator[BinaryIO]:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as exc:
        raise IoFailure(f"cannot create temporary file next to {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as f:
            yield f
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException as exc:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        if isinstance(exc, OSError) and not isinstance(exc, TensorStoreError):
            raise IoFailure(f"writing {path} failed: {exc}") from exc
        raise


# ---------------------------------------------------------------------------
# npy / npz


def _npy_header(tensor: Tensor) -> bytes:
    descr = {"f16": "<f2", "f32": "<f4", "f64": "<f8"}.get(tensor.dtype)
    if descr is None:
        raise UnsupportedDtype(f"npy cannot store dtype {tensor.dtype}")
    shape_repr = repr(tuple(tensor.shape))
    text = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}"
    for version, prefix in ((1, 10), (2, 12)):
        total = prefix + len(text) + 1
        padded = -(-total // _ALIGN) * _ALIGN
        body = (text + " " * (padded - total) + "\n").encode("latin1")
        if version == 1 and len(body) > _V1_MAX_HEADER:
            continue
        if version == 1:
            return _NPY_MAGIC + bytes([1, 0]) + len(body).to_bytes(2, "little") + body
        return _NPY_MAGIC + bytes([2, 0]) + len(body).to_bytes(4, "little") + body
    raise AssertionError("unreachable")


def _parse_npy(buf: bytes, source: str) -> Tensor:
    if len(buf) < 10 or buf[:6] != _NPY_MAGIC:
        raise MalformedHeader(f"{source}: missing \\x93NUMPY magic")
    major, minor = buf[6], buf[7]
    if (major, minor) == (1, 0):
        hlen, start = int.from_bytes(buf[8:10], "little"), 10
    elif (major, minor) == (2, 0):
        if len(buf) < 12:
            raise MalformedHeader(f"{source}: truncated header length")
        hlen, start = int.from_bytes(buf[8:12], "little"), 12
    else:
        raise MalformedHeader(f"{source}: unsupported npy version {major}.{minor}")
    if start + hlen > len(buf):
        raise MalformedHeader(f"{source}: header runs past end of file")
    try:
        header = ast.literal_eval(buf[start : start + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise MalformedHeader(f"{source}: header is not a Python literal: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise MalformedHeader(f"{source}: header must have exactly descr/fortran_order/shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if not isinstance(descr, str):
        raise UnsupportedDtype(f"{source}: structured dtype {descr!r}")
    if descr not in _NPY_DESCR:
        raise UnsupportedDtype(f"{source}: dtype {descr!r} (only <f2, <f4, <f8)")
    if fortran is not False:
        raise MalformedHeader(f"{source}: fortran_order arrays are not supported")
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise MalformedHeader(f"{source}: bad shape {shape!r}")
    tag = _NPY_DESCR[descr]
    expected = math.prod(shape) * _DTYPES[tag][0].itemsize
    payload = buf[start + hlen :]
    if len(payload) != expected:
        raise TruncatedPayload(f"{source}: payload has {len(payload)} bytes, header implies {expected}")
    return Tensor.from_bytes(tag, shape, payload)


def read_npy(path: str | os.PathLike) -> Tensor:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return _parse_npy(buf, str(path))


def _npy_bytes(tensor: Tensor) -> bytes:
    return _npy_header(tensor) + tensor.to_bytes()


def write_npy(path: str | os.PathLike, tensor: Tensor) -> None:
    data = _npy_bytes(tensor)
    with _atomic_writer(path) as f:
        f.write(data)


def read_npz(path: str | os.PathLike) -> dict[str, Tensor]:
    """Read every ``.npy`` member of a ZIP archive, keyed without the suffix."""
    try:
        archive = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise NotAnArchive(f"{path} is not a ZIP archive") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    out: dict[str, Tensor] = {}
    with archive:
        for member in archive.namelist():
            if not member.endswith(".npy"):
                err = MalformedHeader(f"{path}: member {member!r} is not a .npy file")
                err.member = member
                raise err
            try:
                out[member[: -len(".npy")]] = _parse_npy(archive.read(member), member)
            except FormatError as exc:
                exc.member = member
                raise
            except (zipfile.BadZipFile, OSError, EOFError) as exc:
                err = NotAnArchive(f"{path}: member {member!r} is corrupt: {exc}")
                err.member = member
                raise err from exc
    return out


def write_npz(path: str | os.PathLike, tensors: Mapping[str, Tensor]) -> None:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, tensor in tensors.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            archive.writestr(info, _npy_bytes(tensor))
    with _atomic_writer(path) as f:
        f.write(buf.getvalue())


# ---------------------------------------------------------------------------
# safetensors


@dataclass(frozen=True)
class TensorInfo:
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def nbytes(self) -> int:
        return self.end - self.begin


@dataclass
class CheckpointHandle:
    """An opened safetensors file.  Only the header has been read."""

    path: Path
    header: dict[str, TensorInfo]
    metadata: dict[str, str] | None = None
    data_start: int = 0
    file_size: int = field(default=0, repr=False)

    def names(self) -> list[str]:
        return list(self.header)

    def __contains__(self, name: str) -> bool:
        return name in self.header

    def info(self, name: str) -> TensorInfo:
        try:
            return self.header[name]
        except KeyError:
            raise NameNotFound(f"tensor {name!r} not in {self.path}") from None

    def read_bytes(self, name: str) -> bytes:
        info = self.info(name)
        try:
            with open(self.path, "rb") as f:
                f.seek(self.data_start + info.begin)
                payload = f.read(info.nbytes)
        except OSError as exc:
            raise IoFailure(f"cannot read {self.path}: {exc}") from exc
        if len(payload) != info.nbytes:
            raise TruncatedPayload(f"{name}: expected {info.nbytes} bytes, got {len(payload)}")
        return payload

    def read_tensor(self, name: str) -> Tensor:
        info = self.info(name)
        return Tensor.from_bytes(info.dtype, info.shape, self.read_bytes(name))

    def lazy(self, name: str) -> "LazyTensor":
        return LazyTensor(self, name, self.info(name))


@dataclass(frozen=True)
class LazyTensor:
    """A tensor left on disk; its bytes are read only when written out."""

    handle: CheckpointHandle
    name: str
    info: TensorInfo

    @property
    def dtype(self) -> str:
        return self.info.dtype

    @property
    def shape(self) -> tuple[int, ...]:
        return self.info.shape

    @property
    def nbytes(self) -> int:
        return self.info.nbytes

    def to_bytes(self) -> bytes:
        return self.handle.read_bytes(self.name)


def _reject_duplicates(pairs: list[tuple[str, object]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateName(f"duplicate key {key!r} in safetensors header")
        out[key] = value
    return out


def _parse_entry(name: str, entry: object) -> TensorInfo:
    if not isinstance(entry, dict):
        raise BadJson(f"{name}: header entry is not an object")
    try:
        tag, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
    except KeyError as exc:
        raise BadJson(f"{name}: header entry missing {exc.args[0]!r}") from None
    if tag not in _SAFETENSORS_TAGS:
        raise UnknownDtypeTag(f"{name}: unknown dtype tag {tag!r}")
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
        raise BadJson(f"{name}: bad shape {shape!r}")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
    ):
        raise BadJson(f"{name}: bad data_offsets {offsets!r}")
    dtype = _SAFETENSORS_TAGS[tag]
    begin, end = offsets
    expected = math.prod(shape) * _DTYPES[dtype][0].itemsize
    if end < begin or end - begin != expected:
        raise OverlappingOffsets(f"{name}: offsets [{begin}, {end}] do not hold {expected} bytes")
    return TensorInfo(dtype, tuple(shape), begin, end)


def open_safetensors(path: str | os.PathLike) -> CheckpointHandle:
    """Validate the header of a safetensors file without touching the payload."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as f:
            prefix = f.read(8)
            if len(prefix) != 8:
                raise BadMagicLength(f"{path}: file shorter than 8 bytes")
            n = int.from_bytes(prefix, "little")
            if n > size - 8:
                raise BadMagicLength(f"{path}: header length {n} exceeds file size {size}")
            raw = f.read(n)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadJson(f"{path}: header is not UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise BadJson(f"{path}: header is not a JSON object")

    metadata = doc.pop("__metadata__", None)
    if metadata is not None and (
        not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values())
    ):
        raise BadJson(f"{path}: __metadata__ must map strings to strings")

    header = {name: _parse_entry(name, entry) for name, entry in doc.items()}
    data_len = size - 8 - n
    last_end, last_name = 0, None
    for name, info in sorted(header.items(), key=lambda kv: (kv[1].begin, kv[1].end)):
        if info.begin < last_end:
            raise OverlappingOffsets(f"{path}: {name!r} overlaps {last_name!r}")
        if info.end > data_len:
            raise OverlappingOffsets(f"{path}: {name!r} ends at {info.end}, past data section of {data_len} bytes")
        last_end, last_name = max(last_end, info.end), name
    return CheckpointHandle(path, header, metadata, data_start=8 + n, file_size=size)


def read_tensor(handle: CheckpointHandle, name: str) -> Tensor:
    return handle.read_tensor(name)


def write_safetensors(
    path: str | os.PathLike,
    tensors: Mapping[str, Tensor | LazyTensor] | Iterable[tuple[str, Tensor | LazyTensor]],
    metadata: Mapping[str, str] | None = None,
) -> None:
    """Write ``tensors`` (in iteration order) to ``path`` atomically.

    ``tensors`` may be a mapping or a sequence of ``(name, tensor)`` pairs;
    the latter is checked for repeated names.  :class:`LazyTensor` values
    are streamed from their source file, so copying a checkpoint never holds
    more than one tensor in memory.
    """
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen: set[str] = set()
    for name, _ in items:
        if name in seen:
            raise DuplicateName(f"tensor name {name!r} given twice")
        if name == "__metadata__":
            raise DuplicateName("'__metadata__' is reserved")
        seen.add(name)

    header: dict[str, object] = {}
    if metadata is not None:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for name, tensor in items:
        header[name] = {
            "dtype": _DTYPES[tensor.dtype][1],
            "shape": list(tensor.shape),
            "data_offsets": [offset, offset + tensor.nbytes],
        }
        offset += tensor.nbytes
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    raw += b" " * (-len(raw) % 8)

    with _atomic_writer(path) as f:
        f.write(len(raw).to_bytes(8, "little"))
        f.write(raw)
        for _, tensor in items:
            payload = tensor.to_bytes()
            if len(payload) != tensor.nbytes:
                raise TruncatedPayload(f"payload size changed while writing {path}")
            f.write(payload)
