"""Binary tensor archive: JSON header plus little-endian float64 payload.

Layout:  [4-byte LE uint32 header length] [UTF-8 JSON header] [payload].
The header holds the format version, optional metadata, and for each tensor
its shape and byte offset into the payload.  Offsets never overlap and the
payload length equals the sum of the tensor sizes, so a header edited out of
agreement with the payload is detected rather than silently misread.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from skattn.params import ParamStore

__all__ = [
    "IoError",
    "FormatVersionMismatch",
    "CorruptHeader",
    "WeightArchive",
    "save_weights",
    "load_weights",
]

FORMAT_VERSION = 1
_DTYPE = "<f8"


class IoError(OSError):
    """Filesystem failure while reading or writing an archive."""


class FormatVersionMismatch(ValueError):
    """Archive written by an incompatible format version."""


class CorruptHeader(ValueError):
    """Header is unparseable or inconsistent with the payload."""


@dataclass
class WeightArchive:
    """In-memory view of an archive: named float64 arrays plus metadata."""

    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def digest_input(self) -> list[tuple[str, np.ndarray]]:
        return sorted(self.tensors.items())


def _tensor_dict(weights) -> dict[str, np.ndarray]:
    if isinstance(weights, WeightArchive):
        return dict(weights.tensors)
    if isinstance(weights, ParamStore):
        return {name: t.data for name, t in weights.items()}
    if isinstance(weights, dict):
        return dict(weights)
    store = getattr(weights, "store", None)
    if isinstance(store, ParamStore):
        return {name: t.data for name, t in store.items()}
    raise TypeError(f"cannot serialize {type(weights).__name__}")


def save_weights(weights, path, meta: dict | None = None) -> None:
    """Write tensors (a dict, ParamStore, model, or WeightArchive) to path."""
    tensors = _tensor_dict(weights)
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        raw = arr.astype(_DTYPE, copy=False).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "float64", "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for raw in chunks:
                fh.write(raw)
    except OSError as exc:
        raise IoError(f"cannot write archive {path}: {exc}") from exc


def load_weights(path) -> WeightArchive:
    """Read an archive; every inconsistency maps to a typed error."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read archive {path}: {exc}") from exc
    if len(data) < 4:
        raise CorruptHeader("file shorter than the header length field")
    (hlen,) = struct.unpack("<I", data[:4])
    if len(data) < 4 + hlen:
        raise CorruptHeader(f"header length {hlen} exceeds file size {len(data)}")
    try:
        header = json.loads(data[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"unparseable header: {exc}") from exc
    if not isinstance(header, dict) or "version" not in header:
        raise CorruptHeader("header missing version field")
    if header["version"] != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"archive version {header['version']}, reader supports {FORMAT_VERSION}"
        )
    entries = header.get("tensors")
    if not isinstance(entries, dict):
        raise CorruptHeader("header missing tensors table")
    payload = data[4 + hlen :]
    tensors = {}
    spans = []
    total = 0
    for name, ent in entries.items():
        try:
            shape = tuple(int(v) for v in ent["shape"])
            offset = int(ent["offset"])
            dtype = ent["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptHeader(f"malformed entry for {name!r}") from exc
        if dtype != "float64":
            raise CorruptHeader(f"unsupported dtype {dtype!r} for {name!r}")
        if offset < 0 or any(v < 0 for v in shape):
            raise CorruptHeader(f"negative offset or dim for {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(payload):
            raise CorruptHeader(
                f"tensor {name!r} spans [{offset}, {offset + nbytes}) beyond payload "
                f"of {len(payload)} bytes"
            )
        spans.append((offset, offset + nbytes, name))
        total += nbytes
        tensors[name] = np.frombuffer(
            payload, dtype=_DTYPE, count=nbytes // 8, offset=offset
        ).reshape(shape).copy()
    spans.sort()
    for (a0, a1, na), (b0, _, nb) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CorruptHeader(f"tensors {na!r} and {nb!r} overlap in the payload")
    if total != len(payload):
        raise CorruptHeader(
            f"payload holds {len(payload)} bytes but tensors account for {total}"
        )
    return WeightArchive(tensors=tensors, meta=header.get("meta", {}), version=header["version"])
