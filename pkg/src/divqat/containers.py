"""Versioned array containers shared by datasets, transfer sets and checkpoints.

Binary layout::

    magic (8 bytes) | u32 format version | u32 header length | header JSON (utf-8)
    | raw little-endian array payloads, in header order

The header carries free-form metadata plus one ``{name, dtype, shape}``
record per array. The textual variant is a JSON object holding the same
header and base64 payloads; both decode to bit-identical arrays.
"""
import base64
import json
import struct

import numpy as np

from .errors import DatasetFormatError

FORMAT_VERSION = 1
MAGICS = {"dataset": b"DQDSET\x00\x00", "checkpoint": b"DQCKPT\x00\x00", "transfer": b"DQXFER\x00\x00"}
_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


def _le(arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
    if arr.dtype.kind == "f" and arr.dtype.itemsize not in (4, 8):
        raise DatasetFormatError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=dt)


def _header(kind, meta, arrays):
    records = []
    for name, arr in arrays.items():
        a = _le(arr)
        records.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
    return {"kind": kind, "format_version": FORMAT_VERSION, "meta": meta, "arrays": records}


def dumps_binary(kind, meta, arrays):
    header = json.dumps(_header(kind, meta, arrays), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGICS[kind], struct.pack("<II", FORMAT_VERSION, len(header)), header]
    parts += [_le(a).tobytes() for a in arrays.values()]
    return b"".join(parts)


def dumps_json(kind, meta, arrays):
    doc = _header(kind, meta, arrays)
    doc["payload"] = {name: base64.b64encode(_le(a).tobytes()).decode("ascii") for name, a in arrays.items()}
    return json.dumps(doc, sort_keys=True, indent=1)


def _decode_arrays(records, chunk_for):
    out = {}
    for rec in records:
        if rec["dtype"] not in _DTYPES:
            raise DatasetFormatError(f"unsupported dtype {rec['dtype']!r} for {rec['name']}")
        dt = np.dtype(rec["dtype"])
        shape = tuple(rec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        raw = chunk_for(rec["name"], nbytes)
        out[rec["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return out


def loads_binary(blob, kind=None):
    if len(blob) < 16:
        raise DatasetFormatError(f"file truncated at byte offset {len(blob)}: header needs 16 bytes")
    magic = bytes(blob[:8])
    found = {v: k for k, v in MAGICS.items()}.get(magic)
    if found is None:
        raise DatasetFormatError(f"bad magic {magic!r} at byte offset 0")
    if kind is not None and found != kind:
        raise DatasetFormatError(f"expected a {kind} container, found {found}")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version} at byte offset 8")
    if len(blob) < 16 + hlen:
        raise DatasetFormatError(f"file truncated at byte offset {len(blob)}: header ends at {16 + hlen}")
    try:
        header = json.loads(bytes(blob[16:16 + hlen]).decode())
    except ValueError as exc:
        raise DatasetFormatError(f"corrupt header at byte offset 16: {exc}") from None
    pos = [16 + hlen]

    def chunk(name, nbytes):
        start = pos[0]
        if start + nbytes > len(blob):
            raise DatasetFormatError(
                f"file truncated at byte offset {len(blob)}: array {name!r} needs bytes {start}..{start + nbytes}")
        pos[0] = start + nbytes
        return blob[start:start + nbytes]

    arrays = _decode_arrays(header["arrays"], chunk)
    if pos[0] != len(blob):
        raise DatasetFormatError(f"{len(blob) - pos[0]} trailing bytes after byte offset {pos[0]}")
    return header, arrays


def loads_json(text, kind=None):
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise DatasetFormatError(f"invalid JSON container: {exc}") from None
    if kind is not None and doc.get("kind") != kind:
        raise DatasetFormatError(f"expected a {kind} container, found {doc.get('kind')}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {doc.get('format_version')}")
    payload = doc.pop("payload")

    def chunk(name, nbytes):
        raw = base64.b64decode(payload[name])
        if len(raw) != nbytes:
            raise DatasetFormatError(f"array {name!r} has {len(raw)} bytes, expected {nbytes}")
        return raw

    return doc, _decode_arrays(doc["arrays"], chunk)


def save(path, kind, meta, arrays, fmt=None):
    fmt = fmt or ("json" if str(path).endswith(".json") else "binary")
    if fmt == "json":
        with open(path, "w") as fh:
            fh.write(dumps_json(kind, meta, arrays))
    else:
        with open(path, "wb") as fh:
            fh.write(dumps_binary(kind, meta, arrays))


def load(path, kind=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:1] == b"{":
        return loads_json(blob.decode(), kind)
    return loads_binary(blob, kind)
