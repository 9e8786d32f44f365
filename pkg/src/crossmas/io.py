"""``.mvol`` volume files: a JSON header next to a raw little-endian payload.

Header keys: ``dims``, ``spacing``, ``origin``, ``dtype`` (``"f32"`` for
scalar volumes, ``"i16"`` for label maps) and ``data``, the payload path
relative to the header. Voxels are stored x-fastest. Label headers may also
carry ``label_set``.
"""
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import HeaderError
from .volume import LabelMap, Volume

DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2")}


class DataLengthError(HeaderError):
    """The payload does not hold exactly ``nx * ny * nz`` elements."""


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_volume(path, vol):
    """Write a :class:`Volume` (as f32) or :class:`LabelMap` (as i16)."""
    path = Path(path)
    if isinstance(vol, LabelMap):
        dtype = "i16"
        info = np.iinfo(np.int16)
        if vol.data.min() < info.min or vol.data.max() > info.max:
            raise ValueError("label values do not fit in int16")
    elif isinstance(vol, Volume):
        dtype = "f32"
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    raw_name = path.with_suffix(".raw").name
    payload = np.asarray(vol.data).astype(DTYPES[dtype]).ravel(order="F").tobytes()
    header = {
        "dims": [int(n) for n in vol.dims],
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": dtype,
        "data": raw_name,
    }
    if dtype == "i16":
        header["label_set"] = list(vol.label_set)
    atomic_write_bytes(path.parent / raw_name, payload)
    write_json(path, header)
    return path


def _read_header(path):
    try:
        header = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError) as exc:
        raise HeaderError(f"{path}: cannot read header: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise HeaderError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")
    missing = {"dims", "spacing", "origin", "dtype", "data"} - header.keys()
    if missing:
        raise HeaderError(f"{path}: header missing keys {sorted(missing)}")
    try:
        dims = [int(v) for v in header["dims"]]
        spacing = [float(v) for v in header["spacing"]]
        origin = [float(v) for v in header["origin"]]
    except (TypeError, ValueError) as exc:
        raise HeaderError(f"{path}: non-numeric geometry: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise HeaderError(f"{path}: dims, spacing and origin need three entries each")
    if min(dims) < 1:
        raise HeaderError(f"{path}: dims must be positive, got {dims}")
    if not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise HeaderError(f"{path}: spacing must be positive, got {spacing}")
    if header["dtype"] not in DTYPES:
        raise HeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    if not isinstance(header["data"], str) or not header["data"]:
        raise HeaderError(f"{path}: data must be a relative file path")
    return header, dims, spacing, origin


def read_volume(path):
    """Read an ``.mvol`` file into a :class:`Volume` or :class:`LabelMap`."""
    path = Path(path)
    header, dims, spacing, origin = _read_header(path)
    dtype = DTYPES[header["dtype"]]
    raw = (path.parent / header["data"]).read_bytes()
    expected = dims[0] * dims[1] * dims[2]
    if len(raw) != expected * dtype.itemsize:
        raise DataLengthError(
            f"{path}: dims {dims} need {expected} elements, payload holds {len(raw) / dtype.itemsize:g}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    if header["dtype"] == "i16":
        return LabelMap(data.astype(np.int64), spacing, origin, header.get("label_set"))
    return Volume(data.astype(np.float64), spacing, origin)
