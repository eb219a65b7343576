"""On-disk tensors.

Dense tensors are raw row-major little-endian arrays with a JSON sidecar
(``<path>.json``) holding ``shape``, ``dtype`` and an optional grouping
``axis``.  BFP tensors are ``FASTBFP1`` packed files with the same kind of
sidecar, which additionally records ``m``, ``g`` and ``e_bits``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import MalformedImage
from .numerics import BfpTensor
from .storage import pack_group, read_packed, unpack_group, write_packed

_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8"}


def sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_tensor(path: str | Path, arr: np.ndarray, axis: int | None = None) -> None:
    arr = np.asarray(arr)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name}")
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes())
    meta = {"shape": list(arr.shape), "dtype": name}
    if axis is not None:
        meta["axis"] = axis
    sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_meta(path: str | Path) -> dict:
    return json.loads(sidecar(path).read_text())


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    meta = read_meta(path)
    dtype = _DTYPES[meta["dtype"]]
    data = np.frombuffer(Path(path).read_bytes(), dtype=dtype)
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.size} elements but shape {shape}")
    return data.reshape(shape).astype(meta["dtype"]), meta


def write_bfp(path: str | Path, t: BfpTensor) -> None:
    images = [pack_group(grp, t.e_bits) for grp in t.groups()]
    with open(path, "wb") as fh:
        write_packed(fh, images, t.e_bits, t.g, t.m)
    meta = {
        "format": "FASTBFP1",
        "shape": list(t.shape),
        "axis": t.axis,
        "m": t.m,
        "g": t.g,
        "e_bits": t.e_bits,
    }
    sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_bfp(path: str | Path) -> BfpTensor:
    meta = read_meta(path)
    with open(path, "rb") as fh:
        packed = read_packed(fh)
    if (packed.e_bits, packed.g, packed.m) != (meta["e_bits"], meta["g"], meta["m"]):
        raise MalformedImage(f"{path}: header and sidecar disagree")
    groups = [unpack_group(img) for img in packed.images]
    return BfpTensor.from_groups(groups, tuple(meta["shape"]), meta["axis"], packed.e_bits)
