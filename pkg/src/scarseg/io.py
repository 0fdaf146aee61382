"""Volume and artifact file I/O.

Volumes use the standard 348-byte-header single-file neuroimaging format
(magic "n+1\\0" at offset 344, data at 352), restricted to axis-aligned
geometry and dtypes uint8, int16, float32; gzip-compressed files are
handled transparently and written with a fixed mtime so outputs are
byte-reproducible.  Probability maps are stored as 4-D volumes, one channel
per label.  A JSON+base64 fallback format (.json) round-trips any dtype.

Parameters, transforms, metrics and optimization traces serialize to JSON
and JSON lines with sorted keys and no timestamps.
"""

from __future__ import annotations

import base64
import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .grid import LabelVolume, ScalarVolume, VolumeGrid
from .priors import PriorMap

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
MAGIC_OFFSET = 344

DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
CODE_FOR_DTYPE = {np.dtype(v): k for k, v in DTYPE_CODES.items()}
BITPIX = {2: 8, 4: 16, 16: 32}


class VolumeFormatError(ValueError):
    """Base class for volume file format problems."""


class MagicMismatchError(VolumeFormatError):
    """The magic bytes at offset 344 are wrong."""


class TruncatedFileError(VolumeFormatError):
    """The file ends before the header or voxel data is complete."""


class UnsupportedDtypeError(VolumeFormatError):
    """The data type code is outside the supported subset."""


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _write_bytes(path, payload: bytes):
    path = Path(path)
    if path.name.endswith(".gz"):
        with path.open("wb") as fh:
            # filename="" keeps the member name out of the stream so the
            # bytes do not depend on the output path
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)


def _pack_header(dims, spacing, origin, dtype_code: int, n_channels: int | None) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    ndim = 3 if n_channels is None else 4
    dim = [ndim, dims[0], dims[1], dims[2], n_channels or 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, dtype_code)
    struct.pack_into("<h", hdr, 72, BITPIX[dtype_code])
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)      # qform off, sform on
    struct.pack_into("<3f", hdr, 268, *[float(o) for o in origin])
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, origin[0])
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, origin[1])
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], origin[2])
    hdr[MAGIC_OFFSET:MAGIC_OFFSET + 4] = MAGIC
    return bytes(hdr)


def _parse_header(raw: bytes, path) -> tuple[VolumeGrid, int, int, np.dtype]:
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    if raw[MAGIC_OFFSET:MAGIC_OFFSET + 4] != MAGIC:
        raise MagicMismatchError(
            f"{path}: bad magic at offset {MAGIC_OFFSET}, "
            f"expected {MAGIC!r} got {raw[MAGIC_OFFSET:MAGIC_OFFSET + 4]!r}"
        )
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != HEADER_SIZE:
        raise VolumeFormatError(f"{path}: header size field is {size}, expected {HEADER_SIZE}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] not in (3, 4):
        raise VolumeFormatError(f"{path}: {dim[0]}-dimensional data not supported")
    dims = tuple(int(d) for d in dim[1:4])
    n_channels = int(dim[4]) if dim[0] == 4 else 1
    if min(dims) < 1 or n_channels < 1:
        raise VolumeFormatError(f"{path}: non-positive dimensions {dim[:5]}")
    (dtype_code,) = struct.unpack_from("<h", raw, 70)
    if dtype_code not in DTYPE_CODES:
        raise UnsupportedDtypeError(f"{path}: data type code {dtype_code} not supported")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (sform_code,) = struct.unpack_from("<h", raw, 254)
    if sform_code > 0:
        rows = [struct.unpack_from("<4f", raw, off) for off in (280, 296, 312)]
        for a in range(3):
            for b in range(3):
                if a != b and rows[a][b] != 0.0:
                    raise VolumeFormatError(f"{path}: only axis-aligned geometry is supported")
        spacing = tuple(float(rows[a][a]) for a in range(3))
        origin = tuple(float(rows[a][3]) for a in range(3))
    else:
        spacing = tuple(float(s) for s in pixdim[1:4])
        origin = tuple(float(o) for o in struct.unpack_from("<3f", raw, 268))
    if any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"{path}: non-positive voxel spacing {spacing}")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    return VolumeGrid(dims, spacing, origin), n_channels, int(vox_offset), np.dtype(DTYPE_CODES[dtype_code])


def _read_payload(raw: bytes, offset: int, count: int, dtype: np.dtype, path) -> np.ndarray:
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedFileError(
            f"{path}: voxel data truncated, need {offset + nbytes} bytes, have {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=count, offset=offset)


def read_volume(path, kind: str | None = None):
    """Read a 3-D volume; integer dtypes yield a LabelVolume, float a ScalarVolume.

    kind forces the result type: "scalar" converts labels to floats, "label"
    requires integer-valued data.
    """
    path = Path(path)
    if path.suffix == ".json":
        return _read_json_volume(path, kind)
    raw = _read_bytes(path)
    grid, n_channels, offset, dtype = _parse_header(raw, path)
    if n_channels != 1:
        raise VolumeFormatError(f"{path}: expected a 3-D volume, found {n_channels} channels")
    values = _read_payload(raw, offset, grid.n_voxels, dtype, path)
    is_integer = np.issubdtype(dtype, np.integer)
    if kind == "label" or (kind is None and is_integer):
        if not is_integer and not np.array_equal(values, np.rint(values)):
            raise VolumeFormatError(f"{path}: non-integer values cannot form a label volume")
        return LabelVolume(grid, values.astype(np.int32))
    return ScalarVolume(grid, values.astype(np.float64))


def write_volume(vol, path):
    """Write a ScalarVolume (float32) or LabelVolume (uint8/int16) losslessly."""
    path = Path(path)
    if path.suffix == ".json":
        _write_json_volume(vol, path)
        return
    if isinstance(vol, LabelVolume):
        top = int(vol.labels.max(initial=0))
        if top > np.iinfo(np.int16).max:
            raise UnsupportedDtypeError(f"label value {top} exceeds the int16 range")
        dtype = np.uint8 if top <= np.iinfo(np.uint8).max else np.int16
        data = vol.labels.astype(dtype)
    elif isinstance(vol, ScalarVolume):
        dtype = np.float32
        data = vol.values.astype(dtype)
    else:
        raise TypeError(f"cannot write a {type(vol).__name__} as a volume")
    grid = vol.grid
    hdr = _pack_header(grid.dims, grid.spacing, grid.origin, CODE_FOR_DTYPE[np.dtype(dtype)], None)
    payload = hdr + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data.tobytes()
    _write_bytes(path, payload)


def read_prior(path) -> PriorMap:
    """Read a probability map stored as a 4-D float volume, channel-slowest."""
    path = Path(path)
    if path.suffix == ".json":
        vol = _read_json_volume(path, kind=None)
        if not isinstance(vol, PriorMap):
            raise VolumeFormatError(f"{path}: not a probability map")
        return vol
    raw = _read_bytes(path)
    grid, n_channels, offset, dtype = _parse_header(raw, path)
    if n_channels < 2:
        raise VolumeFormatError(f"{path}: probability maps need at least 2 channels")
    values = _read_payload(raw, offset, grid.n_voxels * n_channels, dtype, path)
    channels = values.astype(np.float64).reshape(n_channels, grid.n_voxels)
    names = ("background", "wall") if n_channels == 2 \
        else tuple(f"label_{k}" for k in range(n_channels))
    return PriorMap(grid, channels, names)


def write_prior(prior: PriorMap, path):
    path = Path(path)
    if path.suffix == ".json":
        _write_json_volume(prior, path)
        return
    grid = prior.grid
    hdr = _pack_header(grid.dims, grid.spacing, grid.origin, 16, prior.n_labels)
    data = prior.channels.astype(np.float32)
    payload = hdr + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data.tobytes()
    _write_bytes(path, payload)


# ---------------------------------------------------------------------------
# JSON+base64 fallback format


def _write_json_volume(vol, path):
    if isinstance(vol, PriorMap):
        doc = {
            "format": "volume-json",
            "kind": "prior",
            "dims": list(vol.grid.dims),
            "spacing": list(vol.grid.spacing),
            "origin": list(vol.grid.origin),
            "names": list(vol.names),
            "dtype": "float64",
            "data": base64.b64encode(
                np.ascontiguousarray(vol.channels, dtype="<f8").tobytes()
            ).decode("ascii"),
        }
    else:
        if isinstance(vol, LabelVolume):
            kind, dtype, arr, extra = "label", "<i4", vol.labels, {}
        else:
            kind, dtype, arr, extra = "scalar", "<f8", vol.values, {"background": vol.background}
        doc = {
            "format": "volume-json",
            "kind": kind,
            "dims": list(vol.grid.dims),
            "spacing": list(vol.grid.spacing),
            "origin": list(vol.grid.origin),
            "dtype": dtype,
            "data": base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii"),
            **extra,
        }
    write_json(doc, path)


def _read_json_volume(path, kind):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: invalid JSON volume: {exc}") from exc
    if doc.get("format") != "volume-json":
        raise MagicMismatchError(f"{path}: missing volume-json format marker")
    grid = VolumeGrid(tuple(doc["dims"]), tuple(doc["spacing"]), tuple(doc["origin"]))
    data = np.frombuffer(base64.b64decode(doc["data"]), dtype=np.dtype(doc["dtype"]))
    stored = doc["kind"]
    if stored == "prior":
        names = tuple(doc["names"])
        return PriorMap(grid, data.astype(np.float64).reshape(len(names), grid.n_voxels), names)
    if len(data) != grid.n_voxels:
        raise TruncatedFileError(f"{path}: payload has {len(data)} values, grid needs {grid.n_voxels}")
    if kind == "label" or (kind is None and stored == "label"):
        return LabelVolume(grid, data.astype(np.int32))
    return ScalarVolume(grid, data.astype(np.float64), float(doc.get("background", 0.0)))


# ---------------------------------------------------------------------------
# JSON artifacts


def write_json(obj: dict, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_trace(trace: list[dict], path):
    lines = [json.dumps(entry, sort_keys=True) for entry in trace]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trace(path) -> list[dict]:
    text = Path(path).read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_shell_text(shell, path):
    """Plain-text vertex list: one `x y z flag` line per shell element."""
    lines = [
        f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(f)}"
        for p, f in zip(shell.positions, shell.scar)
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
