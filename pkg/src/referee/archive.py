"""Binary tensor containers: descriptor archives and checkpoint files.

Layout of a container body (all little-endian)::

    u32 entry_count
    entry*: u16 name_len, name (UTF-8), u8 dtype, u8 ndim, ndim x u32 dims,
            row-major payload

Descriptor archives are ``b"RFDA" u32 version body`` and only use dtypes
0 (float32) and 1 (int32). Checkpoints add a JSON metadata block and may
also store float64 (2) and int64 (3) tensors.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from referee.core import StyleDescriptors

ARCHIVE_MAGIC = b"RFDA"
ARCHIVE_VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<i4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """File does not follow the expected binary layout."""


class VersionError(FormatError):
    def __init__(self, kind: str, expected: int, found: int):
        super().__init__(f"{kind}: expected version {expected}, found {found}")
        self.expected = expected
        self.found = found


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of file")
    return buf


def write_entries(fh: BinaryIO, entries: Mapping[str, np.ndarray], allowed=(0, 1, 2, 3)) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None or code not in allowed:
            raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_entries(fh: BinaryIO, allowed=(0, 1, 2, 3)) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
        if code not in _DTYPES or code not in allowed:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        dtype = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = _read_exact(fh, n * dtype.itemsize)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out


def descriptors_to_entries(desc: StyleDescriptors) -> dict[str, np.ndarray]:
    entries = {
        "ppg": desc.ppg.astype(np.float32),
        "pitch": desc.pitch.astype(np.float32),
        "energy": desc.energy.astype(np.float32),
        "duration": desc.durations.astype(np.int32),
        "voicing": desc.voicing.astype(np.int32),
        "style_id": np.array([desc.style_id], dtype=np.int32),
        "pitch_stats": np.array(desc.pitch_stats, dtype=np.float32),
        "energy_stats": np.array(desc.energy_stats, dtype=np.float32),
    }
    if desc.phones is not None:
        entries["phones"] = desc.phones.astype(np.int32)
    return entries


REQUIRED_ENTRIES = ("ppg", "pitch", "energy", "duration", "voicing", "style_id")


def encode_descriptors(desc: StyleDescriptors) -> bytes:
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<I", ARCHIVE_VERSION))
    write_entries(buf, descriptors_to_entries(desc), allowed=(0, 1))
    return buf.getvalue()


def decode_descriptors(data: bytes) -> StyleDescriptors:
    fh = io.BytesIO(data)
    if _read_exact(fh, 4) != ARCHIVE_MAGIC:
        raise FormatError("not a descriptor archive (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != ARCHIVE_VERSION:
        raise VersionError("descriptor archive", ARCHIVE_VERSION, version)
    e = read_entries(fh, allowed=(0, 1))
    missing = [k for k in REQUIRED_ENTRIES if k not in e]
    if missing:
        raise FormatError(f"descriptor archive missing entries {missing}")
    pstats = e.get("pitch_stats", np.array([0.0, 1.0], dtype=np.float32))
    estats = e.get("energy_stats", np.array([0.0, 1.0], dtype=np.float32))
    return StyleDescriptors(
        ppg=e["ppg"],
        pitch=e["pitch"],
        energy=e["energy"],
        durations=e["duration"],
        voicing=e["voicing"].astype(bool),
        style_id=int(e["style_id"].reshape(-1)[0]),
        phones=e.get("phones"),
        pitch_stats=(float(pstats[0]), float(pstats[1])),
        energy_stats=(float(estats[0]), float(estats[1])),
    )


def save_descriptors(path, desc: StyleDescriptors) -> None:
    Path(path).write_bytes(encode_descriptors(desc))


def load_descriptors(path) -> StyleDescriptors:
    return decode_descriptors(Path(path).read_bytes())


def encode_container(magic: bytes, version: int, meta: dict, tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", version))
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    write_entries(buf, tensors)
    return buf.getvalue()


def decode_container(data: bytes, magic: bytes, version: int, header_only: bool = False):
    fh = io.BytesIO(data)
    found = fh.read(len(magic))
    if found != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {found!r}")
    (ver,) = struct.unpack("<I", _read_exact(fh, 4))
    if ver != version:
        raise VersionError(magic.decode("ascii"), version, ver)
    (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
    meta = json.loads(_read_exact(fh, mlen).decode("utf-8"))
    if header_only:
        return meta, {}
    return meta, read_entries(fh)
