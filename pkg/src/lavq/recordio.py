"""Binary ``.ecgt`` record files.

Layout (little-endian)::

    "ECGT" | u16 version=1 | u16 leads=12 | u32 samples | u32 sampling rate
    | u8 label | u32 report length + UTF-8 bytes
    | u32 segment count + (u16 lead, u32 start, u32 end) * count
    | float32 samples, lead-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import LABELS
from .data import N_LEADS, EcgRecord
from .errors import BadMagicError, FormatError, TruncatedFileError, VersionMismatchError

MAGIC = b"ECGT"
VERSION = 1
_HEAD = struct.Struct("<4sHHIIB")
_U32 = struct.Struct("<I")
_SEG = struct.Struct("<HII")


def encode_record(record: EcgRecord) -> bytes:
    n = record.leads.shape[1]
    report = record.report.encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, N_LEADS, n, record.sampling_rate,
                        LABELS.index(record.label)),
             _U32.pack(len(report)), report, _U32.pack(len(record.disease_segments))]
    parts += [_SEG.pack(*seg) for seg in record.disease_segments]
    parts.append(np.ascontiguousarray(record.leads, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_record(buf: bytes, patient_id: str = "") -> EcgRecord:
    """Inverse of :func:`encode_record`.

    The patient id is not part of the binary layout; callers pass it from
    the manifest (``read_record`` falls back to the file stem).
    """
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"record truncated at byte {pos} (need {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    magic, version, leads, n, fs, label = _HEAD.unpack(take(_HEAD.size))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported record version {version}")
    if leads != N_LEADS:
        raise FormatError(f"expected {N_LEADS} leads, file has {leads}")
    if label >= len(LABELS):
        raise FormatError(f"label code {label} out of range")
    (rlen,) = _U32.unpack(take(4))
    report = take(rlen).decode("utf-8")
    (nseg,) = _U32.unpack(take(4))
    segs = [_SEG.unpack(take(_SEG.size)) for _ in range(nseg)]
    data = np.frombuffer(take(4 * leads * n), dtype="<f4").reshape(leads, n)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after samples")
    return EcgRecord(patient_id, data.astype(np.float32), LABELS[label], report, fs, segs)


def write_record(record: EcgRecord, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_record(record))


def read_record(path: str | Path, patient_id: str | None = None) -> EcgRecord:
    path = Path(path)
    if patient_id is None:
        patient_id = path.stem.rsplit("_", 1)[0]
    return decode_record(path.read_bytes(), patient_id)
