"""MRCHK1 field-sequence files.

Layout: the 6-byte magic ``MRCHK1``, a little-endian uint32 header length,
a UTF-8 ``key=value`` header (one pair per line), then the values as
little-endian float32 in [T][C][H][W] order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .grid import CalendarTime, FieldSequence, GridSpec

MAGIC = b"MRCHK1"
FORMAT_VERSION = 1
HEADER_KEYS = (
    "version",
    "n_lat",
    "n_lon",
    "lat_start_deg",
    "lat_step_deg",
    "lon_step_deg",
    "n_channels",
    "n_static",
    "channel_names",
    "channel_units",
    "start_month",
    "start_day",
    "start_hour",
    "step_hours",
    "n_steps",
)


class FieldFormatError(ValueError):
    """Base class for malformed field files."""


class BadMagicError(FieldFormatError):
    pass


class TruncatedHeaderError(FieldFormatError):
    pass


class ShapeMismatchError(FieldFormatError):
    """Payload size disagrees with the shape declared in the header."""


def _encode_header(seq: FieldSequence) -> bytes:
    g = seq.grid
    for name in seq.channel_names + seq.channel_units:
        if "," in name or "\n" in name:
            raise FieldFormatError(f"channel label {name!r} contains a separator")
    items = {
        "version": FORMAT_VERSION,
        "n_lat": g.n_lat,
        "n_lon": g.n_lon,
        "lat_start_deg": repr(float(g.lat_start_deg)),
        "lat_step_deg": repr(float(g.lat_step_deg)),
        "lon_step_deg": repr(float(g.lon_step_deg)),
        "n_channels": seq.n_channels,
        "n_static": seq.n_static,
        "channel_names": ",".join(seq.channel_names),
        "channel_units": ",".join(seq.channel_units),
        "start_month": seq.start.month,
        "start_day": seq.start.day,
        "start_hour": seq.start.hour,
        "step_hours": seq.step_hours,
        "n_steps": seq.n_steps,
    }
    return "".join(f"{k}={items[k]}\n" for k in HEADER_KEYS).encode("utf-8")


def _decode_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FieldFormatError(f"malformed header line {line!r}")
        out[key] = value
    missing = [k for k in HEADER_KEYS if k not in out]
    if missing:
        raise FieldFormatError(f"header missing keys {missing}")
    if int(out["version"]) != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported version {out['version']}")
    return out


def field_bytes(seq: FieldSequence) -> bytes:
    header = _encode_header(seq)
    payload = np.ascontiguousarray(seq.values, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def write_fields(seq: FieldSequence, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(field_bytes(seq))


def parse_fields(buf: bytes) -> FieldSequence:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not an MRCHK1 file")
    off = len(MAGIC)
    if len(buf) < off + 4:
        raise TruncatedHeaderError("file ends inside the header length")
    (hlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + hlen:
        raise TruncatedHeaderError(f"header declares {hlen} bytes, file ends early")
    try:
        h = _decode_header(buf[off : off + hlen].decode("utf-8"))
        shape = (int(h["n_steps"]), int(h["n_channels"]), int(h["n_lat"]), int(h["n_lon"]))
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, FieldFormatError):
            raise
        raise FieldFormatError(f"unreadable header: {exc}") from exc
    off += hlen

    expected = 4 * int(np.prod(shape))
    got = len(buf) - off
    if got != expected:
        raise ShapeMismatchError(f"header shape {shape} needs {expected} payload bytes, found {got}")
    values = np.frombuffer(buf, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape)
    grid = GridSpec(
        int(h["n_lat"]),
        int(h["n_lon"]),
        float(h["lat_start_deg"]),
        float(h["lat_step_deg"]),
        float(h["lon_step_deg"]),
    )
    return FieldSequence(
        grid=grid,
        values=values.astype(np.float32),
        start=CalendarTime(int(h["start_month"]), int(h["start_day"]), int(h["start_hour"])),
        step_hours=int(h["step_hours"]),
        n_static=int(h["n_static"]),
        channel_names=tuple(h["channel_names"].split(",")) if h["channel_names"] else (),
        channel_units=tuple(h["channel_units"].split(",")) if h["channel_units"] else (),
    )


def read_fields(path: str | os.PathLike) -> FieldSequence:
    with open(path, "rb") as fh:
        return parse_fields(fh.read())
