"""Parsing of candump logs and signal CSVs into frames and physical samples."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

CANDUMP_RE = re.compile(
    r"^\((?P<ts>\d+\.\d+)\)\s+(?P<bus>\S+)\s+"
    r"(?P<id>[0-9A-Fa-f]{3}|[0-9A-Fa-f]{8})#(?P<data>[0-9A-Fa-f]{0,16})$"
)
CSV_HEADER_RE = re.compile(r"^\s*timestamp\s*,\s*value\s*$", re.IGNORECASE)

MAX_CAN_ID = 1 << 29


class ParseError(ValueError):
    """A line that matches neither supported trace format."""

    def __init__(self, line_no: int, line: str, reason: str = "unrecognised line"):
        self.line_no = line_no
        self.line = line
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}: {line!r}")


class TraceError(ValueError):
    """Raised when a trace contains malformed lines; carries every per-line error."""

    def __init__(self, errors: Sequence[ParseError]):
        self.errors = list(errors)
        head = "; ".join(str(e) for e in self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} malformed line(s): {head}{more}")


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class CanFrame:
    timestamp: float
    bus_label: str
    can_id: int
    payload: bytes

    def __post_init__(self):
        if len(self.payload) > 8:
            raise ValueError("CAN payload longer than 8 bytes")
        if not 0 <= self.can_id < MAX_CAN_ID:
            raise ValueError(f"CAN id {self.can_id:#x} out of range")

    @property
    def extended(self) -> bool:
        return self.can_id > 0x7FF

    def to_candump(self, id_width: Optional[int] = None) -> str:
        """Serialise back to a candump line (``(ts) bus ID#DATA``)."""
        width = id_width or (8 if self.extended else 3)
        return f"({self.timestamp:.6f}) {self.bus_label} {self.can_id:0{width}X}#{self.payload.hex().upper()}"


@dataclass(frozen=True)
class SignalSpec:
    """Where a physical signal lives inside a CAN payload.

    The field is an unsigned, big-endian run of ``bit_length`` bits starting at
    the most significant bit of ``payload[byte_offset]``.
    """

    can_id: int
    byte_offset: int = 0
    bit_length: int = 16
    scale: float = 1.0
    offset: float = 0.0
    unit: str = "km/h"
    min_physical: float = 0.0
    max_physical: float = 250.0

    def __post_init__(self):
        if not 0 <= self.byte_offset <= 7:
            raise ValueError("byte_offset must be in 0..7")
        if not 1 <= self.bit_length <= 64:
            raise ValueError("bit_length must be in 1..64")
        if self.byte_offset + self.n_bytes > 8:
            raise ValueError("signal does not fit in an 8-byte payload")
        if self.scale == 0:
            raise ValueError("scale must be non-zero")
        if not self.min_physical < self.max_physical:
            raise ValueError("min_physical must be below max_physical")

    @property
    def n_bytes(self) -> int:
        return -(-self.bit_length // 8)


@dataclass(frozen=True)
class Sample:
    timestamp: float
    value: float
    out_of_range: bool = False

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("sample value must be finite")


def _parse_candump_line(line: str, line_no: int) -> CanFrame:
    m = CANDUMP_RE.match(line)
    if m is None:
        raise ParseError(line_no, line)
    data = m.group("data")
    if len(data) % 2:
        raise ParseError(line_no, line, "odd payload hex length")
    return CanFrame(
        timestamp=float(m.group("ts")),
        bus_label=m.group("bus"),
        can_id=int(m.group("id"), 16),
        payload=bytes.fromhex(data),
    )


def _parse_csv_line(line: str, line_no: int) -> Sample:
    parts = line.split(",")
    if len(parts) != 2:
        raise ParseError(line_no, line)
    try:
        ts, value = float(parts[0]), float(parts[1])
    except ValueError:
        raise ParseError(line_no, line) from None
    if not (math.isfinite(ts) and math.isfinite(value)):
        raise ParseError(line_no, line, "non-finite field")
    return Sample(ts, value)


def sniff_format(line: str) -> Optional[str]:
    line = line.strip()
    if CANDUMP_RE.match(line):
        return "candump"
    if CSV_HEADER_RE.match(line):
        return "csv"
    try:
        _parse_csv_line(line, 1)
        return "csv"
    except ParseError:
        return None


def parse_trace_lines(
    lines: Iterable[str], fmt: Optional[str] = None
) -> Tuple[List[Union[CanFrame, Sample]], List[ParseError]]:
    """Parse lines leniently, returning ``(records, errors)``.

    Blank lines are skipped; a CSV header is accepted only on the first
    non-blank line. ``fmt`` is inferred from the first non-blank line when None.
    """
    if fmt not in (None, "candump", "csv"):
        raise ValueError(f"unknown trace format {fmt!r}")
    records: List[Union[CanFrame, Sample]] = []
    errors: List[ParseError] = []
    first = True
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if first:
            first = False
            if fmt is None:
                fmt = sniff_format(line)
                if fmt is None:
                    errors.append(ParseError(line_no, line))
                    continue
            if fmt == "csv" and CSV_HEADER_RE.match(line):
                continue
        try:
            if fmt == "candump":
                records.append(_parse_candump_line(line, line_no))
            else:
                records.append(_parse_csv_line(line, line_no))
        except ParseError as e:
            errors.append(e)
    return records, errors


def parse_trace(stream: Union[TextIO, Iterable[str]], fmt: Optional[str] = None):
    """Parse a candump or CSV trace; raise `TraceError` listing all bad lines."""
    records, errors = parse_trace_lines(stream, fmt)
    if errors:
        raise TraceError(errors)
    return records


def decode_signal(frame: CanFrame, spec: SignalSpec) -> Sample:
    if frame.can_id != spec.can_id:
        raise DecodeError(f"frame id {frame.can_id:#x} does not match signal id {spec.can_id:#x}")
    end = spec.byte_offset + spec.n_bytes
    if len(frame.payload) < end:
        raise DecodeError(
            f"payload too short: need {end} bytes for a {spec.bit_length}-bit field, got {len(frame.payload)}"
        )
    chunk = int.from_bytes(frame.payload[spec.byte_offset:end], "big")
    raw = chunk >> (spec.n_bytes * 8 - spec.bit_length)
    value = raw * spec.scale + spec.offset
    flagged = not spec.min_physical <= value <= spec.max_physical
    return Sample(frame.timestamp, value, out_of_range=flagged)


def encode_signal(value: float, spec: SignalSpec, payload_len: int = 8) -> bytes:
    """Inverse of `decode_signal` for values representable by ``spec``."""
    raw = round((value - spec.offset) / spec.scale)
    if not 0 <= raw < (1 << spec.bit_length):
        raise ValueError(f"{value} not representable in {spec.bit_length} bits")
    buf = bytearray(max(payload_len, spec.byte_offset + spec.n_bytes))
    chunk = raw << (spec.n_bytes * 8 - spec.bit_length)
    buf[spec.byte_offset:spec.byte_offset + spec.n_bytes] = chunk.to_bytes(spec.n_bytes, "big")
    return bytes(buf)


def frames_to_samples(frames: Iterable[CanFrame], spec: SignalSpec) -> List[Sample]:
    """Decode every frame carrying ``spec.can_id``; other ids are ignored."""
    return [decode_signal(f, spec) for f in frames if f.can_id == spec.can_id]


@dataclass(frozen=True)
class RateReport:
    n_samples: int
    duration_s: float
    mean_rate_hz: float
    median_interval_s: float
    gaps: List[Tuple[int, float]]  # (index of sample after the gap, gap length)


def resample_check(samples: Sequence[Sample], gap_factor: float = 3.0) -> RateReport:
    """Report the mean sampling rate and any gaps longer than ``gap_factor`` x median interval."""
    if len(samples) < 2:
        raise ValueError("fewer than 2 samples")
    ts = np.fromiter((s.timestamp for s in samples), dtype=float, count=len(samples))
    dt = np.diff(ts)
    duration = float(ts[-1] - ts[0])
    median = float(np.median(dt))
    gap_idx = np.flatnonzero(dt > gap_factor * median)
    # n samples spanning `duration` means n-1 intervals; a uniform 1 s grid of 260 reads as 260 Hz
    rate = (len(samples) - 1) / duration if duration > 0 else math.inf
    return RateReport(
        n_samples=len(samples),
        duration_s=duration,
        mean_rate_hz=rate,
        median_interval_s=median,
        gaps=[(int(i) + 1, float(dt[i])) for i in gap_idx],
    )


def samples_to_arrays(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    ts = np.fromiter((s.timestamp for s in samples), dtype=float, count=len(samples))
    vs = np.fromiter((s.value for s in samples), dtype=float, count=len(samples))
    return ts, vs


def write_samples_csv(fh: TextIO, timestamps: Sequence[float], values: Sequence[float]) -> None:
    fh.write("timestamp,value\n")
    for t, v in zip(timestamps, values):
        fh.write(f"{t:.6f},{v:.6f}\n")
