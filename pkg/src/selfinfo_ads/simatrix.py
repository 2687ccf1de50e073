"""Transition counting and the conditional self-information reference matrix.

Training turns a quantized series into integer transition counts
``counts[prev, cur]``; the reference lookup table holds
``log2(1 / P(cur | prev))`` in bits, with a fixed smoothing probability for
transitions never observed. Counts are the persisted ground truth, the
self-information values are always re-derived from them.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

DEFAULT_EPSILON = 2.0 ** -20

LUT_MAGIC = b"SILUT1"
_HEADER = struct.Struct("<6sIdddd")


class LutError(ValueError):
    """Base class for reference-file failures."""


class LutVersionError(LutError):
    pass


class LutChecksumError(LutError):
    pass


class LutTruncatedError(LutError):
    pass


@dataclass(frozen=True)
class Quantizer:
    min_value: float = 0.0
    max_value: float = 250.0
    bin_width: float = 1.0

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if not self.max_value > self.min_value:
            raise ValueError("max_value must exceed min_value")

    @property
    def order(self) -> int:
        return int(math.floor((self.max_value - self.min_value) / self.bin_width)) + 1

    def __call__(self, value: float) -> Tuple[int, bool]:
        return quantize(value, self)

    def bins(self, values) -> np.ndarray:
        """Vectorised `quantize` without the range flags."""
        return quantize_array(values, self)[0]


def quantize(value: float, q: Quantizer) -> Tuple[int, bool]:
    """Map a physical value to ``(bin, out_of_range)`` by floor and clamp."""
    raw = math.floor((value - q.min_value) / q.bin_width)
    top = q.order - 1
    if raw < 0:
        return 0, True
    if raw > top:
        return top, True
    return raw, not q.min_value <= value <= q.max_value


def quantize_array(values, q: Quantizer) -> Tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values, dtype=float)
    raw = np.floor((v - q.min_value) / q.bin_width)
    out = (v < q.min_value) | (v > q.max_value)
    bins = np.clip(raw, 0, q.order - 1).astype(np.intp)
    return bins, out


@dataclass
class TransitionCounts:
    """Integer matrix where ``counts[j, i]`` counts bin ``j`` followed by bin ``i``."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("counts must be a square matrix")
        if c.dtype.kind not in "iu":
            raise TypeError("counts must be integers")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        self.counts = c.astype(np.int64, copy=False)

    @classmethod
    def zeros(cls, order: int) -> "TransitionCounts":
        return cls(np.zeros((order, order), dtype=np.int64))

    @property
    def order(self) -> int:
        return self.counts.shape[0]

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def seen_cells(self) -> int:
        return int(np.count_nonzero(self.counts))

    def __eq__(self, other):
        if not isinstance(other, TransitionCounts):
            return NotImplemented
        return self.counts.shape == other.counts.shape and bool((self.counts == other.counts).all())

    def add_sequence(self, bins: Sequence[int]) -> None:
        """Accumulate every consecutive pair of ``bins`` in place."""
        b = np.asarray(bins, dtype=np.intp)
        if b.size < 2:
            return
        if b.min() < 0 or b.max() >= self.order:
            raise ValueError("bin index outside matrix order")
        flat = b[:-1] * self.order + b[1:]
        self.counts += np.bincount(flat, minlength=self.order ** 2).reshape(self.order, self.order)


def train(bins: Sequence[int], order: int) -> TransitionCounts:
    if len(bins) < 2:
        raise ValueError("fewer than 2 samples")
    tc = TransitionCounts.zeros(order)
    tc.add_sequence(bins)
    return tc


def merge_counts(a: TransitionCounts, b: TransitionCounts) -> TransitionCounts:
    if a.order != b.order:
        raise ValueError(f"order mismatch: {a.order} vs {b.order}")
    return TransitionCounts(a.counts + b.counts)


@dataclass(frozen=True)
class SelfInfoMatrix:
    """Reference LUT of conditional self-information in bits (read-only)."""

    values: np.ndarray
    epsilon: float
    seen: np.ndarray = field(repr=False)

    @property
    def order(self) -> int:
        return self.values.shape[0]

    @property
    def e_max(self) -> float:
        return -math.log2(self.epsilon)

    @property
    def max_seen(self) -> float:
        return float(self.values[self.seen].max()) if self.seen.any() else 0.0

    def score(self, prev: int, cur: int) -> float:
        return float(self.values[prev, cur])


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")


def self_info_rows(counts: np.ndarray, epsilon: float) -> np.ndarray:
    """Self-information for a block of count rows (integer or fractional weights)."""
    counts = np.asarray(counts, dtype=float)
    totals = counts.sum(axis=-1, keepdims=True)
    e_max = -math.log2(epsilon)
    out = np.full(counts.shape, e_max)
    seen = counts > 0
    # log2(total) - log2(count) == log2(1 / P) without forming the ratio
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.log2(np.broadcast_to(totals, counts.shape)) - np.log2(counts)
    out[seen] = vals[seen]
    return out


def derive_self_info(c: TransitionCounts, epsilon: float = DEFAULT_EPSILON) -> SelfInfoMatrix:
    _check_epsilon(epsilon)
    values = self_info_rows(c.counts, epsilon)
    values.setflags(write=False)
    seen = c.counts > 0
    seen.setflags(write=False)
    return SelfInfoMatrix(values=values, epsilon=float(epsilon), seen=seen)


@dataclass(frozen=True)
class Reference:
    """Everything the LUT file persists: counts, quantizer and smoothing."""

    counts: TransitionCounts
    quantizer: Quantizer
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        _check_epsilon(self.epsilon)
        if self.counts.order != self.quantizer.order:
            raise ValueError(
                f"counts order {self.counts.order} does not match quantizer order {self.quantizer.order}"
            )

    def matrix(self) -> SelfInfoMatrix:
        return derive_self_info(self.counts, self.epsilon)


def train_reference(values: Iterable[float], quantizer: Quantizer,
                    epsilon: float = DEFAULT_EPSILON) -> Reference:
    bins = quantizer.bins(np.fromiter(values, dtype=float))
    return Reference(train(bins, quantizer.order), quantizer, epsilon)


def dump_lut(ref: Reference) -> bytes:
    q = ref.quantizer
    body = _HEADER.pack(LUT_MAGIC, ref.counts.order, q.min_value, q.max_value, q.bin_width, ref.epsilon)
    body += ref.counts.counts.astype("<u8").tobytes(order="C")
    return body + struct.pack("<I", zlib.crc32(body))


def parse_lut(blob: bytes) -> Reference:
    if len(blob) < len(LUT_MAGIC):
        raise LutTruncatedError("file shorter than magic")
    if blob[:len(LUT_MAGIC)] != LUT_MAGIC:
        if blob[:5] == LUT_MAGIC[:5]:
            raise LutVersionError(f"unsupported LUT version {blob[5:6]!r}")
        raise LutVersionError("not a LUT file (bad magic)")
    if len(blob) < _HEADER.size + 4:
        raise LutTruncatedError("file shorter than header")
    _, order, lo, hi, width, eps = _HEADER.unpack_from(blob)
    expected = _HEADER.size + 8 * order * order + 4
    if len(blob) < expected:
        raise LutTruncatedError(f"expected {expected} bytes, got {len(blob)}")
    if len(blob) > expected:
        raise LutError(f"trailing data: expected {expected} bytes, got {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[:expected - 4]) != crc:
        raise LutChecksumError("CRC32 mismatch")
    raw = np.frombuffer(blob, dtype="<u8", count=order * order, offset=_HEADER.size)
    if (raw > np.iinfo(np.int64).max).any():
        raise LutError("count overflows int64")
    counts = TransitionCounts(raw.astype(np.int64).reshape(order, order))
    return Reference(counts, Quantizer(lo, hi, width), eps)


def save_lut(path: Union[str, Path], ref: Reference) -> None:
    Path(path).write_bytes(dump_lut(ref))


def load_lut(path: Union[str, Path]) -> Reference:
    return parse_lut(Path(path).read_bytes())
