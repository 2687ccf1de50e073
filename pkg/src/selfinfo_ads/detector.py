"""Anomaly detection against a self-information reference.

Two modes are provided. Streaming mode scores every transition
``(prev_bin, cur_bin)`` by a single LUT lookup and fires when the score
exceeds the threshold. Windowed mode builds a window-local matrix and fires
when any visited cell differs from the reference by more than the window
threshold. `OnlineReference` adds decayed count updates for accepted
transitions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .simatrix import SelfInfoMatrix, TransitionCounts, self_info_rows, train

DEFAULT_QUANTILE = 0.999
DEFAULT_MARGIN_BITS = 1.0
DEFAULT_WINDOW = 64

EVENT_FIELDS = ("index", "timestamp", "prev_bin", "cur_bin", "score_bits", "mode")


class CalibrationError(ValueError):
    pass


class PoisoningError(RuntimeError):
    """An update was attempted with a transition the detector flags."""


@dataclass(frozen=True)
class DetectorConfig:
    mode: str = "streaming"
    threshold_bits: Optional[float] = None  # None: calibrate from training data
    window_len: int = DEFAULT_WINDOW
    quantile: float = DEFAULT_QUANTILE
    decay: Optional[float] = None  # per-transition retention factor; None disables online update

    def __post_init__(self):
        if self.mode not in ("streaming", "windowed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.threshold_bits is not None and not self.threshold_bits > 0:
            raise ValueError("threshold_bits must be positive")
        if self.mode == "windowed" and self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if not 0.0 < self.quantile <= 1.0:
            raise ValueError("quantile must be in (0, 1]")
        if self.decay is not None:
            if not 0.0 < self.decay < 1.0:
                raise ValueError("decay must be in (0, 1)")
            if self.mode != "streaming":
                raise ValueError("online update is only supported in streaming mode")


@dataclass(frozen=True)
class AnomalyEvent:
    index: int
    timestamp: float
    prev_bin: int
    cur_bin: int
    score_bits: float
    mode: str

    def as_row(self) -> Tuple[str, ...]:
        return (str(self.index), f"{self.timestamp:.6f}", str(self.prev_bin), str(self.cur_bin),
                f"{self.score_bits:.6f}", self.mode)


def write_events(fh: TextIO, events: Iterable[AnomalyEvent]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(EVENT_FIELDS)
    for ev in events:
        w.writerow(ev.as_row())


def read_events(fh: TextIO) -> List[AnomalyEvent]:
    rows = csv.DictReader(fh)
    return [
        AnomalyEvent(int(r["index"]), float(r["timestamp"]), int(r["prev_bin"]), int(r["cur_bin"]),
                     float(r["score_bits"]), r["mode"])
        for r in rows
    ]


def _as_bins(bins, minimum: int = 2) -> np.ndarray:
    b = np.asarray(bins, dtype=np.intp)
    if b.ndim != 1 or b.size < minimum:
        raise ValueError(f"fewer than {minimum} samples")
    return b


def transition_scores(ref: SelfInfoMatrix, bins) -> np.ndarray:
    """Self-information of every consecutive transition; entry k scores bins[k] -> bins[k+1]."""
    b = _as_bins(bins)
    return ref.values[b[:-1], b[1:]]


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    """Lower (inverted-CDF) quantile: smallest v with weight fraction <= v at least q."""
    if not 0.0 < q <= 1.0:
        raise ValueError("quantile must be in (0, 1]")
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cum = np.cumsum(w)
    k = int(np.searchsorted(cum, q * cum[-1], side="left"))
    return float(v[min(k, len(v) - 1)])


def threshold_from_counts(ref: SelfInfoMatrix, counts: TransitionCounts, q: float = DEFAULT_QUANTILE,
                          margin: float = DEFAULT_MARGIN_BITS) -> float:
    """Threshold from transition counts: the q-quantile of training scores plus ``margin`` bits.

    Counts and a list of training transitions give the same quantile, so a
    persisted LUT can be re-calibrated without the original trace.
    """
    if counts.order != ref.order:
        raise ValueError("counts and reference differ in order")
    seen = counts.counts > 0
    if not seen.any():
        raise CalibrationError("no training transitions")
    theta = weighted_quantile(ref.values[seen], counts.counts[seen].astype(float), q) + margin
    if theta >= ref.e_max:
        raise CalibrationError(
            f"threshold {theta:.3f} bits would reach e_max {ref.e_max:.3f}; lower epsilon or the quantile"
        )
    return theta


def calibrate_threshold(ref: SelfInfoMatrix, training_bins, q: float = DEFAULT_QUANTILE,
                        margin: float = DEFAULT_MARGIN_BITS) -> float:
    return threshold_from_counts(ref, train(_as_bins(training_bins), ref.order), q, margin)


def detect_streaming(ref: SelfInfoMatrix, threshold: float, bins,
                     timestamps: Optional[Sequence[float]] = None) -> List[AnomalyEvent]:
    """Flag every transition whose reference self-information exceeds ``threshold``.

    The event index is that of the current (second) sample of the transition.
    """
    b = _as_bins(bins)
    scores = ref.values[b[:-1], b[1:]]
    hits = np.flatnonzero(scores > threshold)
    ts = timestamps if timestamps is not None else None
    return [
        AnomalyEvent(int(k) + 1, float(ts[k + 1]) if ts is not None else float(k + 1),
                     int(b[k]), int(b[k + 1]), float(scores[k]), "streaming")
        for k in hits
    ]


class StreamingDetector:
    """Per-message detector: one `push` per received sample.

    With ``online`` set, accepted transitions update the decayed reference
    counts and flagged ones never do.
    """

    def __init__(self, ref: SelfInfoMatrix, threshold: float, online: Optional["OnlineReference"] = None):
        self.threshold = float(threshold)
        self.online = online
        self._rows = ref.values.tolist() if online is None else None
        self._prev = None
        self._index = -1

    def reset(self) -> None:
        self._prev = None
        self._index = -1

    def push(self, cur: int, timestamp: Optional[float] = None) -> Optional[AnomalyEvent]:
        prev = self._prev
        self._prev = cur
        self._index += 1
        if prev is None:
            return None
        if self.online is None:
            score = self._rows[prev][cur]
        else:
            score = self.online.score(prev, cur)
        if score > self.threshold:
            ts = float(self._index) if timestamp is None else timestamp
            return AnomalyEvent(self._index, ts, prev, cur, score, "streaming")
        if self.online is not None:
            self.online.update(prev, cur)
        return None

    def run(self, bins, timestamps: Optional[Sequence[float]] = None) -> List[AnomalyEvent]:
        events = []
        push = self.push
        if timestamps is None:
            for b in np.asarray(bins).tolist():
                ev = push(b)
                if ev is not None:
                    events.append(ev)
        else:
            for b, t in zip(np.asarray(bins).tolist(), timestamps):
                ev = push(b, float(t))
                if ev is not None:
                    events.append(ev)
        return events


def window_starts(n: int, window_len: int) -> List[int]:
    """Start offsets of sliding windows with stride ``window_len // 2``; the last window is flush with the end."""
    stride = max(window_len // 2, 1)
    starts = list(range(0, n - window_len + 1, stride))
    if starts[-1] != n - window_len:
        starts.append(n - window_len)
    return starts


def window_score(ref: SelfInfoMatrix, window_bins: np.ndarray) -> Tuple[float, int, int]:
    """Max |E_window - E_ref| over cells the window visits; returns (score, prev_bin, cur_bin)."""
    order = ref.order
    codes, local = np.unique(window_bins[:-1] * order + window_bins[1:], return_counts=True)
    rows, cols = np.divmod(codes, order)
    row_ids, inverse = np.unique(rows, return_inverse=True)
    row_tot = np.bincount(inverse, weights=local)
    local_e = np.log2(row_tot[inverse]) - np.log2(local)
    diff = np.abs(local_e - ref.values[rows, cols])
    k = int(np.argmax(diff))
    return float(diff[k]), int(rows[k]), int(cols[k])


def window_scores(ref: SelfInfoMatrix, bins, window_len: int):
    b = _as_bins(bins)
    if window_len < 2:
        raise ValueError("window_len must be >= 2")
    if b.size < window_len:
        raise ValueError(f"fewer than {window_len} samples for one window")
    starts = window_starts(b.size, window_len)
    return starts, [window_score(ref, b[s:s + window_len]) for s in starts]


def calibrate_window_threshold(ref: SelfInfoMatrix, training_bins, window_len: int = DEFAULT_WINDOW,
                               q: float = DEFAULT_QUANTILE, margin: float = DEFAULT_MARGIN_BITS) -> float:
    _, scored = window_scores(ref, training_bins, window_len)
    s = np.array([x[0] for x in scored])
    theta = weighted_quantile(s, np.ones_like(s), q) + margin
    if theta >= ref.e_max:
        raise CalibrationError(f"window threshold {theta:.3f} bits would reach e_max {ref.e_max:.3f}")
    return theta


def detect_windowed(ref: SelfInfoMatrix, threshold: float, bins, window_len: int = DEFAULT_WINDOW,
                    timestamps: Optional[Sequence[float]] = None) -> List[AnomalyEvent]:
    """One event per window whose score exceeds ``threshold``, indexed at the window start."""
    starts, scored = window_scores(ref, bins, window_len)
    events = []
    for s, (score, j, i) in zip(starts, scored):
        if score > threshold:
            ts = float(timestamps[s]) if timestamps is not None else float(s)
            events.append(AnomalyEvent(s, ts, j, i, score, "windowed"))
    return events


class OnlineReference:
    """Decayed transition weights for reference adaptation during detection.

    Each row keeps raw weights and a scale factor; the effective weight of a
    cell is ``raw * scale``. Decaying a row is a single multiply of its scale,
    adding a transition adds ``1 / scale`` to the raw cell, so conditional
    probabilities (raw / raw row sum) never need the scale itself. Derived
    self-information is refreshed lazily, one row at a time. Cells whose
    probability falls below epsilon score e_max, as unseen cells do.
    """

    _RENORM_BELOW = 2.0 ** -400

    def __init__(self, counts: TransitionCounts, epsilon: float, threshold: float, decay: float):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must be in (0, 1)")
        self.epsilon = float(epsilon)
        self.e_max = -math.log2(epsilon)
        self.threshold = float(threshold)
        self.decay = float(decay)
        self._raw = counts.counts.astype(float)
        self._scale = np.ones(counts.order)
        self._values = self_info_rows(self._raw, epsilon)
        self._rows = self._values.tolist()
        self._dirty = set()

    @property
    def order(self) -> int:
        return self._raw.shape[0]

    def _refresh(self, j: int) -> None:
        row = np.minimum(self_info_rows(self._raw[j], self.epsilon), self.e_max)
        self._values[j] = row
        self._rows[j] = row.tolist()
        self._dirty.discard(j)

    def score(self, j: int, i: int) -> float:
        if j in self._dirty:
            self._refresh(j)
        return self._rows[j][i]

    def probabilities(self, j: int) -> np.ndarray:
        raw = self._raw[j]
        tot = raw.sum()
        return raw / tot if tot > 0 else np.zeros_like(raw)

    def weights(self, j: int) -> np.ndarray:
        return self._raw[j] * self._scale[j]

    def update(self, j: int, i: int) -> None:
        if self.score(j, i) > self.threshold:
            raise PoisoningError(f"transition {j}->{i} is flagged; refusing to learn it")
        s = self._scale[j] * self.decay
        if s < self._RENORM_BELOW:
            self._raw[j] *= s
            s = 1.0
        self._scale[j] = s
        self._raw[j, i] += 1.0 / s
        self._dirty.add(j)

    def matrix(self) -> SelfInfoMatrix:
        for j in list(self._dirty):
            self._refresh(j)
        values = self._values.copy()
        values.setflags(write=False)
        seen = values < self.e_max
        seen.setflags(write=False)
        return SelfInfoMatrix(values=values, epsilon=self.epsilon, seen=seen)


def update_reference(online: OnlineReference, transition: Tuple[int, int]) -> OnlineReference:
    """Fold one accepted transition into the decayed counts (raises `PoisoningError` if flagged)."""
    online.update(*transition)
    return online


def detect(ref: SelfInfoMatrix, config: DetectorConfig, bins, threshold: float,
           timestamps: Optional[Sequence[float]] = None,
           counts: Optional[TransitionCounts] = None) -> List[AnomalyEvent]:
    """Dispatch on ``config.mode``; online update needs the training ``counts``."""
    if config.mode == "windowed":
        return detect_windowed(ref, threshold, bins, config.window_len, timestamps)
    if config.decay is None:
        return detect_streaming(ref, threshold, bins, timestamps)
    if counts is None:
        raise ValueError("online update requires the reference counts")
    online = OnlineReference(counts, ref.epsilon, threshold, config.decay)
    return StreamingDetector(ref, threshold, online).run(bins, timestamps)
