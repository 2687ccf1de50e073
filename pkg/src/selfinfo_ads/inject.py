"""Labelled attack synthesis: one-time (bad injection) and replay attacks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np

ONE_TIME = "one_time"
REPLAY = "replay"
SWEEP_DEVIATIONS = (10.0, 20.0, 40.0)
DEFAULT_VALID_RANGE = (0.0, 250.0)


class InjectionError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """One attack.

    one_time: ``target_index`` and ``deviation_pct`` (or ``uniform=True`` to draw
    the value uniformly over the valid range from ``rng_seed``).
    replay: copy ``samples[src_start:src_start+src_len]`` over ``dst_index``.
    """

    kind: str
    target_index: int = 0
    deviation_pct: float = 0.0
    uniform: bool = False
    src_start: int = 0
    src_len: int = 0
    dst_index: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in (ONE_TIME, REPLAY):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == REPLAY and self.src_len < 1:
            raise ValueError("replay needs src_len >= 1")

    @classmethod
    def one_time(cls, target_index: int, deviation_pct: float, rng_seed: int = 0, uniform: bool = False):
        return cls(ONE_TIME, target_index=target_index, deviation_pct=deviation_pct,
                   uniform=uniform, rng_seed=rng_seed)

    @classmethod
    def replay(cls, src_start: int, src_len: int, dst_index: int, rng_seed: int = 0):
        return cls(REPLAY, src_start=src_start, src_len=src_len, dst_index=dst_index, rng_seed=rng_seed)

    @property
    def affected(self) -> Tuple[int, int]:
        """Half-open index range the attack overwrites."""
        if self.kind == ONE_TIME:
            return self.target_index, self.target_index + 1
        return self.dst_index, self.dst_index + self.src_len

    def to_row(self) -> Tuple:
        if self.kind == ONE_TIME:
            return (ONE_TIME, self.target_index, _fmt(self.deviation_pct), int(self.uniform), self.rng_seed)
        return (REPLAY, self.src_start, self.src_len, self.dst_index, self.rng_seed)

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "AttackSpec":
        if len(row) != 5:
            raise ValueError(f"campaign row needs 5 fields, got {len(row)}")
        kind, p1, p2, p3, seed = (f.strip() for f in row)
        if kind == ONE_TIME:
            return cls.one_time(int(p1), float(p2), int(seed), uniform=bool(int(p3 or 0)))
        if kind == REPLAY:
            return cls.replay(int(p1), int(p2), int(p3), int(seed))
        raise ValueError(f"unknown attack kind {kind!r}")


def _fmt(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x))


@dataclass(frozen=True)
class GroundTruth:
    """Sorted, non-overlapping ``(kind, start, end)`` ranges, end exclusive."""

    ranges: Tuple[Tuple[str, int, int], ...] = ()

    def __post_init__(self):
        rs = tuple(sorted(self.ranges, key=lambda r: (r[1], r[2])))
        for (_, _, e0), (_, s1, _) in zip(rs, rs[1:]):
            if s1 < e0:
                raise InjectionError("ground-truth ranges overlap")
        object.__setattr__(self, "ranges", rs)

    def __len__(self):
        return len(self.ranges)

    def __add__(self, other: "GroundTruth") -> "GroundTruth":
        return GroundTruth(self.ranges + other.ranges)

    def indices(self) -> set:
        return {k for _, s, e in self.ranges for k in range(s, e)}

    def affected_count(self) -> int:
        return sum(e - s for _, s, e in self.ranges)


def inject_one_time(samples, spec: AttackSpec, valid_range: Tuple[float, float] = DEFAULT_VALID_RANGE,
                    strict: bool = False) -> Tuple[np.ndarray, GroundTruth]:
    """Overwrite exactly one sample, scaling it by ``1 + deviation_pct / 100``.

    The result is clamped to ``valid_range`` so the forged value stays
    plausible; with ``strict`` a value that would need clamping is an error.
    """
    if spec.kind != ONE_TIME:
        raise InjectionError("expected a one_time attack")
    out = np.array(samples, dtype=float, copy=True)
    k = spec.target_index
    if not 0 <= k < out.size:
        raise InjectionError(f"target index {k} outside trace of {out.size} samples")
    lo, hi = valid_range
    if spec.uniform:
        value = float(np.random.default_rng(spec.rng_seed).uniform(lo, hi))
    else:
        value = out[k] * (1.0 + spec.deviation_pct / 100.0)
    if not lo <= value <= hi:
        if strict:
            raise InjectionError(f"forged value {value:g} outside valid range [{lo:g}, {hi:g}]")
        value = min(max(value, lo), hi)
    out[k] = value
    return out, GroundTruth(((ONE_TIME, k, k + 1),))


def inject_replay(samples, spec: AttackSpec) -> Tuple[np.ndarray, GroundTruth]:
    """Copy a source segment over the destination; destination timestamps are untouched."""
    if spec.kind != REPLAY:
        raise InjectionError("expected a replay attack")
    out = np.array(samples, dtype=float, copy=True)
    n, s, d, L = out.size, spec.src_start, spec.dst_index, spec.src_len
    if s < 0 or d < 0 or s + L > n or d + L > n:
        raise InjectionError(f"replay ranges outside trace of {n} samples")
    if s < d + L and d < s + L:
        raise InjectionError("replay source and destination overlap")
    out[d:d + L] = out[s:s + L]
    return out, GroundTruth(((REPLAY, d, d + L),))


def apply_campaign(samples, campaign: Sequence[AttackSpec],
                   valid_range: Tuple[float, float] = DEFAULT_VALID_RANGE,
                   strict: bool = False) -> Tuple[np.ndarray, GroundTruth]:
    """Apply attacks in order. Replay sources always read the clean input."""
    clean = np.asarray(samples, dtype=float)
    out = clean.copy()
    truth = GroundTruth()
    for spec in campaign:
        if spec.kind == ONE_TIME:
            out, gt = inject_one_time(out, spec, valid_range, strict)
        else:
            mutated, gt = inject_replay(clean, spec)
            s, e = spec.affected
            out[s:e] = mutated[s:e]
        truth = truth + gt
    return out, truth


def _one_time_effect(values, k, deviation_pct, valid_range):
    lo, hi = valid_range
    v = values[k]
    return abs(min(max(v * (1.0 + deviation_pct / 100.0), lo), hi) - v)


SOURCE_TRIES = 5_000


def _replay_effect(values, src, L, dst):
    n = len(values)
    entry = abs(values[src] - values[dst - 1]) if dst > 0 else 0.0
    exit_ = abs(values[src + L - 1] - values[dst + L]) if dst + L < n else 0.0
    return max(entry, exit_)


def plan_campaign(trace_len: int, n_one_time: int, n_replay: int, seed: int, *,
                  deviation_pct: float = 20.0, separation: int = 128,
                  replay_len: Tuple[int, int] = (260, 2600),
                  values=None, min_effect: float = 0.0,
                  valid_range: Tuple[float, float] = DEFAULT_VALID_RANGE,
                  max_tries: int = 100_000, restarts: int = 50) -> List[AttackSpec]:
    """Draw a deterministic campaign of non-overlapping attacks.

    Affected ranges are kept at least ``separation`` samples from each other
    and from the trace ends. When ``values`` (the clean trace) is given, a
    candidate is kept only if it moves the signal by at least ``min_effect``:
    a one-time attack must change its sample that much, a replay must open a
    jump of that size at its entry or exit. Replay sources never overlap any
    destination range.
    """
    if n_one_time < 0 or n_replay < 0:
        raise InjectionError("attack counts must be non-negative")
    lo_len, hi_len = replay_len
    if not 1 <= lo_len <= hi_len:
        raise InjectionError("invalid replay length range")
    rng = np.random.default_rng(seed)
    kinds = [ONE_TIME] * n_one_time + [REPLAY] * n_replay
    rng.shuffle(kinds)
    lengths = [1 if k == ONE_TIME else int(rng.integers(lo_len, hi_len + 1)) for k in kinds]
    need = sum(lengths) + (len(kinds) + 1) * separation + sum(lengths[i] for i, k in enumerate(kinds) if k == REPLAY)
    if need > trace_len:
        raise InjectionError(
            f"trace of {trace_len} samples too short for {n_one_time} one-time + {n_replay} replay attacks"
        )
    if values is not None and len(values) != trace_len:
        raise InjectionError("values length does not match trace_len")

    # A replay destination can turn out to have no source that makes a jump
    # there; the whole layout is then redrawn from the same generator.
    for _ in range(restarts):
        out = _place(rng, kinds, lengths, trace_len, separation, values, min_effect, deviation_pct,
                     valid_range, max_tries)
        if out is not None:
            return out
    raise InjectionError("could not find a replay source")


def _place(rng, kinds, lengths, trace_len, separation, values, min_effect, deviation_pct, valid_range,
           max_tries) -> Optional[List[AttackSpec]]:
    taken: List[Tuple[int, int]] = []  # affected ranges placed so far

    def clear(s, e):
        return all(e + separation <= s0 or e0 + separation <= s for s0, e0 in taken)

    dst_specs = []
    for kind, L in zip(kinds, lengths):
        for _ in range(max_tries):
            d = int(rng.integers(separation, trace_len - separation - L + 1))
            if not clear(d, d + L):
                continue
            if kind == ONE_TIME and values is not None and \
                    _one_time_effect(values, d, deviation_pct, valid_range) < min_effect:
                continue
            taken.append((d, d + L))
            dst_specs.append((kind, d, L, int(rng.integers(0, 2 ** 31))))
            break
        else:
            raise InjectionError("could not place attack; campaign too dense for trace")

    out = []
    for kind, d, L, sub_seed in dst_specs:
        if kind == ONE_TIME:
            out.append(AttackSpec.one_time(d, deviation_pct, rng_seed=sub_seed))
            continue
        for _ in range(min(max_tries, SOURCE_TRIES)):
            s = int(rng.integers(0, trace_len - L + 1))
            if any(s < e0 and s0 < s + L for s0, e0 in taken):
                continue
            if values is not None and _replay_effect(values, s, L, d) < min_effect:
                continue
            out.append(AttackSpec.replay(s, L, d, rng_seed=sub_seed))
            break
        else:
            return None
    return out


def write_campaign(fh: TextIO, campaign: Sequence[AttackSpec]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("kind", "param1", "param2", "param3", "seed"))
    for spec in campaign:
        w.writerow(spec.to_row())


def read_campaign(fh: TextIO) -> List[AttackSpec]:
    rows = [r for r in csv.reader(fh) if r and any(f.strip() for f in r)]
    if rows and rows[0][0].strip() == "kind":
        rows = rows[1:]
    return [AttackSpec.from_row(r) for r in rows]


def write_truth(fh: TextIO, truth: GroundTruth) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("kind", "start", "end"))
    for kind, s, e in truth.ranges:
        w.writerow((kind, s, e))


def read_truth(fh: TextIO) -> GroundTruth:
    rows = list(csv.DictReader(fh))
    return GroundTruth(tuple((r["kind"], int(r["start"]), int(r["end"])) for r in rows))


def attack_mask(n: int, truth: GroundTruth) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    for _, s, e in truth.ranges:
        m[s:e] = True
    return m
