"""Scoring, the deviation sweep, end-to-end scenario runs and benchmarking."""

from __future__ import annotations

import bisect
import csv
import gc
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detector as det
from .detector import AnomalyEvent, DetectorConfig
from .inject import (GroundTruth, SWEEP_DEVIATIONS, AttackSpec, apply_campaign,
                     attack_mask, plan_campaign, write_campaign, write_truth)
from .simatrix import DEFAULT_EPSILON, Quantizer, SelfInfoMatrix, TransitionCounts, derive_self_info, train
from .synth import SCENARIO_SAMPLES, contaminate, gen_drive_trace

REPORT_HEADER = """\
# detection_rate = TP / (TP + FN), one TP per attack matched by >= 1 event within +-tolerance samples
# false_anomaly_count = distinct event indices matching no attack
# fpr_samplewise = false_anomaly_count / (trace_len - attacked samples)
# fpr_events = false_anomaly_count / (false_anomaly_count + matched event indices)
"""

# standard campaigns: (one-time, replay) per scenario
SCENARIO_CAMPAIGNS = {"highway": (6, 0), "urban": (3, 9)}


class AmbiguousMatchError(ValueError):
    pass


@dataclass(frozen=True)
class MatchPolicy:
    """``tolerance`` widens each attack range on both sides. A windowed event
    covers ``window_len`` samples from its start index; a streaming event covers one."""

    tolerance: int = 2
    window_len: int = 1

    def __post_init__(self):
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")

    def span(self, event: AnomalyEvent) -> int:
        return self.window_len if event.mode == "windowed" else 1


@dataclass
class EvalReport:
    n_attacks: int
    true_positives: int
    false_negatives: int
    false_positives: int
    matched_events: int
    detection_rate: float
    fpr_samplewise: float
    fpr_events: float
    trace_len: int
    train_time_s: float = float("nan")
    test_time_s: float = float("nan")
    missed: Tuple[Tuple[str, int, int], ...] = ()

    @property
    def false_anomaly_count(self) -> int:
        return self.false_positives

    def row(self) -> Dict[str, object]:
        d = asdict(self)
        d.pop("missed")
        d["false_anomaly_count"] = self.false_anomaly_count
        return d


def score(events: Sequence[AnomalyEvent], truth: GroundTruth, trace_len: int,
          policy: MatchPolicy = MatchPolicy()) -> EvalReport:
    """Match events to ground-truth attacks.

    An event covering ``[k, k + span)`` detects an attack covering ``[s, e)``
    when the two overlap after widening the attack by ``tolerance`` on each
    side. Events sharing an index count once.
    """
    idx = [e.index for e in events]
    if any(b < a for a, b in zip(idx, idx[1:])):
        raise ValueError("events must be sorted by index")
    tol = policy.tolerance
    ranges = truth.ranges
    reach = 2 * tol + policy.window_len - 1
    for (_, _, e0), (_, s1, _) in zip(ranges, ranges[1:]):
        if s1 - (e0 - 1) <= reach:
            raise AmbiguousMatchError("tolerance window spans two attacks; matching would be ambiguous")

    lo = [s - tol for _, s, _ in ranges]
    hi = [e - 1 + tol for _, _, e in ranges]
    hit_attacks = set()
    fp = matched = 0
    for k, span in sorted({(e.index, policy.span(e)) for e in events}):
        # attacks are sorted and separated, so only the last one starting before the event's end can match
        a = bisect.bisect_right(lo, k + span - 1) - 1
        if a >= 0 and k <= hi[a]:
            hit_attacks.add(a)
            matched += 1
        else:
            fp += 1

    n_attacks = len(ranges)
    tp = len(hit_attacks)
    clean = trace_len - truth.affected_count()
    return EvalReport(
        n_attacks=n_attacks,
        true_positives=tp,
        false_negatives=n_attacks - tp,
        false_positives=fp,
        matched_events=matched,
        detection_rate=tp / n_attacks if n_attacks else 1.0,
        fpr_samplewise=fp / clean if clean > 0 else 0.0,
        fpr_events=fp / (fp + matched) if fp + matched else 0.0,
        trace_len=trace_len,
        missed=tuple(r for k, r in enumerate(ranges) if k not in hit_attacks),
    )


def write_reports(fh, labels: Sequence[str], reports: Sequence[EvalReport], timings: bool = False) -> None:
    """CSV with a commented header documenting the metric formulas."""
    fh.write(REPORT_HEADER)
    cols = ["label", "n_attacks", "true_positives", "false_negatives", "false_anomaly_count",
            "matched_events", "detection_rate", "fpr_samplewise", "fpr_events", "trace_len"]
    if timings:
        cols += ["train_time_s", "test_time_s"]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(cols)
    for label, r in zip(labels, reports):
        d = r.row()
        d["label"] = label
        w.writerow([f"{d[c]:.6f}" if isinstance(d[c], float) else d[c] for c in cols])


def format_report(label: str, r: EvalReport) -> str:
    lines = [
        f"[{label}]",
        f"  attacks            {r.n_attacks}",
        f"  detected (TP)      {r.true_positives}",
        f"  missed (FN)        {r.false_negatives}",
        f"  false anomalies    {r.false_anomaly_count}",
        f"  detection rate     {r.detection_rate:.4f}",
        f"  FPR (samples)      {r.fpr_samplewise:.6f}",
        f"  FPR (events)       {r.fpr_events:.4f}",
    ]
    return "\n".join(lines)


# -- end-to-end scenario ---------------------------------------------------

@dataclass
class ScenarioConfig:
    scenario: str = "urban"
    seed: int = 7
    n_samples: Optional[int] = None  # None: the scenario's standard length
    n_one_time: Optional[int] = None
    n_replay: Optional[int] = None
    deviation_pct: float = 20.0
    quantizer: Quantizer = field(default_factory=Quantizer)
    epsilon: float = DEFAULT_EPSILON
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(quantile=1.0))
    tolerance: int = 2
    valid_range: Tuple[float, float] = (0.0, 160.0)
    min_effect: Optional[float] = None  # None: two bin widths

    def resolved(self) -> "ScenarioConfig":
        n1, nr = SCENARIO_CAMPAIGNS[self.scenario]
        return ScenarioConfig(**{
            **self.__dict__,
            "n_samples": self.n_samples or SCENARIO_SAMPLES[self.scenario],
            "n_one_time": n1 if self.n_one_time is None else self.n_one_time,
            "n_replay": nr if self.n_replay is None else self.n_replay,
            "min_effect": 2 * self.quantizer.bin_width if self.min_effect is None else self.min_effect,
        })


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    timestamps: np.ndarray
    clean: np.ndarray
    attacked: np.ndarray
    campaign: List[AttackSpec]
    truth: GroundTruth
    counts: TransitionCounts
    threshold: float
    events: List[AnomalyEvent]
    report: EvalReport


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Generate a drive, train on the clean trace, attack it, detect and score.

    Attacks are drawn to be effective: each must move the signal by at
    least ``min_effect`` (two bins by default), since an attack that
    leaves the quantized trace unchanged is indistinguishable from normal
    data by construction.
    """
    cfg = cfg.resolved()
    q = cfg.quantizer
    t, clean = gen_drive_trace(cfg.scenario, cfg.n_samples, cfg.seed)

    t0 = time.perf_counter()
    counts = train(q.bins(clean), q.order)
    ref = derive_self_info(counts, cfg.epsilon)
    if cfg.detector.threshold_bits is not None:
        theta = cfg.detector.threshold_bits
    elif cfg.detector.mode == "windowed":
        theta = det.calibrate_window_threshold(ref, q.bins(clean), cfg.detector.window_len, cfg.detector.quantile)
    else:
        theta = det.threshold_from_counts(ref, counts, cfg.detector.quantile)
    train_time = time.perf_counter() - t0

    campaign = plan_campaign(
        cfg.n_samples, cfg.n_one_time, cfg.n_replay, cfg.seed,
        deviation_pct=cfg.deviation_pct, separation=max(2 * cfg.detector.window_len, 4 * cfg.tolerance + 2),
        values=clean, min_effect=cfg.min_effect, valid_range=cfg.valid_range,
    )
    attacked, truth = apply_campaign(clean, campaign, valid_range=cfg.valid_range)

    t0 = time.perf_counter()
    events = det.detect(ref, cfg.detector, q.bins(attacked), theta, timestamps=t, counts=counts)
    test_time = time.perf_counter() - t0

    span = cfg.detector.window_len if cfg.detector.mode == "windowed" else 1
    report = score(events, truth, cfg.n_samples, MatchPolicy(cfg.tolerance, span))
    report.train_time_s, report.test_time_s = train_time, test_time
    return ScenarioResult(cfg, t, clean, attacked, campaign, truth, counts, theta, events, report)


def write_plot_csv(fh, result: ScenarioResult) -> None:
    """Index/time/velocity table with attack and event markers, ready for any plotting tool."""
    n = result.attacked.size
    ev = np.zeros(n, dtype=np.int8)
    for e in result.events:
        ev[e.index] = 1
    att = attack_mask(n, result.truth).astype(np.int8)
    fh.write("index,timestamp,velocity,clean_velocity,attack,event\n")
    for k, (tk, v, c, a, e) in enumerate(zip(result.timestamps.tolist(), result.attacked.tolist(),
                                               result.clean.tolist(), att.tolist(), ev.tolist())):
        fh.write(f"{k},{tk:.6f},{v:.2f},{c:.2f},{a},{e}\n")


def write_scenario_outputs(out_dir, result: ScenarioResult) -> List[Path]:
    """Write report, events, campaign, ground truth and plot CSVs; contents are seed-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = f"{result.config.scenario}-seed{result.config.seed}"
    paths = []
    p = out / "report.csv"
    with p.open("w") as fh:
        write_reports(fh, [label], [result.report])
    paths.append(p)
    p = out / "report.txt"
    p.write_text(REPORT_HEADER + format_report(label, result.report)
                 + f"\n  threshold (bits)   {result.threshold:.6f}\n")
    paths.append(p)
    for name, writer, obj in (("events.csv", det.write_events, result.events),
                              ("campaign.csv", write_campaign, result.campaign),
                              ("truth.csv", write_truth, result.truth),
                              ("plot.csv", write_plot_csv, result)):
        p = out / name
        with p.open("w") as fh:
            writer(fh, obj)
        paths.append(p)
    return paths


# -- deviation sweep --------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    """Noisy-training sweep: training and test traces carry independent noise."""

    scenario: str = "urban"
    n_samples: int = 60_000
    n_attacks: int = 20
    seed: int = 0
    noise_kmh: float = 0.3
    glitch_rate: float = 0.0
    glitch_kmh: float = 5.0
    quantizer: Quantizer = field(default_factory=Quantizer)
    epsilon: float = DEFAULT_EPSILON
    quantile: float = det.DEFAULT_QUANTILE
    tolerance: int = 2
    valid_range: Tuple[float, float] = (0.0, 160.0)


def deviation_sweep(clean, deviations: Sequence[float] = SWEEP_DEVIATIONS,
                    cfg: SweepConfig = SweepConfig()) -> List[Tuple[float, EvalReport]]:
    """One report per deviation level, same noise and attack positions at every level."""
    deviations = list(deviations)
    if not deviations:
        return []
    clean = np.asarray(clean, dtype=float)
    q = cfg.quantizer
    noisy_train = contaminate(clean, cfg.seed * 2 + 1, cfg.noise_kmh, cfg.glitch_rate, cfg.glitch_kmh,
                              cfg.valid_range)
    noisy_test = contaminate(clean, cfg.seed * 2 + 2, cfg.noise_kmh, cfg.glitch_rate, cfg.glitch_kmh,
                             cfg.valid_range)
    counts = train(q.bins(noisy_train), q.order)
    ref = derive_self_info(counts, cfg.epsilon)
    theta = det.threshold_from_counts(ref, counts, cfg.quantile)
    out = []
    for d in deviations:
        campaign = plan_campaign(clean.size, cfg.n_attacks, 0, cfg.seed, deviation_pct=d,
                                 valid_range=cfg.valid_range)
        attacked, truth = apply_campaign(noisy_test, campaign, valid_range=cfg.valid_range)
        events = det.detect_streaming(ref, theta, q.bins(attacked))
        out.append((d, score(events, truth, clean.size, MatchPolicy(cfg.tolerance))))
    return out


def sweep_is_monotone(table: Sequence[Tuple[float, EvalReport]], metric: str = "fpr_events") -> bool:
    """True when the metric does not increase as deviation grows."""
    vals = [getattr(r, metric) for _, r in sorted(table, key=lambda x: x[0])]
    return all(b <= a for a, b in zip(vals, vals[1:]))


# -- benchmarking -----------------------------------------------------------

@dataclass
class BenchReport:
    n_samples: int
    repetitions: int
    batch_samples_per_s: float
    stream_samples_per_s: float
    p50_ns: float
    p99_ns: float
    max_ns: float
    build_detect_s: float
    batch_times_s: List[float] = field(default_factory=list)
    stream_times_s: List[float] = field(default_factory=list)

    def summary(self) -> str:
        return (
            f"samples={self.n_samples} reps={self.repetitions}\n"
            f"batch   {self.batch_samples_per_s / 1e6:8.2f} M samples/s\n"
            f"stream  {self.stream_samples_per_s / 1e6:8.2f} M samples/s\n"
            f"latency p50={self.p50_ns:.0f} ns  p99={self.p99_ns:.0f} ns  max={self.max_ns:.0f} ns\n"
            f"build+detect {self.build_detect_s:.4f} s"
        )


MIN_BENCH_SAMPLES = 10_000


def bench(ref: SelfInfoMatrix, bins, threshold: float, repetitions: int = 5,
          counts: Optional[TransitionCounts] = None) -> BenchReport:
    """Time the detection loop only (no I/O or parsing).

    ``batch`` is the vectorised scorer, ``stream`` the per-message
    `StreamingDetector.push` path. Per-sample latency is measured on the
    stream path with one ``perf_counter_ns`` pair around each push, so it
    includes that timer's overhead. ``build_detect_s`` adds matrix
    construction from ``counts`` (or from the trace) to one batch run.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    b = np.asarray(bins, dtype=np.intp)
    if b.size < MIN_BENCH_SAMPLES:
        raise ValueError(f"trace too small for stable statistics (< {MIN_BENCH_SAMPLES} samples)")
    values = ref.values
    blist = b.tolist()
    clock = time.perf_counter

    gc_was = gc.isenabled()
    gc.disable()
    try:
        batch_times = []
        for _ in range(repetitions):
            t0 = clock()
            hits = np.flatnonzero(values[b[:-1], b[1:]] > threshold)
            batch_times.append(clock() - t0)
        del hits

        stream_times = []
        sd = det.StreamingDetector(ref, threshold)
        for _ in range(repetitions):
            sd.reset()
            push = sd.push
            t0 = clock()
            for x in blist:
                push(x)
            stream_times.append(clock() - t0)

        sd.reset()
        push = sd.push
        ns = time.perf_counter_ns
        lat = np.empty(len(blist), dtype=np.int64)
        for k, x in enumerate(blist):
            t0 = ns()
            push(x)
            lat[k] = ns() - t0

        t0 = clock()
        c = counts if counts is not None else train(b, ref.order)
        r2 = derive_self_info(c, ref.epsilon)
        np.flatnonzero(r2.values[b[:-1], b[1:]] > threshold)
        build_detect = clock() - t0
    finally:
        if gc_was:
            gc.enable()

    n = b.size
    return BenchReport(
        n_samples=n,
        repetitions=repetitions,
        batch_samples_per_s=n / float(np.median(batch_times)),
        stream_samples_per_s=n / float(np.median(stream_times)),
        p50_ns=float(np.percentile(lat, 50)),
        p99_ns=float(np.percentile(lat, 99)),
        max_ns=float(lat.max()),
        build_detect_s=build_detect,
        batch_times_s=batch_times,
        stream_times_s=stream_times,
    )
