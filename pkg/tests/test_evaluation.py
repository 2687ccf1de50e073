import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfinfo_ads.detector import AnomalyEvent
from selfinfo_ads.evaluation import (AmbiguousMatchError, MatchPolicy, ScenarioConfig, SweepConfig, bench,
                                     deviation_sweep, run_scenario, score, sweep_is_monotone,
                                     write_reports, write_scenario_outputs)
from selfinfo_ads.inject import GroundTruth
from selfinfo_ads.simatrix import Quantizer, derive_self_info, train
from selfinfo_ads.synth import (HIGHWAY_SAMPLES, URBAN_SAMPLES, contaminate, gen_drive_trace, profile)


def ev(k):
    return AnomalyEvent(k, float(k), 0, 0, 20.0, "streaming")


def one_time_truth(positions):
    return GroundTruth(tuple(("one_time", p, p + 1) for p in positions))


# -- score ------------------------------------------------------------------

def test_all_detected_no_strays():
    pos = [1000 * (k + 1) for k in range(12)]
    r = score([ev(p) for p in pos], one_time_truth(pos), 20_000)
    assert r.detection_rate == 1.0 and r.fpr_samplewise == 0.0
    assert r.true_positives == 12 and r.false_anomaly_count == 0


def test_six_matched_one_stray():
    pos = [1000 * (k + 1) for k in range(6)]
    events = sorted([ev(p + 1) for p in pos] + [ev(500)], key=lambda e: e.index)
    r = score(events, one_time_truth(pos), 10_000)
    assert (r.true_positives, r.false_positives, r.false_negatives) == (6, 1, 0)
    assert r.fpr_samplewise == pytest.approx(1 / (10_000 - 6))
    assert r.fpr_events == pytest.approx(1 / 7)


def test_vacuous_case():
    r = score([], GroundTruth(), 100)
    assert r.detection_rate == 1.0 and r.fpr_samplewise == 0.0
    assert (r.true_positives, r.false_positives, r.false_negatives) == (0, 0, 0)


def test_multiple_events_on_one_attack_count_once():
    r = score([ev(99), ev(100), ev(101), ev(102)], GroundTruth((("replay", 100, 101),)), 1000)
    assert r.true_positives == 1 and r.matched_events == 4 and r.false_positives == 0


def test_tolerance_edges():
    truth = GroundTruth((("replay", 100, 110),))
    pol = MatchPolicy(2)
    assert score([ev(98)], truth, 1000, pol).true_positives == 1
    assert score([ev(97)], truth, 1000, pol).false_positives == 1
    assert score([ev(111)], truth, 1000, pol).true_positives == 1
    assert score([ev(112)], truth, 1000, pol).false_positives == 1


def test_windowed_event_covers_its_window():
    truth = GroundTruth((("one_time", 150, 151),))
    wev = AnomalyEvent(100, 100.0, 0, 0, 20.0, "windowed")
    assert score([wev], truth, 1000, MatchPolicy(2, window_len=64)).true_positives == 1
    assert score([wev], truth, 1000, MatchPolicy(2, window_len=32)).false_positives == 1


def test_unsorted_events_rejected():
    with pytest.raises(ValueError, match="sorted"):
        score([ev(5), ev(3)], GroundTruth(), 10)


def test_ambiguous_tolerance_rejected():
    with pytest.raises(AmbiguousMatchError):
        score([], one_time_truth([10, 14]), 100, MatchPolicy(2))


def test_duplicate_indices_are_deduplicated():
    truth = one_time_truth([50])
    a = score([ev(10), ev(10), ev(50)], truth, 100)
    b = score([ev(10), ev(50), ev(50)], truth, 100)
    assert a == b and a.false_positives == 1


@settings(max_examples=100)
@given(st.lists(st.integers(0, 9_999), max_size=40), st.lists(st.integers(0, 48), max_size=8, unique=True))
def test_score_invariants(event_idx, slots):
    truth = one_time_truth([200 * (s + 1) for s in sorted(slots)])
    events = [ev(k) for k in sorted(event_idx)]
    r = score(events, truth, 10_000)
    assert r.true_positives + r.false_negatives == len(truth)
    assert 0 <= r.detection_rate <= 1 and 0 <= r.fpr_samplewise <= 1 and 0 <= r.fpr_events <= 1
    near = all(any(abs(e.index - s) <= 2 for _, s, _ in truth.ranges) for e in events)
    if near:
        assert r.fpr_samplewise == 0


def test_report_csv_has_formula_header():
    buf = io.StringIO()
    write_reports(buf, ["x"], [score([], GroundTruth(), 10)])
    text = buf.getvalue()
    assert text.startswith("# detection_rate")
    assert "false_anomaly_count" in text.splitlines()[4]


# -- synthetic traces -------------------------------------------------------

@pytest.mark.parametrize("scenario", ["highway", "urban"])
def test_trace_bounds_and_step_limit(scenario):
    t, v = gen_drive_trace(scenario, 50_000, 3)
    p = profile(scenario)
    assert v.min() >= 0.0 and v.max() <= 160.0
    assert np.abs(np.diff(v)).max() <= p.max_step_kmh + 1e-9
    assert np.allclose(np.diff(t), 1 / 260.0)


def test_highway_faster_than_urban():
    _, hw = gen_drive_trace("highway", 100_000, 2)
    _, ub = gen_drive_trace("urban", 100_000, 2)
    assert hw.mean() > ub.mean()


def test_urban_has_stops():
    _, ub = gen_drive_trace("urban", URBAN_SAMPLES, 0)
    assert (ub == 0).mean() > 0.05


def test_standard_sample_counts():
    assert gen_drive_trace("highway", HIGHWAY_SAMPLES, 0)[1].size == 274_487
    assert gen_drive_trace("urban", URBAN_SAMPLES, 0)[1].size == 263_023


def test_trace_is_seeded():
    a = gen_drive_trace("urban", 20_000, 5)[1]
    b = gen_drive_trace("urban", 20_000, 5)[1]
    c = gen_drive_trace("urban", 20_000, 6)[1]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_unknown_scenario():
    with pytest.raises(ValueError):
        gen_drive_trace("offroad", 100, 0)


def test_contaminate_is_seeded_and_bounded():
    _, v = gen_drive_trace("urban", 10_000, 0)
    a = contaminate(v, 1, noise_kmh=1.0, glitch_rate=0.01)
    assert np.array_equal(a, contaminate(v, 1, noise_kmh=1.0, glitch_rate=0.01))
    assert a.min() >= 0 and a.max() <= 160


# -- scenario pipeline ------------------------------------------------------

def test_small_urban_scenario_detects_everything():
    r = run_scenario(ScenarioConfig(scenario="urban", seed=1, n_samples=60_000))
    assert r.report.detection_rate == 1.0 and r.report.false_anomaly_count == 0


def test_windowed_scenario_detects_everything():
    from selfinfo_ads.detector import DetectorConfig
    cfg = ScenarioConfig(scenario="highway", seed=2, n_samples=40_000,
                         detector=DetectorConfig(mode="windowed", quantile=1.0, window_len=64))
    r = run_scenario(cfg)
    assert r.report.detection_rate == 1.0 and r.report.false_anomaly_count == 0


def test_scenario_outputs_are_deterministic(tmp_path):
    cfg = ScenarioConfig(scenario="urban", seed=4, n_samples=50_000)
    for d in ("a", "b"):
        write_scenario_outputs(tmp_path / d, run_scenario(cfg))
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


# -- deviation sweep --------------------------------------------------------

def test_empty_sweep():
    assert deviation_sweep(np.zeros(10), []) == []


def test_sweep_shares_positions_across_levels():
    _, clean = gen_drive_trace("urban", 30_000, 0)
    table = deviation_sweep(clean, (10, 20, 40), SweepConfig(n_attacks=10))
    assert [d for d, _ in table] == [10, 20, 40]
    assert len({r.n_attacks for _, r in table}) == 1
    fps = {r.false_positives for _, r in table}
    assert len(fps) == 1  # stray events come from noise only, identical at every level


def test_forty_percent_unseen_jump_always_detected():
    # clean highway cruise: a 40% jump lands in a transition never seen in training
    _, clean = gen_drive_trace("highway", 40_000, 3)
    table = deviation_sweep(clean, (40,), SweepConfig(noise_kmh=0.0, n_attacks=10, quantile=1.0))
    assert table[0][1].detection_rate == 1.0


def test_sweep_is_monotone_helper():
    from selfinfo_ads.evaluation import EvalReport
    mk = lambda f: EvalReport(1, 1, 0, 0, 1, 1.0, 0.0, f, 10)
    assert sweep_is_monotone([(10, mk(0.5)), (20, mk(0.4)), (40, mk(0.4))])
    assert not sweep_is_monotone([(10, mk(0.3)), (40, mk(0.4))])


# -- bench ------------------------------------------------------------------

def _bench_inputs(n=50_000):
    _, v = gen_drive_trace("urban", n, 0)
    q = Quantizer()
    c = train(q.bins(v), q.order)
    return derive_self_info(c), q.bins(v), c


def test_bench_reports():
    m, bins, c = _bench_inputs()
    r = bench(m, bins, 20.0, repetitions=2, counts=c)
    assert r.n_samples == bins.size
    assert r.p50_ns <= r.p99_ns <= r.max_ns
    assert r.batch_samples_per_s > 0 and r.stream_samples_per_s > 0


def test_bench_rejects_zero_repetitions():
    m, bins, _ = _bench_inputs()
    with pytest.raises(ValueError):
        bench(m, bins, 20.0, repetitions=0)


def test_bench_rejects_small_trace():
    m, bins, _ = _bench_inputs()
    with pytest.raises(ValueError):
        bench(m, bins[:5000], 20.0)


def test_detection_time_scales_linearly():
    m, bins, _ = _bench_inputs(400_000)
    sizes = [100_000, 200_000, 400_000]
    bench(m, bins[:sizes[0]], 20.0, repetitions=3)  # warm-up
    # sizes interleaved round-robin so slow machine drift hits all of them alike
    runs = {n: [] for n in sizes}
    for _ in range(7):
        for n in sizes:
            runs[n].append(bench(m, bins[:n], 20.0, repetitions=1).stream_times_s[0])
    times = [min(runs[n]) for n in sizes]
    slope = np.polyfit(sizes, times, 1)[0]
    # doubling the trace should roughly double the time
    for a, b in zip(times, times[1:]):
        assert 2 * 0.8 <= b / a <= 2 * 1.2, times
    assert slope > 0
