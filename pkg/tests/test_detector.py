import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import flagged_transitions, lower_quantile, self_info_table
from selfinfo_ads.detector import (AnomalyEvent, CalibrationError, DetectorConfig, OnlineReference,
                                   PoisoningError, StreamingDetector, calibrate_threshold,
                                   calibrate_window_threshold, detect, detect_streaming, detect_windowed,
                                   read_events, threshold_from_counts, transition_scores, update_reference,
                                   window_starts, write_events)
from selfinfo_ads.simatrix import SelfInfoMatrix, TransitionCounts, derive_self_info, train

EPS = 2.0 ** -20


def toy_walk(n=100, order=20, seed=0):
    rng = np.random.default_rng(seed)
    seq = [order // 2]
    for _ in range(n - 1):
        seq.append(int(np.clip(seq[-1] + rng.integers(-1, 2), 0, order - 1)))
    return seq


def fixed_matrix(values, eps=EPS):
    v = np.asarray(values, dtype=float)
    return SelfInfoMatrix(values=v, epsilon=eps, seen=v < -np.log2(eps))


# -- calibration ------------------------------------------------------------

def test_cycle_calibrates_to_margin():
    seq = [0, 1, 2, 3] * 10
    m = derive_self_info(train(seq, 4))
    assert calibrate_threshold(m, seq, q=1.0) == 1.0


def test_quantile_on_four_scores():
    # transitions 0->1, 1->2, 2->3 score 1 bit, 3->0 scores 2 bits
    vals = np.full((4, 4), 20.0)
    vals[0, 1] = vals[1, 2] = vals[2, 3] = 1.0
    vals[3, 0] = 2.0
    m = fixed_matrix(vals)
    seq = [0, 1, 2, 3, 0]
    scores = transition_scores(m, seq).tolist()
    assert sorted(scores) == [1.0, 1.0, 1.0, 2.0]
    expected = lower_quantile(scores, 0.75) + 1.0
    assert expected == 2.0
    assert calibrate_threshold(m, seq, q=0.75) == expected


@pytest.mark.parametrize("q", [0.1, 0.5, 0.9, 0.999, 1.0])
def test_calibration_matches_sorted_oracle(q):
    seq = toy_walk(400, seed=3)
    m = derive_self_info(train(seq, 20))
    scores = transition_scores(m, seq).tolist()
    assert calibrate_threshold(m, seq, q) == lower_quantile(scores, q) + 1.0


def test_large_epsilon_cannot_calibrate():
    seq = toy_walk(100)
    m = derive_self_info(train(seq, 20), 0.5)
    with pytest.raises(CalibrationError):
        calibrate_threshold(m, seq, 1.0)


def test_counts_and_bins_calibrate_identically():
    seq = toy_walk(500, seed=9)
    c = train(seq, 20)
    m = derive_self_info(c)
    assert threshold_from_counts(m, c, 0.97) == calibrate_threshold(m, seq, 0.97)


# -- streaming --------------------------------------------------------------

def test_training_sequence_is_silent():
    seq = toy_walk(100)
    m = derive_self_info(train(seq, 20))
    theta = calibrate_threshold(m, seq, 1.0)
    assert detect_streaming(m, theta, seq) == []


def _unseen_substitute(seq, table, k):
    """A bin x such that seq[k-1] -> x and x -> seq[k+1] were never observed."""
    p, n = seq[k - 1], seq[k + 1]
    for x in range(len(table)):
        if table[p][x] == 20.0 and table[x][n] == 20.0:
            return x
    raise AssertionError("no substitute")


def test_one_time_substitution_fires_entry_and_exit():
    seq = toy_walk(100, seed=1)
    table = self_info_table(seq, 20, EPS)
    m = derive_self_info(train(seq, 20), EPS)
    theta = calibrate_threshold(m, seq, 1.0)
    assert theta < 20
    k = 57
    test = list(seq)
    test[k] = _unseen_substitute(seq, table, k)
    expected = flagged_transitions(table, test, theta)
    assert [i for i, _ in expected] == [k, k + 1]
    events = detect_streaming(m, theta, test)
    assert [(e.index, e.score_bits) for e in events] == expected
    assert all(e.prev_bin == test[e.index - 1] and e.cur_bin == test[e.index] for e in events)


def test_replay_with_unseen_junctions_fires_at_each_junction():
    # two separate regimes so a replayed high segment lands next to low values
    low = [2, 3] * 25
    high = [15, 16] * 25
    seq = low + high
    table = self_info_table(seq, 20, EPS)
    m = derive_self_info(train(seq, 20), EPS)
    theta = calibrate_threshold(m, seq, 1.0)
    test = list(seq)
    test[10:20] = seq[61:71]  # replay of the high regime inside the low one
    expected = flagged_transitions(table, test, theta)
    got = [(e.index, e.score_bits) for e in detect_streaming(m, theta, test)]
    assert got == expected
    idx = [i for i, _ in got]
    assert 10 in idx and 20 in idx


def test_streaming_detector_matches_batch():
    seq = toy_walk(300, seed=4)
    m = derive_self_info(train(seq[:150], 20))
    theta = 5.0
    batch = detect_streaming(m, theta, seq)
    assert StreamingDetector(m, theta).run(seq) == batch


@settings(max_examples=60)
@given(st.integers(0, 10_000), st.floats(0.5, 19.5), st.floats(0.5, 19.5))
def test_raising_threshold_never_adds_events(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    train_seq = toy_walk(120, seed=seed)
    test_seq = toy_walk(120, seed=seed + 1)
    m = derive_self_info(train(train_seq, 20))
    at_lo = {e.index for e in detect_streaming(m, lo, test_seq)}
    at_hi = {e.index for e in detect_streaming(m, hi, test_seq)}
    assert at_hi <= at_lo


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_unseen_transitions_always_fire(seed):
    train_seq = toy_walk(80, seed=seed)
    test_seq = toy_walk(80, seed=seed + 7)
    c = train(train_seq, 20)
    m = derive_self_info(c)
    theta = threshold_from_counts(m, c, 1.0)
    fired = {e.index for e in detect_streaming(m, theta, test_seq)}
    unseen = {k for k in range(1, 80) if c.counts[test_seq[k - 1], test_seq[k]] == 0}
    assert unseen <= fired


def test_streaming_is_deterministic():
    seq = toy_walk(200, seed=5)
    m = derive_self_info(train(seq[:100], 20))
    outs = []
    for _ in range(2):
        buf = io.StringIO()
        write_events(buf, detect_streaming(m, 3.0, seq, timestamps=np.arange(200) / 260.0))
        outs.append(buf.getvalue())
    assert outs[0] == outs[1]


def test_event_csv_roundtrip():
    ev = [AnomalyEvent(3, 0.011538, 4, 9, 20.0, "streaming")]
    buf = io.StringIO()
    write_events(buf, ev)
    assert buf.getvalue().splitlines()[1] == "3,0.011538,4,9,20.000000,streaming"
    buf.seek(0)
    assert read_events(buf) == ev


# -- windowed ---------------------------------------------------------------

def test_window_starts_cover_tail():
    assert window_starts(10, 4) == [0, 2, 4, 6]
    assert window_starts(11, 4) == [0, 2, 4, 6, 7]
    assert window_starts(5, 2) == [0, 1, 2, 3]


def test_window_like_training_is_silent():
    seq = [0, 1, 2, 3] * 8
    m = derive_self_info(train(seq, 4))
    assert detect_windowed(m, 1.0, seq, 8) == []


def test_window_with_unseen_transition():
    seq = [0, 1, 2, 3] * 8  # 32 samples, deterministic cycle
    m = derive_self_info(train(seq, 8))
    theta_w = calibrate_window_threshold(m, seq, 32, q=1.0)
    test = list(seq)
    test[13] = 6  # 0->6 and 6->2 never seen
    # direct computation over the window's 31 transitions:
    #   0->6: local P = 1/8 -> |3 - 20| = 17;  6->2: local P = 1 -> |0 - 20| = 20
    #   0->1: local P = 7/8 -> |0.193 - 0| ;   every other visited cell: |0 - 0|
    events = detect_windowed(m, theta_w, test, 32)
    assert len(events) == 1
    assert events[0].index == 0
    assert (events[0].prev_bin, events[0].cur_bin) == (6, 2)
    assert events[0].score_bits == 20.0
    assert events[0].score_bits >= m.e_max - m.max_seen > theta_w


def test_window_longer_than_trace():
    m = derive_self_info(train([0, 1], 2))
    with pytest.raises(ValueError):
        detect_windowed(m, 1.0, [0, 1, 0], 8)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.sampled_from([8, 16, 32]))
def test_windowed_covers_streaming_unseen_events(seed, W):
    train_seq = toy_walk(200, seed=seed)
    test_seq = toy_walk(200, seed=seed + 11)
    c = train(train_seq, 20)
    m = derive_self_info(c)
    theta = threshold_from_counts(m, c, 1.0)
    stream = [e for e in detect_streaming(m, theta, test_seq) if c.counts[e.prev_bin, e.cur_bin] == 0]
    # any window containing an unseen cell scores at least e_max - log2(W - 1)
    theta_w = m.e_max - np.log2(W) - 1.0
    flagged = [e.index for e in detect_windowed(m, theta_w, test_seq, W)]
    for e in stream:
        assert any(s <= e.index - 1 and e.index < s + W for s in flagged)


# -- online update ----------------------------------------------------------

def _single_row_counts(order=4, j=1, i=2, n=10):
    c = TransitionCounts.zeros(order)
    c.counts[j, i] = n
    return c


def test_update_fixed_point():
    lam = 1 - 2.0 ** -16
    online = OnlineReference(_single_row_counts(), EPS, threshold=10.0, decay=lam)
    for _ in range(1000):
        update_reference(online, (1, 2))
    assert online.score(1, 2) == 0.0
    assert online.probabilities(1)[2] == 1.0


def test_update_converges_to_new_successor():
    lam = 0.999
    # start at the stationary weight 1/(1-lam) so P(new) follows 1 - lam^k
    c = _single_row_counts(n=1000)
    online = OnlineReference(c, EPS, threshold=30.0, decay=lam)
    probs = []
    for k in range(1, 10_001):
        online.update(1, 3)
        probs.append(online.probabilities(1)[3])
    probs = np.array(probs)
    k = np.arange(1, 10_001)
    closed = (1 - lam ** k) / (1 - lam) / ((1 - lam ** k) / (1 - lam) + 1000 * lam ** k)
    assert np.allclose(probs, closed, rtol=1e-9, atol=1e-12)
    assert (np.diff(probs) > 0).all()
    assert np.allclose(probs, 1 - lam ** k, atol=1e-12)  # stationary start


def test_update_on_flagged_transition_refused():
    online = OnlineReference(_single_row_counts(), EPS, threshold=10.0, decay=0.99)
    with pytest.raises(PoisoningError):
        online.update(1, 3)  # unseen: scores e_max


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=300),
       st.sampled_from([0.5, 0.9, 0.999]))
def test_update_preserves_normalisation(updates, lam):
    c = train(toy_walk(50, order=6, seed=2), 6)
    online = OnlineReference(c, EPS, threshold=25.0, decay=lam)  # threshold above e_max: accept all
    for j, i in updates:
        online.update(j, i)
    for j in range(6):
        p = online.probabilities(j)
        if p.sum():
            assert abs(p.sum() - 1.0) < 1e-9
        w = online.weights(j)
        assert w.min() >= 0


def test_online_detector_skips_flagged_and_learns_accepted():
    train_seq = [0, 1] * 20
    c = train(train_seq, 4)
    m = derive_self_info(c)
    theta = threshold_from_counts(m, c, 1.0)
    config = DetectorConfig(decay=0.9)
    test = [0, 1, 0, 1, 3, 0, 1]
    events = detect(m, config, test, theta, counts=c)
    assert [e.index for e in events] == [4, 5]


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(mode="batch")
    with pytest.raises(ValueError):
        DetectorConfig(threshold_bits=0)
    with pytest.raises(ValueError):
        DetectorConfig(mode="windowed", window_len=1)
    with pytest.raises(ValueError):
        DetectorConfig(decay=1.0)
    with pytest.raises(ValueError):
        DetectorConfig(quantile=0.0)
