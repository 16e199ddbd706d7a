import numpy as np
import pytest

from antibunch.correlator import (CorrelationError, CorrelationHistogram, CorrelationRequest,
                                  correlate, correlate_segments, merge, poisson_normalize)
from antibunch.rng import substream
from antibunch.sim import TimestampStream

import oracles


def poisson_stream(rates, duration, seed):
    per = {}
    for ch, r in rates.items():
        rng = substream(seed, "poisson", ch)
        n = rng.poisson(r * duration)
        per[ch] = np.sort(rng.integers(0, int(duration), n))
    return TimestampStream.from_channels(per, duration)


def test_request_validation():
    with pytest.raises(CorrelationError):
        CorrelationRequest(0, 1, 0.0, 1000.0)
    with pytest.raises(CorrelationError, match="10 bin"):
        CorrelationRequest(0, 1, 100.0, 900.0)
    with pytest.raises(CorrelationError):
        CorrelationRequest(0, 1, 100.0, 1000.0, mode="tac")


def test_hand_countable_pair():
    st = TimestampStream.from_channels({0: np.array([0]), 1: np.array([500])}, 10000.0)
    for mode in ("all_pairs", "start_stop"):
        h = correlate(st, CorrelationRequest(0, 1, 100.0, 1000.0, mode))
        assert h.raw.sum() == 1
        k = int(np.flatnonzero(h.raw)[0])
        assert h.taus[k] == 500.0  # bin covering [450, 550)


def test_bin_edges_ties_go_up():
    st = TimestampStream.from_channels({0: np.array([1000]), 1: np.array([1050, 950])[::-1]},
                                       5000.0)
    h = correlate(st, CorrelationRequest(0, 1, 100.0, 1000.0))
    # tau = +50 sits on the 0/+100 edge -> +100 bin; tau = -50 -> 0 bin
    assert h.raw[h.half_bins] == 1 and h.raw[h.half_bins + 1] == 1


def test_errors_name_channel():
    st = TimestampStream.from_channels({0: np.array([1, 2])}, 10.0)
    with pytest.raises(CorrelationError, match="channel 1"):
        correlate(st, CorrelationRequest(0, 1, 1.0, 10.0))
    bad = TimestampStream(np.array([0, 0], np.uint8), np.array([5, 3]), 10.0)
    with pytest.raises(CorrelationError, match="not time-sorted"):
        correlate(bad, CorrelationRequest(0, 0, 1.0, 10.0))


@pytest.mark.parametrize("auto", [False, True])
def test_all_pairs_equals_quadratic_brute_force(auto):
    rates = {0: 1e-4} if auto else {0: 5e-5, 1: 5e-5}
    st = poisson_stream(rates, 1e8, seed=3)
    a = st.channel(0)
    b = a if auto else st.channel(1)
    assert 0.9e4 < len(a) + (0 if auto else len(b)) < 1.1e4
    req = CorrelationRequest(0, 0 if auto else 1, 250.0, 25000.0)
    h = correlate(st, req)
    ref = oracles.brute_force_pairs(a, b, 250.0, req.half_bins, exclude_self=auto)
    assert np.array_equal(h.raw, ref)


def test_start_stop_equals_tac_brute_force():
    st = poisson_stream({0: 5e-5, 1: 5e-5}, 1e8, seed=4)
    req = CorrelationRequest(0, 1, 250.0, 25000.0, "start_stop")
    h = correlate(st, req)
    ref = oracles.brute_force_next_stop(st.channel(0), st.channel(1), 250.0, req.half_bins)
    assert np.array_equal(h.raw, ref)


def test_start_stop_converges_to_all_pairs_at_low_rate():
    # The TAC emulation delays the stop line by tau_max, so its range is the
    # whole window (2 half_bins + 1) bins; the expected pile-up loss in a bin
    # is 1 - exp(-rate * elapsed TAC time).  Set rate x TAC range = 0.01.
    tau_max, bw = 10000.0, 1000.0
    tac_range = (2 * 10 + 1) * bw
    r = 0.01 / tac_range
    st = poisson_stream({0: r, 1: r}, 2.1e13, seed=5)
    ap = correlate(st, CorrelationRequest(0, 1, bw, tau_max, "all_pairs"))
    ss = correlate(st, CorrelationRequest(0, 1, bw, tau_max, "start_stop"))
    assert np.all(ss.raw <= ap.raw)  # every TAC count is also an all_pairs pair
    rel = (ap.raw - ss.raw) / ap.raw
    elapsed = ap.taus + (ap.half_bins + 0.5) * bw  # bin centre on the TAC axis
    expected = 1 - np.exp(-r * elapsed)
    assert np.all(expected < 0.01)
    sigma = np.sqrt(expected * (1 - expected) / ap.raw)
    assert np.all(np.abs(rel - expected) < 4 * sigma)
    assert np.mean(rel) < 0.01


def test_poisson_normalization_arithmetic():
    h = CorrelationHistogram(1000.0, 10, np.full(21, 36), 1000 * 3600.0, 1000 * 3600.0,
                             3600e12)
    assert h.n_start == pytest.approx(1000.0) and h.dt_int == pytest.approx(3600.0)
    assert h.n_poisson == pytest.approx(3.6, rel=1e-12)
    h.raw = np.full(21, 3.6)  # raw == N_Poisson -> normalized == 1
    assert np.allclose(poisson_normalize(h).normalized, 1.0, rtol=1e-12)


def test_normalization_errors():
    h = CorrelationHistogram(100.0, 10, np.ones(21, np.int64), 0.0, 5.0, 1e6)
    with pytest.raises(CorrelationError, match="positive rates"):
        poisson_normalize(h)
    h2 = CorrelationHistogram(100.0, 10, np.ones(21, np.int64), 5.0, 5.0, 1e6)
    n = poisson_normalize(h2)
    with pytest.raises(CorrelationError, match="already normalized"):
        poisson_normalize(n)
    with pytest.raises(CorrelationError, match="raw"):
        merge(n, h2)


def test_poisson_streams_flat_at_one():
    st = poisson_stream({0: 1e-3, 1: 1e-3}, 1e9, seed=6)
    assert len(st) >= 1e6
    h = poisson_normalize(correlate(st, CorrelationRequest(0, 1, 500.0, 20000.0)))
    assert abs(np.mean(h.normalized) - 1.0) < 0.01
    r = (h.normalized - 1) / h.sigma
    assert np.mean(r ** 2) < 1.5


def test_normalization_scale_covariant_in_integration_time():
    short = poisson_stream({0: 1e-3, 1: 1e-3}, 5e8, seed=7)
    long = poisson_stream({0: 1e-3, 1: 1e-3}, 1e9, seed=8)
    req = CorrelationRequest(0, 1, 500.0, 20000.0)
    a = poisson_normalize(correlate(short, req))
    b = poisson_normalize(correlate(long, req))
    diff = (a.normalized - b.normalized) / np.hypot(a.sigma, b.sigma)
    assert np.mean(diff ** 2) < 1.5


def test_autocorrelation_mirror_symmetry():
    st = poisson_stream({0: 1e-3}, 1e9, seed=9)
    # odd bin width: integer delays never sit on a bin edge
    h = correlate(st, CorrelationRequest(0, 0, 501.0, 20040.0))
    # all_pairs autocorrelation counts each unordered pair twice: exact mirror
    assert np.array_equal(h.raw, h.raw[::-1])


def test_merge_identity_and_commutativity():
    req = CorrelationRequest(0, 1, 100.0, 2000.0)
    a = correlate(poisson_stream({0: 1e-3, 1: 1e-3}, 1e8, seed=1), req)
    b = correlate(poisson_stream({0: 2e-3, 1: 1e-3}, 3e8, seed=2), req)
    e = CorrelationHistogram.empty_like(a)
    ae = merge(a, e)
    assert np.array_equal(ae.raw, a.raw) and ae.n_start == a.n_start
    ab, ba = merge(a, b), merge(b, a)
    assert np.array_equal(ab.raw, ba.raw)
    assert (ab.start_counts, ab.stop_counts, ab.duration_ps) == \
        (ba.start_counts, ba.stop_counts, ba.duration_ps)
    assert ab.n_start == pytest.approx((a.start_counts + b.start_counts) / 4e-4)
    c = correlate(poisson_stream({0: 1e-3, 1: 3e-3}, 1e8, seed=3), req)
    assert np.array_equal(merge(merge(a, b), c).raw, merge(a, merge(b, c)).raw)


def test_merge_binning_mismatch():
    st = poisson_stream({0: 1e-3, 1: 1e-3}, 1e8, seed=1)
    a = correlate(st, CorrelationRequest(0, 1, 100.0, 2000.0))
    b = correlate(st, CorrelationRequest(0, 1, 200.0, 2000.0))
    with pytest.raises(CorrelationError, match="binning mismatch"):
        merge(a, b)


@pytest.mark.parametrize("mode", ["all_pairs", "start_stop"])
@pytest.mark.parametrize("chans", [(0, 1), (0, 0)])
def test_eight_segments_bit_exact(mode, chans):
    st = poisson_stream({0: 1e-3, 1: 1e-3}, 1e9, seed=10)
    req = CorrelationRequest(*chans, 100.0, 5000.0, mode)
    single = poisson_normalize(correlate(st, req))
    for threads in (1, 4):
        seg = poisson_normalize(correlate_segments(st, req, 8, threads=threads))
        assert np.array_equal(seg.raw, single.raw)
        assert seg.n_start == single.n_start and seg.n_stop == single.n_stop
        assert seg.dt_int == single.dt_int
        assert np.array_equal(seg.normalized, single.normalized)
