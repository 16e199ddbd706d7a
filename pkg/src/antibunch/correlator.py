"""Start-stop coincidence histograms and Poisson normalization.

Bin ``k`` is centred on ``k * bin_width`` and covers
``[k*bw - bw/2, k*bw + bw/2)``; ties on an edge go to the upper bin.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .sim import TimestampStream, max_threads

PS = 1e-12
MODES = ("start_stop", "all_pairs")


class CorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationRequest:
    start_channel: int
    stop_channel: int
    bin_width: float
    tau_max: float
    mode: str = "all_pairs"

    def __post_init__(self):
        if not self.bin_width > 0:
            raise CorrelationError("bin_width must be > 0")
        if self.tau_max < 10 * self.bin_width:
            raise CorrelationError("tau_max must be at least 10 bin widths")
        if self.mode not in MODES:
            raise CorrelationError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def half_bins(self) -> int:
        return int(math.floor(self.tau_max / self.bin_width + 1e-9))

    @property
    def auto(self) -> bool:
        return self.start_channel == self.stop_channel


@dataclass
class CorrelationHistogram:
    """Coincidence histogram.

    Detector rates are stored as pooled counts over the integration time
    ``duration_ps`` so that merging stays exact; ``n_start``/``n_stop`` are
    derived in counts/s and ``dt_int`` in s.
    """

    bin_width: float  # ps
    half_bins: int
    raw: np.ndarray
    start_counts: float
    stop_counts: float
    duration_ps: float
    mode: str = "all_pairs"
    start_channel: int = 0
    stop_channel: int = 1
    normalized: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def taus(self) -> np.ndarray:
        return np.arange(-self.half_bins, self.half_bins + 1) * self.bin_width

    @property
    def tau_max(self) -> float:
        return self.half_bins * self.bin_width

    @property
    def dt_int(self) -> float:
        return self.duration_ps * PS

    @property
    def n_start(self) -> float:
        return self.start_counts / self.dt_int if self.dt_int > 0 else 0.0

    @property
    def n_stop(self) -> float:
        return self.stop_counts / self.dt_int if self.dt_int > 0 else 0.0

    @property
    def is_normalized(self) -> bool:
        return self.normalized is not None

    @property
    def n_poisson(self) -> float:
        return self.n_start * self.n_stop * self.dt_int * (self.bin_width * PS)

    def _key(self):
        return (self.bin_width, self.half_bins, self.mode, self.start_channel, self.stop_channel)

    @classmethod
    def empty_like(cls, h: "CorrelationHistogram") -> "CorrelationHistogram":
        return cls(h.bin_width, h.half_bins, np.zeros_like(h.raw), 0.0, 0.0, 0.0, h.mode,
                   h.start_channel, h.stop_channel)


def _check_sorted(t, ch):
    if len(t) > 1 and np.any(np.diff(t) < 0):
        raise CorrelationError(f"channel {ch} timestamps are not time-sorted")


def _bin_index(dtau, bw, half):
    idx = np.floor((dtau + 0.5 * bw) / bw).astype(np.int64)
    return idx + half


def _all_pairs(a, b, bw, half, auto):
    lo_edge = -(half + 0.5) * bw
    hi_edge = (half + 0.5) * bw
    nbins = 2 * half + 1
    counts = np.zeros(nbins, dtype=np.int64)
    if len(a) == 0 or len(b) == 0:
        return counts
    lo = np.searchsorted(b, a + lo_edge, side="left")
    # pairs with tau >= hi_edge are excluded (upper edge is open)
    hi = np.searchsorted(b, a + hi_edge, side="left")
    starts = np.arange(len(a))
    active = hi > lo
    ia, j = starts[active], lo[active]
    hia = hi[active]
    while len(ia):
        dtau = b[j] - a[ia]
        if auto:
            keep = j != ia
            dtau = dtau[keep]
        idx = _bin_index(dtau, bw, half)
        ok = (idx >= 0) & (idx < nbins)
        counts += np.bincount(idx[ok], minlength=nbins)
        j = j + 1
        more = j < hia
        ia, j, hia = ia[more], j[more], hia[more]
    return counts


def _start_stop(a, b, bw, half, auto):
    """TAC emulation: each start is stopped by the first stop event after
    the window's lower edge (a stop-channel delay line of tau_max)."""
    lo_edge = -(half + 0.5) * bw
    nbins = 2 * half + 1
    counts = np.zeros(nbins, dtype=np.int64)
    if len(a) == 0 or len(b) == 0:
        return counts
    j = np.searchsorted(b, a + lo_edge, side="left")
    if auto:
        # a start cannot stop itself
        idx_self = np.arange(len(a))
        j = np.where(j == idx_self, j + 1, j)
    ok = j < len(b)
    dtau = b[j[ok]] - a[ok]
    idx = _bin_index(dtau, bw, half)
    good = (idx >= 0) & (idx < nbins)
    counts += np.bincount(idx[good], minlength=nbins)
    return counts


def correlate(stream: TimestampStream, req: CorrelationRequest,
              span: Optional[Tuple[float, float]] = None,
              rates: Optional[Tuple[float, float]] = None) -> CorrelationHistogram:
    """Accumulate ``tau = t_stop - t_start`` coincidences.

    ``span=(lo, hi)`` restricts start events (and the rate/integration-time
    bookkeeping) to ``[lo, hi)`` while stop partners come from the whole
    stream; this is what makes segment-wise accumulation exact.
    ``rates`` overrides the (start, stop) count rates in counts/s.
    """
    a_all = stream.channel(req.start_channel)
    b = stream.channel(req.stop_channel)
    for t, ch in ((a_all, req.start_channel), (b, req.stop_channel)):
        if len(t) == 0:
            raise CorrelationError(f"channel {ch} has no events")
        _check_sorted(t, ch)
    if span is None:
        lo_t, hi_t = 0.0, float(stream.duration)
        a = a_all
        offset = 0
        b_in = b
    else:
        lo_t, hi_t = span
        i0, i1 = np.searchsorted(a_all, [lo_t, hi_t], side="left")
        a = a_all[i0:i1]
        offset = i0
        j0, j1 = np.searchsorted(b, [lo_t, hi_t], side="left")
        b_in = b[j0:j1]
    duration_ps = float(hi_t - lo_t)
    duration_s = duration_ps * PS
    if not duration_ps > 0:
        raise CorrelationError("stream duration must be positive")
    bw, half = req.bin_width, req.half_bins
    if req.auto and span is not None:
        # self-pair exclusion compares indices into the full channel array
        raw = _auto_in_span(a_all, offset, len(a), bw, half, req.mode)
    elif req.mode == "all_pairs":
        raw = _all_pairs(a, b, bw, half, req.auto)
    else:
        raw = _start_stop(a, b, bw, half, req.auto)
    if rates is None:
        n_a, n_b = float(len(a)), float(len(b_in))
    else:
        n_a, n_b = rates[0] * duration_s, rates[1] * duration_s
    return CorrelationHistogram(bw, half, raw, n_a, n_b, duration_ps, req.mode,
                                req.start_channel, req.stop_channel)


def _auto_in_span(t, offset, n, bw, half, mode):
    a = t[offset:offset + n]
    nbins = 2 * half + 1
    counts = np.zeros(nbins, dtype=np.int64)
    if n == 0:
        return counts
    lo_edge = -(half + 0.5) * bw
    hi_edge = (half + 0.5) * bw
    lo = np.searchsorted(t, a + lo_edge, side="left")
    self_idx = np.arange(offset, offset + n)
    if mode == "start_stop":
        j = np.where(lo == self_idx, lo + 1, lo)
        ok = j < len(t)
        idx = _bin_index(t[j[ok]] - a[ok], bw, half)
        good = (idx >= 0) & (idx < nbins)
        return counts + np.bincount(idx[good], minlength=nbins)
    hi = np.searchsorted(t, a + hi_edge, side="left")
    act = hi > lo
    ia, j, hia = self_idx[act], lo[act], hi[act]
    while len(ia):
        keep = j != ia
        idx = _bin_index(t[j[keep]] - t[ia[keep]], bw, half)
        ok = (idx >= 0) & (idx < nbins)
        counts += np.bincount(idx[ok], minlength=nbins)
        j = j + 1
        more = j < hia
        ia, j, hia = ia[more], j[more], hia[more]
    return counts


def poisson_normalize(h: CorrelationHistogram) -> CorrelationHistogram:
    """raw / (n_start n_stop dt_int dt_MCA); sigma from sqrt(max(raw, 1))."""
    if h.is_normalized:
        raise CorrelationError("histogram is already normalized")
    if not (h.n_start > 0 and h.n_stop > 0 and h.dt_int > 0 and h.bin_width > 0):
        raise CorrelationError("normalization needs positive rates, integration time "
                               "and bin width")
    npois = h.n_poisson
    raw = h.raw.astype(float)
    return replace(h, normalized=raw / npois,
                   sigma=np.sqrt(np.maximum(raw, 1.0)) / npois)


def merge(h1: CorrelationHistogram, h2: CorrelationHistogram) -> CorrelationHistogram:
    """Bin-wise sum of two raw histograms with pooled rates."""
    if h1.is_normalized or h2.is_normalized:
        raise CorrelationError("only raw histograms can be merged")
    if h1._key() != h2._key():
        raise CorrelationError(f"binning mismatch: {h1._key()} vs {h2._key()}")
    return CorrelationHistogram(
        h1.bin_width, h1.half_bins, h1.raw + h2.raw,
        h1.start_counts + h2.start_counts, h1.stop_counts + h2.stop_counts,
        h1.duration_ps + h2.duration_ps, h1.mode, h1.start_channel, h1.stop_channel)


def segment_edges(stream: TimestampStream, n_segments: int):
    """Integer-ps boundaries splitting ``[0, duration)`` into equal segments."""
    d = int(math.ceil(stream.duration))
    return [(d * i) // n_segments for i in range(n_segments + 1)]


def correlate_segments(stream: TimestampStream, req: CorrelationRequest,
                       n_segments: int = 8, threads: Optional[int] = None) -> CorrelationHistogram:
    """Correlate disjoint start-time segments (possibly in parallel) and merge."""
    edges = segment_edges(stream, n_segments)
    spans = list(zip(edges[:-1], edges[1:]))
    threads = threads or max_threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda s: correlate(stream, req, span=s), spans))
    else:
        parts = [correlate(stream, req, span=s) for s in spans]
    total = parts[0]
    for p in parts[1:]:
        total = merge(total, p)
    return total
