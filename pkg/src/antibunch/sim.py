"""Monte Carlo photon streams from a cw-driven two-level emitter.

Emission is a reset-renewal process: after every photon the emitter is in
its ground state, so successive waiting times are i.i.d.  Their distribution
follows from the conditional (no-jump) optical Bloch equations, propagated
once per configuration with a fixed-step RK4 scheme and then sampled by
inverse transform.  Routing, background, beam splitting and detector effects
are applied afterwards, each on its own RNG sub-stream.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .constants import fwhm_to_sigma
from .physics import DriveParams, EmitterParams, saturation_parameter
from .rng import substream

EMITTER = 0
MODE = 1
SOURCES = {"emitter": EMITTER, "mode": MODE}

CHUNK = 1 << 16
_BLOCK = 1024
_SURVIVAL_FLOOR = 1e-13
_MAX_STEPS = 50_000_000


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("ANTIBUNCH_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ChannelModel:
    """Routing into emitter-line (0) and cavity-mode (1) channels.

    ``background_rates`` maps channel id to a Poisson rate in counts/ps.
    """

    mode_fraction: float = 0.0
    background_rates: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.mode_fraction <= 1:
            raise ValueError(f"mode_fraction must lie in [0, 1], got {self.mode_fraction}")
        for ch, r in self.background_rates.items():
            if not r >= 0:
                raise ValueError(f"background rate on channel {ch} must be >= 0")


@dataclass(frozen=True)
class DetectorModel:
    """Single-photon detector watching one optical channel (``source``)."""

    efficiency: float = 1.0
    jitter_fwhm: float = 0.0
    dead_time: float = 0.0
    source: str = "mode"

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise ValueError(f"efficiency must lie in (0, 1], got {self.efficiency}")
        if not self.jitter_fwhm >= 0:
            raise ValueError("jitter_fwhm must be >= 0")
        if not self.dead_time >= 0:
            raise ValueError("dead_time must be >= 0")
        if self.source not in SOURCES:
            raise ValueError(f"detector source must be one of {sorted(SOURCES)}")


@dataclass
class TimestampStream:
    """Time-ordered detection records; times in integer ps."""

    channels: np.ndarray
    times: np.ndarray
    duration: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        self.times = np.asarray(self.times, dtype=np.int64)
        if self.channels.shape != self.times.shape:
            raise ValueError("channels and times must have equal length")

    def __len__(self):
        return len(self.times)

    def channel(self, ch: int) -> np.ndarray:
        return self.times[self.channels == ch]

    def channel_ids(self):
        return sorted(int(c) for c in np.unique(self.channels))

    def counts(self) -> Dict[int, int]:
        ids, n = np.unique(self.channels, return_counts=True)
        return {int(i): int(k) for i, k in zip(ids, n)}

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.times) >= 0))

    @classmethod
    def from_channels(cls, per_channel: Dict[int, np.ndarray], duration, metadata=None):
        """Merge per-channel time arrays into one time-sorted stream."""
        if per_channel:
            ch = np.concatenate([np.full(len(t), c, dtype=np.uint8)
                                 for c, t in sorted(per_channel.items())])
            t = np.concatenate([np.asarray(v, dtype=np.int64)
                                for _, v in sorted(per_channel.items())])
        else:
            ch = np.zeros(0, np.uint8)
            t = np.zeros(0, np.int64)
        # stable sort: equal times keep channel order
        order = np.argsort(t, kind="stable")
        meta = dict(metadata or {})
        stream = cls(ch[order], t[order], duration, meta)
        stream.metadata["counts"] = stream.counts()
        return stream


@dataclass
class SimConfig:
    emitter: EmitterParams
    drive: DriveParams
    channels: ChannelModel = field(default_factory=ChannelModel)
    detectors: Dict[int, DetectorModel] = field(default_factory=dict)
    duration: float = 1e9
    rng_seed: int = 0
    dt: Optional[float] = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if not 0 <= int(self.rng_seed) < 2 ** 64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    def max_dt(self) -> float:
        scales = [self.emitter.t1, self.emitter.t2]
        if self.drive.rabi_sq > 0:
            scales.append(2 * math.pi / self.drive.rabi)
        return min(scales) / 50.0

    def step(self) -> float:
        limit = self.max_dt()
        if self.dt is None:
            return limit
        if self.dt > limit * (1 + 1e-12):
            raise ValueError(f"integration step dt={self.dt} ps exceeds the "
                             f"stability limit {limit:.6g} ps")
        return float(self.dt)


def no_jump_generator(e: EmitterParams, d: DriveParams) -> np.ndarray:
    """Generator of the conditional Bloch equations.

    State is ``(rho_ee, rho_gg, Re rho_eg, Im rho_eg)``; the trace decays at
    the emission rate because the jump term feeding ``rho_gg`` is omitted.
    """
    om = d.rabi
    dl = d.laser_detuning
    g1 = 1.0 / e.t1
    g2 = 1.0 / e.t2
    return np.array([
        [-g1, 0.0, 0.0, -om],
        [0.0, 0.0, 0.0, om],
        [0.0, 0.0, -g2, -dl],
        [0.5 * om, -0.5 * om, dl, -g2],
    ])


def rk4_propagator(a: np.ndarray, dt: float) -> np.ndarray:
    """One classical RK4 step for the linear system x' = a x."""
    h = a * dt
    eye = np.eye(a.shape[0])
    h2 = h @ h
    h3 = h2 @ h
    return eye + h + h2 / 2.0 + h3 / 6.0 + (h3 @ h) / 24.0


@dataclass
class WaitingTimeDistribution:
    """Tabulated inter-emission distribution on a uniform grid."""

    t: np.ndarray
    cdf: np.ndarray
    tail_rate: float

    @property
    def survival_end(self):
        return 1.0 - self.cdf[-1]

    def sample(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.interp(u, self.cdf, self.t)
        tail = u >= self.cdf[-1]
        if np.any(tail):
            s_end = self.survival_end
            out[tail] = self.t[-1] + np.log(s_end / np.maximum(1.0 - u[tail], 1e-300)) / self.tail_rate
        return out

    def mean(self) -> float:
        # E[T] = integral of the survival function
        surv = 1.0 - self.cdf
        dt = self.t[1] - self.t[0]
        return float(dt * (surv.sum() - 0.5 * (surv[0] + surv[-1]))
                     + self.survival_end / self.tail_rate)


def waiting_time_distribution(e: EmitterParams, d: DriveParams, dt: float) -> WaitingTimeDistribution:
    """Integrate the no-jump evolution from the ground state until the
    survival probability drops below 1e-13."""
    if d.rabi_sq == 0:
        raise ValueError("no drive: the emitter never emits")
    m = rk4_propagator(no_jump_generator(e, d), dt)
    powers = np.empty((_BLOCK, 4, 4))
    powers[0] = np.eye(4)
    for k in range(1, _BLOCK):
        powers[k] = m @ powers[k - 1]
    m_block = m @ powers[-1]
    state = np.array([0.0, 1.0, 0.0, 0.0])
    blocks = []
    steps = 0
    while True:
        block = powers @ state  # (_BLOCK, 4)
        blocks.append(block)
        steps += _BLOCK
        state = m_block @ state
        surv = state[0] + state[1]
        if surv < _SURVIVAL_FLOOR:
            break
        if steps > _MAX_STEPS:
            raise RuntimeError("waiting-time distribution did not decay; drive too weak "
                               "for the chosen step")
    states = np.concatenate(blocks + [state[None, :]])
    survival = states[:, 0] + states[:, 1]
    cdf = np.maximum.accumulate(np.clip(1.0 - survival, 0.0, 1.0))
    t = np.arange(len(cdf)) * dt
    # hazard at the end of the grid continues the tail exponentially
    tail_rate = states[-1, 0] / e.t1 / max(survival[-1], 1e-300)
    if not tail_rate > 0:
        tail_rate = 1.0 / (t[-1] or 1.0)
    return WaitingTimeDistribution(t, cdf, float(tail_rate))


def _chunk_waits(wtd, seed, k):
    return wtd.sample(substream(seed, "emission", k).random(CHUNK))


def simulate_emission_times(cfg: SimConfig, threads: Optional[int] = None) -> np.ndarray:
    """Emission times [ps, float] on ``[0, duration)``, emitter starting in
    the ground state at t = 0.

    Waiting times are drawn in fixed chunks of ``CHUNK`` samples, chunk ``k``
    from sub-stream ``(seed, "emission", k)``; the result does not depend on
    how chunks are spread over threads.
    """
    dt = cfg.step()
    if cfg.drive.rabi_sq == 0:
        warnings.warn("zero drive: no emission expected, stream is empty", RuntimeWarning)
        return np.zeros(0)
    wtd = waiting_time_distribution(cfg.emitter, cfg.drive, dt)
    mean_wait = wtd.mean()
    if cfg.duration < mean_wait:
        warnings.warn(f"duration {cfg.duration} ps is shorter than the mean waiting "
                      f"time {mean_wait:.4g} ps; expect few or no events", RuntimeWarning)
    threads = threads or max_threads()
    seed = int(cfg.rng_seed)
    pieces = []
    offset = 0.0
    k = 0
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        while offset < cfg.duration:
            need = (cfg.duration - offset) / mean_wait / CHUNK
            batch = max(1, min(threads, int(math.ceil(need * 1.05))))
            idx = range(k, k + batch)
            if pool is None:
                waits = [_chunk_waits(wtd, seed, i) for i in idx]
            else:
                waits = list(pool.map(lambda i: _chunk_waits(wtd, seed, i), idx))
            for w in waits:
                times = offset + np.cumsum(w)
                offset = times[-1]
                pieces.append(times)
                if offset >= cfg.duration:
                    break
            k += batch
    finally:
        if pool is not None:
            pool.shutdown()
    times = np.concatenate(pieces)
    return times[times < cfg.duration]


def _poisson_times(rate, duration, rng):
    n = rng.poisson(rate * duration)
    return np.sort(rng.random(n) * duration)


def route_and_background(emissions, ch: ChannelModel, duration, seed) -> TimestampStream:
    """Bernoulli routing of each emission into the mode channel (probability
    ``mode_fraction``) or emitter channel, plus Poisson background per channel."""
    emissions = np.asarray(emissions, dtype=float)
    to_mode = substream(seed, "routing").random(len(emissions)) < ch.mode_fraction
    per = {
        EMITTER: [emissions[~to_mode]],
        MODE: [emissions[to_mode]],
    }
    for c, rate in sorted(ch.background_rates.items()):
        if rate > 0:
            per.setdefault(int(c), []).append(
                _poisson_times(rate, duration, substream(seed, "background", int(c))))
    merged = {}
    for c, parts in per.items():
        t = np.sort(np.concatenate(parts))
        merged[c] = np.rint(t).astype(np.int64)
    return TimestampStream.from_channels(
        merged, duration,
        {"mode_fraction": ch.mode_fraction,
         "background_rates": {int(k): v for k, v in ch.background_rates.items()}})


def apply_detector(times, det: DetectorModel, rng: np.random.Generator) -> np.ndarray:
    """Efficiency thinning, Gaussian jitter (rounded to ps), dead-time pruning."""
    t = np.asarray(times, dtype=np.int64)
    keep = rng.random(len(t)) < det.efficiency if det.efficiency < 1 else np.ones(len(t), bool)
    t = t[keep]
    if det.jitter_fwhm > 0:
        jitter = rng.normal(0.0, fwhm_to_sigma(det.jitter_fwhm), len(t))
        t = np.sort(np.rint(t + jitter).astype(np.int64), kind="stable")
    if det.dead_time > 0 and len(t):
        t = _prune_dead_time(t, det.dead_time)
    return t


def _prune_dead_time(t: np.ndarray, dead: float) -> np.ndarray:
    keep = np.zeros(len(t), bool)
    last = None
    tl = t.tolist()
    for i, ti in enumerate(tl):
        if last is None or ti - last >= dead:
            keep[i] = True
            last = ti
    return t[keep]


def split_photons(times, dets, rng_split, det_rngs):
    """Send each photon to one of ``dets`` uniformly, then apply each detector."""
    times = np.asarray(times, dtype=np.int64)
    which = rng_split.integers(0, len(dets), len(times))
    return [apply_detector(times[which == i], det, r)
            for i, (det, r) in enumerate(zip(dets, det_rngs))]


def hbt_split(stream, det_a: DetectorModel, det_b: DetectorModel, seed,
              channels=(0, 1)):
    """50/50 beam splitter onto two detectors.

    ``stream`` is a single-channel TimestampStream or an array of times.
    Returns two single-channel streams with ids ``channels``.
    """
    if isinstance(stream, TimestampStream):
        times, duration = stream.times, stream.duration
    else:
        times = np.asarray(stream, dtype=np.int64)
        duration = float(times[-1] + 1) if len(times) else 0.0
    a, b = split_photons(times, [det_a, det_b], substream(seed, "split", "hbt"),
                         [substream(seed, "detector", channels[0]),
                          substream(seed, "detector", channels[1])])
    return (TimestampStream.from_channels({channels[0]: a}, duration),
            TimestampStream.from_channels({channels[1]: b}, duration))


def detect(routed: TimestampStream, detectors: Dict[int, DetectorModel], seed) -> TimestampStream:
    """Apply a detector layout to a routed stream.

    Detectors sharing a source channel sit behind an equal-ratio splitter
    (two of them form an HBT pair). An empty layout passes the routed
    channels through as ideal detectors.
    """
    if not detectors:
        return routed
    by_source: Dict[str, list] = {}
    for cid, det in sorted(detectors.items()):
        by_source.setdefault(det.source, []).append(cid)
    out = {}
    for source, ids in sorted(by_source.items()):
        times = routed.channel(SOURCES[source])
        dets = [detectors[i] for i in ids]
        res = split_photons(times, dets, substream(seed, "split", source),
                            [substream(seed, "detector", i) for i in ids])
        out.update(dict(zip(ids, res)))
    return TimestampStream.from_channels(out, routed.duration, dict(routed.metadata))


def simulate_stream(cfg: SimConfig, threads: Optional[int] = None) -> TimestampStream:
    """Full chain: emission, routing/background, detection."""
    emissions = simulate_emission_times(cfg, threads)
    routed = route_and_background(emissions, cfg.channels, cfg.duration, cfg.rng_seed)
    stream = detect(routed, cfg.detectors, cfg.rng_seed)
    stream.metadata.update({
        "seed": int(cfg.rng_seed),
        "n_emissions": int(len(emissions)),
        "saturation_parameter": saturation_parameter(cfg.emitter, cfg.drive),
        "counts": stream.counts(),
    })
    return stream
