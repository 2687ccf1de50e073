"""Seeded synthetic vehicle-speed traces standing in for real CAN captures."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

SAMPLE_RATE_HZ = 260.0
HIGHWAY_SAMPLES = 274_487
URBAN_SAMPLES = 263_023

_KMH_PER_MPS = 3.6


@dataclass(frozen=True)
class DriveProfile:
    """Parameters of the speed random walk.

    Speed follows a piecewise target (cruise or stop phases) under bounded
    acceleration, with slow speed wander and sensor jitter on top. Every
    per-sample change is finally clipped to ``max_step_kmh``.
    """

    cruise_kmh: Tuple[float, float]
    slow_kmh: Tuple[float, float]
    slow_prob: float
    stop_prob: float
    segment_s: Tuple[float, float]
    stop_s: Tuple[float, float]
    accel_mps2: float
    decel_mps2: float
    wander_kmh: float
    jitter_kmh: float
    max_step_kmh: float
    start_kmh: float
    rate_hz: float = SAMPLE_RATE_HZ
    v_min: float = 0.0
    v_max: float = 160.0
    resolution_kmh: float = 0.01


HIGHWAY = DriveProfile(
    cruise_kmh=(95.0, 150.0), slow_kmh=(60.0, 90.0), slow_prob=0.15, stop_prob=0.0,
    segment_s=(15.0, 60.0), stop_s=(0.0, 0.0), accel_mps2=1.2, decel_mps2=1.8,
    wander_kmh=0.0002, jitter_kmh=0.02, max_step_kmh=2.0, start_kmh=110.0,
)

URBAN = DriveProfile(
    cruise_kmh=(25.0, 65.0), slow_kmh=(8.0, 25.0), slow_prob=0.25, stop_prob=0.35,
    segment_s=(4.0, 20.0), stop_s=(3.0, 25.0), accel_mps2=2.5, decel_mps2=4.0,
    wander_kmh=0.0003, jitter_kmh=0.04, max_step_kmh=6.0, start_kmh=0.0,
)

PROFILES = {"highway": HIGHWAY, "urban": URBAN}
SCENARIO_SAMPLES = {"highway": HIGHWAY_SAMPLES, "urban": URBAN_SAMPLES}


def profile(scenario: str, **overrides) -> DriveProfile:
    try:
        base = PROFILES[scenario]
    except KeyError:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {sorted(PROFILES)}") from None
    return replace(base, **overrides) if overrides else base


def _targets(p: DriveProfile, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-sample target speed built from random-length phases."""
    target = np.empty(n)
    i = 0
    while i < n:
        u = rng.random()
        if u < p.stop_prob:
            v, dur = 0.0, rng.uniform(*p.stop_s)
        elif u < p.stop_prob + p.slow_prob:
            v, dur = rng.uniform(*p.slow_kmh), rng.uniform(*p.segment_s)
        else:
            v, dur = rng.uniform(*p.cruise_kmh), rng.uniform(*p.segment_s)
        k = max(int(dur * p.rate_hz), 1)
        target[i:i + k] = v
        i += k
    return target


def gen_drive_trace(scenario: str, n_samples: int, seed: int, p: DriveProfile = None):
    """Return ``(timestamps, speeds)`` for a seeded drive at 260 Hz.

    Deterministic per ``(scenario, n_samples, seed)``; speeds stay in
    ``[v_min, v_max]`` and no step exceeds ``max_step_kmh``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    p = p or profile(scenario)
    rng = np.random.default_rng(seed)
    target = _targets(p, n_samples, rng)
    up = p.accel_mps2 * _KMH_PER_MPS / p.rate_hz
    down = p.decel_mps2 * _KMH_PER_MPS / p.rate_hz
    wander = rng.normal(0.0, p.wander_kmh, n_samples)
    jitter = rng.normal(0.0, p.jitter_kmh, n_samples)

    true = np.empty(n_samples)
    v = p.start_kmh
    drift = 0.0
    for k, (tgt, w) in enumerate(zip(target.tolist(), wander.tolist())):
        drift = 0.999 * drift + w
        dv = min(max(tgt - v, -down), up) + drift * (tgt > 0.0)
        v = min(max(v + dv, p.v_min), p.v_max)
        true[k] = v

    measured = np.where(true > 0.0, true + jitter, true)
    measured = np.round(measured / p.resolution_kmh) * p.resolution_kmh
    measured = np.clip(measured, p.v_min, p.v_max).tolist()
    # enforce the per-step bound on the measured signal
    out = np.empty(n_samples)
    prev = out[0] = measured[0]
    step = p.max_step_kmh
    for k in range(1, n_samples):
        prev = out[k] = min(max(measured[k], prev - step), prev + step)
    t = np.arange(n_samples) / p.rate_hz
    return t, out


def contaminate(values, seed: int, noise_kmh: float = 0.0, glitch_rate: float = 0.0,
                glitch_kmh: float = 5.0, v_range: Tuple[float, float] = (0.0, 160.0)) -> np.ndarray:
    """Add white sensor noise and sparse single-sample glitches to a trace.

    Glitch magnitudes are exponential with mean ``glitch_kmh`` and random sign.
    """
    rng = np.random.default_rng(seed)
    v = np.array(values, dtype=float, copy=True)
    n = v.size
    if noise_kmh > 0:
        v += rng.normal(0.0, noise_kmh, n)
    if glitch_rate > 0:
        hits = np.flatnonzero(rng.random(n) < glitch_rate)
        mag = rng.exponential(glitch_kmh, hits.size) * rng.choice((-1.0, 1.0), hits.size)
        v[hits] += mag
    return np.clip(v, *v_range)
