"""Covert timing channel senders/receivers and an overt workload generator.

Timing is modelled at trace level: a sender holds one value per bit epoch
(CPU load, or the access latency a co-resident receiver would measure) and
one sample is logged per tick. Receivers are assumed clock-synchronised with
the sender, so they recompute the epoch layout from the shared schedule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import BitStream, Label, ResourceKind, Trace

MAX_CPU_UTILISATION = 0.95


class WorkloadProfile(str, enum.Enum):
    STEADY = "steady"
    BURSTY = "bursty"
    DIURNAL = "diurnal"


@dataclass(frozen=True)
class ChannelConfig:
    resource_kind: ResourceKind = ResourceKind.CPU
    bit_interval: float = 10.0
    value_high: float = 80.0
    value_low: float = 60.0
    base_latency: float = 100.0
    contended_latency: float = 300.0
    jitter_std: float = 0.0
    seed: int = 0
    threshold: float | None = None
    tick: float = 1.0
    usage_std: float = 2.0
    timing_jitter_ms: float = 0.0
    run_limit: int = 16
    process_id: str = "vm1"

    def __post_init__(self) -> None:
        object.__setattr__(self, "resource_kind", ResourceKind(self.resource_kind))
        gap = self.value_high - self.value_low
        if not 15.0 <= gap <= 25.0:
            raise ValueError(f"value_high - value_low must be about 20 points (15..25), got {gap:g}")
        if not (0 <= self.value_low and self.value_high <= 100):
            raise ValueError("value_high/value_low must lie in [0, 100]")
        if self.contended_latency <= self.base_latency:
            raise ValueError("contended_latency must exceed base_latency")
        if self.base_latency < 0:
            raise ValueError("base_latency must be non-negative")
        if self.bit_interval <= 0 or self.tick <= 0:
            raise ValueError("bit_interval and tick must be positive")
        if self.jitter_std < 0 or self.usage_std < 0 or self.timing_jitter_ms < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.run_limit < 1:
            raise ValueError("run_limit must be >= 1")

    @property
    def decode_threshold(self) -> float:
        """Receiver threshold in the channel's measured unit."""
        if self.resource_kind is ResourceKind.CPU:
            return (self.value_high + self.value_low) / 2
        if self.threshold is not None:
            return float(self.threshold)
        return (self.base_latency + self.contended_latency) / 2

    @property
    def threshold_gap(self) -> float:
        """Distance from the high level to the decode threshold."""
        if self.resource_kind is ResourceKind.CPU:
            return self.value_high - self.decode_threshold
        return self.contended_latency - self.decode_threshold


@dataclass(frozen=True)
class RotationSchedule:
    intervals: tuple[float, ...] = (7.0, 10.0, 20.0)
    dwell: float = 120.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "intervals", tuple(float(x) for x in self.intervals))
        if not self.intervals or any(x <= 0 for x in self.intervals):
            raise ValueError("rotation intervals must be positive")
        if self.dwell <= 0:
            raise ValueError("dwell must be positive")

    def interval_at(self, t: float) -> float:
        return self.intervals[int(t // self.dwell) % len(self.intervals)]


def epoch_layout(n_epochs: int, cfg: ChannelConfig, sched: RotationSchedule | None) -> tuple[np.ndarray, np.ndarray]:
    """Start times and tick counts of the first ``n_epochs`` bit epochs."""
    starts = np.empty(n_epochs)
    ticks = np.empty(n_epochs, dtype=np.int64)
    t = 0.0
    for k in range(n_epochs):
        duration = sched.interval_at(t) if sched is not None else cfg.bit_interval
        n = max(1, int(round(duration / cfg.tick)))
        starts[k] = t
        ticks[k] = n
        t += n * cfg.tick
    return starts, ticks


def _cpu_latency(usage: np.ndarray, base: float) -> np.ndarray:
    # run-queue wait grows like 1/(1 - utilisation)
    u = np.minimum(usage / 100.0, MAX_CPU_UTILISATION)
    return base / (1.0 - u)


def _encode(payload: BitStream, cfg: ChannelConfig, sched: RotationSchedule | None, kind: ResourceKind) -> Trace:
    if cfg.resource_kind is not kind:
        raise ValueError(f"config is for {cfg.resource_kind.value}, expected {kind.value}")
    if len(payload) == 0:
        raise ValueError("payload must not be empty")
    rng = np.random.default_rng(cfg.seed)
    starts, ticks = epoch_layout(len(payload), cfg, sched)
    bits = np.repeat(np.asarray(payload.bits), ticks)
    offsets = np.concatenate([np.arange(n) for n in ticks]) * cfg.tick
    times = np.repeat(starts, ticks) + offsets
    n = bits.size

    jitter = rng.normal(0.0, cfg.jitter_std, n) if cfg.jitter_std > 0 else np.zeros(n)
    level = np.where(bits == 1, cfg.value_high, cfg.value_low)
    if kind is ResourceKind.CPU:
        usage = level + jitter
    else:
        usage = level + (rng.normal(0.0, cfg.usage_std, n) if cfg.usage_std > 0 else 0.0)
    usage = np.round(np.clip(usage, 0.0, 100.0), 2)

    if kind is ResourceKind.CPU:
        latency = _cpu_latency(usage, cfg.base_latency)
    else:
        latency = np.where(bits == 1, cfg.contended_latency, cfg.base_latency) + jitter
    latency = np.round(np.maximum(latency, 0.0), 3)

    ms = times * 1000.0
    if cfg.timing_jitter_ms > 0:
        limit = 0.4 * cfg.tick * 1000.0
        ms = ms + np.clip(rng.normal(0.0, cfg.timing_jitter_ms, n), -limit, limit)
    timestamps = np.round(ms).astype(np.int64)
    if n > 1 and np.any(np.diff(timestamps) <= 0):
        raise ValueError("tick too small for millisecond timestamps")
    # first sample is the trace origin
    timestamps = np.maximum(timestamps, 0)

    return Trace(
        timestamps,
        np.full(n, cfg.process_id),
        np.full(n, kind.value),
        usage,
        latency,
        Label.COVERT,
        kind,
        cfg.seed,
    )


def encode_cpu(payload: BitStream, cfg: ChannelConfig, sched: RotationSchedule | None = None) -> Trace:
    """Sender raises CPU load to ``value_high`` for a 1 and pauses (``value_low``) for a 0."""
    return _encode(payload, cfg, sched, ResourceKind.CPU)


def encode_cache(payload: BitStream, cfg: ChannelConfig, sched: RotationSchedule | None = None) -> Trace:
    """Sender fills the shared cache for a 1, so the receiver sees contended latency."""
    return _encode(payload, cfg, sched, ResourceKind.CACHE)


def encode_membus(payload: BitStream, cfg: ChannelConfig, sched: RotationSchedule | None = None) -> Trace:
    """Sender locks the memory bus (atomic exchanges) for a 1, leaves it free for a 0."""
    return _encode(payload, cfg, sched, ResourceKind.MEMBUS)


def _epoch_means(trace: Trace, values: np.ndarray, cfg: ChannelConfig, sched: RotationSchedule | None) -> np.ndarray:
    if len(trace) == 0:
        raise ValueError("trace shorter than one epoch")
    seconds = trace.timestamps / 1000.0
    nominal = np.round(seconds / cfg.tick) * cfg.tick
    # upper bound on epochs needed: one per tick
    n_max = int(nominal[-1] / cfg.tick) + 2
    starts, ticks = epoch_layout(n_max, cfg, sched)
    ends = starts + ticks * cfg.tick
    if nominal[-1] < ends[0] - cfg.tick - 1e-9:
        raise ValueError("trace shorter than one epoch")
    idx = np.searchsorted(starts, nominal + 1e-9, side="right") - 1
    n_epochs = int(idx.max()) + 1
    sums = np.bincount(idx, weights=values, minlength=n_epochs)
    counts = np.bincount(idx, minlength=n_epochs)
    if np.any(counts == 0):
        raise ValueError("trace has an epoch with no samples (schedule mismatch?)")
    return sums / counts


def decode_cpu(trace: Trace, cfg: ChannelConfig, sched: RotationSchedule | None = None) -> BitStream:
    means = _epoch_means(trace, trace.usage, cfg, sched)
    mid = (cfg.value_high + cfg.value_low) / 2
    return BitStream(tuple(int(m > mid) for m in means))


def decode_cache(trace: Trace, cfg: ChannelConfig, sched: RotationSchedule | None = None) -> BitStream:
    means = _epoch_means(trace, trace.latency, cfg, sched)
    t1 = cfg.decode_threshold
    return BitStream(tuple(int(m > t1) for m in means))


def resync_points(bits: tuple[int, ...] | BitStream, run_limit: int) -> tuple[int, ...]:
    """Start index of every run of identical bits longer than ``run_limit``."""
    bits = tuple(bits)
    points = []
    start = 0
    for i in range(1, len(bits) + 1):
        if i == len(bits) or bits[i] != bits[start]:
            if i - start > run_limit:
                points.append(start)
            start = i
    return tuple(points)


def decode_membus(trace: Trace, cfg: ChannelConfig, sched: RotationSchedule | None = None) -> BitStream:
    """Decode on excess latency over the uncontended base.

    Runs of identical bits longer than ``cfg.run_limit`` are reported in
    ``BitStream.resync``: the sender was probably descheduled there.
    """
    means = _epoch_means(trace, trace.latency, cfg, sched)
    margin = cfg.decode_threshold - cfg.base_latency
    bits = tuple(int(m - cfg.base_latency > margin) for m in means)
    return BitStream(bits, resync=resync_points(bits, cfg.run_limit))


ENCODERS = {
    ResourceKind.CPU: encode_cpu,
    ResourceKind.CACHE: encode_cache,
    ResourceKind.MEMBUS: encode_membus,
}
DECODERS = {
    ResourceKind.CPU: decode_cpu,
    ResourceKind.CACHE: decode_cache,
    ResourceKind.MEMBUS: decode_membus,
}


def encode(payload: BitStream, cfg: ChannelConfig, sched: RotationSchedule | None = None) -> Trace:
    return ENCODERS[cfg.resource_kind](payload, cfg, sched)


def decode(trace: Trace, cfg: ChannelConfig, sched: RotationSchedule | None = None) -> BitStream:
    return DECODERS[cfg.resource_kind](trace, cfg, sched)


# --- overt traffic ------------------------------------------------------------

# (interval log-sigma, usage beta a, usage beta b)
_PROFILES = {
    WorkloadProfile.STEADY: (0.35, 6.0, 9.0),
    WorkloadProfile.BURSTY: (1.0, 2.0, 3.0),
    WorkloadProfile.DIURNAL: (0.45, 5.0, 7.0),
}


def overt_interval_params(profile: WorkloadProfile | str, mean_interval: float) -> tuple[float, float]:
    """(mu, sigma) of the log-normal interval law with the requested mean."""
    sigma = _PROFILES[WorkloadProfile(profile)][0]
    return math.log(mean_interval) - sigma**2 / 2, sigma


def generate_overt(
    duration: float,
    workload_profile: WorkloadProfile | str,
    seed: int,
    resource_kind: ResourceKind | str = ResourceKind.CPU,
    *,
    mean_interval: float = 1.5,
    base_latency: float = 100.0,
    diurnal_period: float = 86400.0,
    process_id: str = "vm2",
) -> Trace:
    """Innocuous workload: a log-normal renewal process with beta-distributed usage.

    The diurnal profile stretches intervals and lowers usage on a sinusoidal
    day cycle; bursty keeps the same mean interval with a heavier spread.
    """
    profile = WorkloadProfile(workload_profile)
    kind = ResourceKind(resource_kind)
    if duration < 0:
        raise ValueError("duration must be non-negative")
    rng = np.random.default_rng(seed)
    mu, sigma = overt_interval_params(profile, mean_interval)
    _, a, b = _PROFILES[profile]
    limit_ms = int(round(duration * 1000))

    times: list[np.ndarray] = []
    t = 0
    chunk = max(64, int(duration / mean_interval * 1.2) + 16)
    while t <= limit_ms and duration > 0:
        gaps = rng.lognormal(mu, sigma, chunk)
        if profile is WorkloadProfile.DIURNAL:
            # slow modulation: evaluate the day factor at the chunk's rough positions
            approx = t / 1000.0 + np.cumsum(gaps)
            gaps = gaps * (1.0 + 0.5 * np.sin(2 * np.pi * approx / diurnal_period))
        ms = np.maximum(np.round(gaps * 1000.0).astype(np.int64), 1)
        ts = t + np.concatenate(([0], np.cumsum(ms)[:-1]))
        times.append(ts)
        t = int(ts[-1] + ms[-1])
    timestamps = np.concatenate(times) if times else np.empty(0, dtype=np.int64)
    timestamps = timestamps[timestamps <= limit_ms] if duration > 0 else timestamps
    n = timestamps.size

    usage = rng.beta(a, b, n) * 100.0
    if profile is WorkloadProfile.DIURNAL:
        usage = usage * (1.0 - 0.3 * np.sin(2 * np.pi * (timestamps / 1000.0) / diurnal_period))
    usage = np.round(np.clip(usage, 0.0, 100.0), 2)
    if kind is ResourceKind.CPU:
        latency = _cpu_latency(usage, base_latency) * rng.lognormal(0.0, 0.1, n)
    else:
        latency = base_latency * rng.lognormal(0.1, 0.3, n)
    latency = np.round(latency, 3)

    return Trace(
        timestamps,
        np.full(n, process_id),
        np.full(n, kind.value),
        usage,
        latency,
        Label.OVERT,
        None,
        seed,
    )
