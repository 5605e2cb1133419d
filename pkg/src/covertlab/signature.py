"""Signature builder: per-record <alpha, beta, context> triples.

alpha is the block's Kolmogorov-Smirnov distance between the observed
inter-arrival intervals and an overt reference, beta the per-block z-scored
interval, and context the resource usage (%) of the sample closing the
interval.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .model import Block, RecordSet, Trace

MIN_KS_SAMPLE = 5
MIN_REFERENCE = 30


def intervals(timestamps) -> np.ndarray:
    """Inter-arrival intervals in seconds from millisecond timestamps."""
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.ndim != 1 or ts.size < 2:
        raise ValueError("need at least 2 timestamps")
    d = np.diff(ts)
    if np.any(d <= 0):
        i = int(np.flatnonzero(d <= 0)[0])
        raise ValueError(f"timestamps not strictly increasing at index {i + 1}")
    return d / 1000.0


def zscore(x) -> np.ndarray:
    """Standardise with the sample (n-1) deviation; a constant series maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("zscore needs at least 2 values")
    sd = x.std(ddof=1)
    # near-constant series can underflow to sd == 0 without being exactly constant
    if not sd > 0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


class ReferenceMode(str, enum.Enum):
    TWO_SAMPLE_OVERT = "two_sample_overt"
    FITTED_GAUSSIAN = "fitted_gaussian"


@dataclass(frozen=True, eq=False)
class ReferenceDistribution:
    mode: ReferenceMode
    sample: np.ndarray | None = None
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ReferenceMode(self.mode))
        if self.mode is ReferenceMode.TWO_SAMPLE_OVERT:
            if self.sample is None:
                raise ValueError("two-sample reference needs a sample")
            s = np.sort(np.asarray(self.sample, dtype=np.float64).ravel())
            if s.size < MIN_REFERENCE:
                raise ValueError(f"reference sample needs >= {MIN_REFERENCE} points, got {s.size}")
            if not np.all(np.isfinite(s)):
                raise ValueError("reference sample must be finite")
            s.setflags(write=False)
            object.__setattr__(self, "sample", s)
        elif not (self.std > 0 and math.isfinite(self.mean)):
            raise ValueError("fitted reference needs finite mean and std > 0")

    @classmethod
    def two_sample(cls, sample) -> "ReferenceDistribution":
        return cls(ReferenceMode.TWO_SAMPLE_OVERT, sample=np.asarray(sample, dtype=np.float64))

    @classmethod
    def gaussian(cls, mean: float, std: float) -> "ReferenceDistribution":
        return cls(ReferenceMode.FITTED_GAUSSIAN, mean=float(mean), std=float(std))

    @classmethod
    def fit_gaussian(cls, sample) -> "ReferenceDistribution":
        s = np.asarray(sample, dtype=np.float64)
        if s.size < MIN_REFERENCE:
            raise ValueError(f"reference sample needs >= {MIN_REFERENCE} points, got {s.size}")
        return cls.gaussian(s.mean(), s.std(ddof=1))

    @classmethod
    def from_trace(cls, trace: Trace, mode: ReferenceMode | str = ReferenceMode.TWO_SAMPLE_OVERT):
        x = intervals(trace.timestamps)
        if ReferenceMode(mode) is ReferenceMode.FITTED_GAUSSIAN:
            return cls.fit_gaussian(x)
        return cls.two_sample(x)


@dataclass(frozen=True)
class KsResult:
    statistic: float
    reject: bool
    critical_value: float


def ks_critical_coefficient(significance: float) -> float:
    """Asymptotic c(a) with P(sup|B| > c) = a; c(0.05) ~ 1.358."""
    return math.sqrt(-0.5 * math.log(significance / 2.0))


def ks_two_sample(a, b) -> float:
    """sup_x |F_a(x) - F_b(x)| evaluated exactly at every pooled point."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_one_sample_gaussian(a, mean: float, std: float) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    n = a.size
    if n == 0:
        raise ValueError("sample must be non-empty")
    cdf = ndtr((a - mean) / std)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))


def ks_statistic(sample_a, reference: ReferenceDistribution, significance: float = 0.05) -> KsResult:
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    if a.size < MIN_KS_SAMPLE:
        raise ValueError(f"K-S sample needs >= {MIN_KS_SAMPLE} points, got {a.size}")
    if not 0.0 < significance < 1.0:
        raise ValueError("significance must lie in (0, 1)")
    c = ks_critical_coefficient(significance)
    n = a.size
    if reference.mode is ReferenceMode.TWO_SAMPLE_OVERT:
        m = reference.sample.size
        d = ks_two_sample(a, reference.sample)
        crit = c * math.sqrt((n + m) / (n * m))
    else:
        d = ks_one_sample_gaussian(a, reference.mean, reference.std)
        crit = c / math.sqrt(n)
    d = min(max(d, 0.0), 1.0)
    return KsResult(d, d > crit, crit)


@dataclass(frozen=True)
class SignatureConfig:
    block_size: int = 5000
    binarize_ks: bool = False
    significance: float = 0.05
    keep_partial: bool = True

    def __post_init__(self) -> None:
        if self.block_size < MIN_KS_SAMPLE:
            raise ValueError(f"block_size must be >= {MIN_KS_SAMPLE}")
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must lie in (0, 1)")


def build_signature(
    trace: Trace,
    block_size: int,
    reference: ReferenceDistribution,
    cfg: SignatureConfig | None = None,
) -> list[Block]:
    """Cut a trace into blocks of ``block_size`` records and stamp each with its K-S score."""
    cfg = cfg or SignatureConfig(block_size=block_size)
    if block_size < MIN_KS_SAMPLE:
        raise ValueError(f"block_size must be >= {MIN_KS_SAMPLE}")
    if len(trace) < block_size + 1:
        raise ValueError(f"trace has {len(trace)} samples; block size {block_size} needs at least {block_size + 1}")
    x = intervals(trace.timestamps)
    ctx = trace.usage[1:]
    blocks = []
    for start in range(0, x.size, block_size):
        xb = x[start : start + block_size]
        if xb.size < block_size and (not cfg.keep_partial or xb.size < MIN_KS_SAMPLE):
            break
        ks = ks_statistic(xb, reference, cfg.significance)
        alpha = float(ks.reject) if cfg.binarize_ks else ks.statistic
        blocks.append(Block(alpha, zscore(xb), ctx[start : start + xb.size], trace.label, ks))
    return blocks


def balance(records: RecordSet, n: int, seed: int) -> RecordSet:
    """Take the first n/2 covert and first n/2 overt records.

    A class with fewer than n/2 members keeps all of them and is topped up by
    seeded resampling with replacement. Output is covert records then overt.
    """
    if n < 2 or n % 2:
        raise ValueError("n must be a positive even number")
    pos = np.flatnonzero(records.labels > 0)
    neg = np.flatnonzero(records.labels < 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("cannot balance: one class is absent")
    half = n // 2
    rng = np.random.default_rng(seed)

    def take(idx: np.ndarray) -> np.ndarray:
        if idx.size >= half:
            return idx[:half]
        extra = rng.choice(idx, size=half - idx.size, replace=True)
        return np.concatenate([idx, extra])

    return records.subset(np.concatenate([take(pos), take(neg)]))


def paired_training_set(
    overt_blocks: list[Block], covert_blocks: list[Block], n: int, seed: int
) -> RecordSet:
    """Pair the k-th overt and covert blocks and balance each pair to ``n`` records."""
    pairs = min(len(overt_blocks), len(covert_blocks))
    if pairs == 0:
        raise ValueError("need at least one overt and one covert block")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=pairs)
    parts = [
        balance(RecordSet.from_blocks([overt_blocks[k], covert_blocks[k]]), n, int(seeds[k]))
        for k in range(pairs)
    ]
    return RecordSet.concat(parts)

