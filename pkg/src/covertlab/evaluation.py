"""Experiment harness: corpora, confusion matrices, noise robustness, Berk baseline."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import ChannelConfig, RotationSchedule, WorkloadProfile, encode, generate_overt
from .config import RunConfig, derive_seed, parse_floats
from .distributed import MergedModel, partition, train_distributed
from .model import BitStream, Block, Label, ResourceKind, Trace
from .signature import (
    ReferenceDistribution,
    ReferenceMode,
    SignatureConfig,
    build_signature,
    intervals,
    paired_training_set,
)
from .svm import KernelParams, TrainedModel

log = logging.getLogger(__name__)

WEEK_PROFILES = (WorkloadProfile.STEADY, WorkloadProfile.BURSTY, WorkloadProfile.DIURNAL)
OVERT_MEAN_INTERVAL = (0.8, 2.5)
REFERENCE_MEAN_INTERVAL = 1.5


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with overt as the negative and covert as the positive class."""

    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self) -> None:
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_labels(cls, truth, predicted) -> "ConfusionMatrix":
        t = np.asarray(truth) > 0
        p = np.asarray(predicted) > 0
        return cls(
            int(np.count_nonzero(~t & ~p)),
            int(np.count_nonzero(~t & p)),
            int(np.count_nonzero(t & ~p)),
            int(np.count_nonzero(t & p)),
        )

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @staticmethod
    def _row(a: int, b: int) -> tuple[float, float]:
        n = a + b
        if n == 0:
            return (math.nan, math.nan)
        return (100.0 * a / n, 100.0 * b / n)

    @property
    def overt_row(self) -> tuple[float, float]:
        """Percent of overt items predicted (overt, covert)."""
        return self._row(self.tn, self.fp)

    @property
    def covert_row(self) -> tuple[float, float]:
        """Percent of covert items predicted (overt, covert)."""
        return self._row(self.fn, self.tp)

    @property
    def sensitivity(self) -> float:
        return self.covert_row[1]

    @property
    def specificity(self) -> float:
        return self.overt_row[0]

    @property
    def accuracy(self) -> float:
        return 100.0 * (self.tn + self.tp) / self.total if self.total else math.nan

    @property
    def error_rate(self) -> float:
        return 100.0 - self.accuracy


def block_verdicts(model: TrainedModel, blocks: Sequence[Block]) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote per block: (+1/-1 verdicts, covert vote fraction)."""
    if not blocks:
        raise ValueError("no blocks to classify")
    X = np.vstack([b.features() for b in blocks])
    votes = model.predict_labels(X) > 0
    bounds = np.cumsum([0] + [len(b) for b in blocks])
    frac = np.array([votes[bounds[k] : bounds[k + 1]].mean() for k in range(len(blocks))])
    # a tie stays overt
    return np.where(frac > 0.5, 1, -1), frac


def evaluate(
    model: TrainedModel,
    blocks: Sequence[Block],
    block_size: int | None = None,
    vote: str = "block",
) -> ConfusionMatrix:
    """Confusion matrix over test blocks (majority vote) or individual records."""
    if not blocks:
        raise ValueError("empty test set")
    if block_size is not None and any(len(b) > block_size for b in blocks):
        raise ValueError(f"blocks larger than block_size={block_size}")
    if vote == "block":
        verdicts, _ = block_verdicts(model, blocks)
        return ConfusionMatrix.from_labels([b.label.sign for b in blocks], verdicts)
    if vote == "record":
        X = np.vstack([b.features() for b in blocks])
        truth = np.concatenate([np.full(len(b), b.label.sign) for b in blocks])
        return ConfusionMatrix.from_labels(truth, model.predict_labels(X))
    raise ValueError(f"unknown vote mode {vote!r}")


# --- noise ----------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    fraction: float = 0.05
    target: str = "latency"  # or "intervals"
    seed: int = 0
    scale: str = "std"  # noise std relative to the target's std, or to |mean|

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError("noise fraction must lie in [0, 1)")
        if self.target not in ("latency", "intervals"):
            raise ValueError("noise target must be 'latency' or 'intervals'")
        if self.scale not in ("std", "mean"):
            raise ValueError("noise scale must be 'std' or 'mean'")


@dataclass(frozen=True, eq=False)
class NoisyResult:
    value: Trace | np.ndarray
    snr_db: float
    noise_std: float


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    ps = float(np.var(signal))
    pn = float(np.var(noise))
    if pn == 0:
        return math.inf
    return 10.0 * math.log10(ps / pn)


def _perturb(x: np.ndarray, spec: NoiseSpec) -> tuple[np.ndarray, np.ndarray, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2 or np.all(x == x[0]):
        raise ValueError("target has zero variance; SNR is undefined")
    ref = float(np.std(x)) if spec.scale == "std" else abs(float(np.mean(x)))
    sd = spec.fraction * ref
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, sd, x.size) if sd > 0 else np.zeros(x.size)
    return x + noise, noise, sd


def add_noise(target: Trace | np.ndarray, spec: NoiseSpec) -> NoisyResult:
    """Add zero-mean Gaussian noise to a series, or to a trace's latency / intervals.

    The input is never modified. Perturbed latencies are floored at 0 and
    perturbed intervals at 1 ms so the result is still a valid trace.
    """
    if not isinstance(target, Trace):
        noisy, noise, sd = _perturb(target, spec)
        return NoisyResult(noisy, snr_db(np.asarray(target, dtype=np.float64), noise), sd)
    if spec.fraction == 0:
        return NoisyResult(target.replace(), math.inf, 0.0)
    if spec.target == "latency":
        noisy, noise, sd = _perturb(target.latency, spec)
        out = target.replace(latency=np.round(np.maximum(noisy, 0.0), 3))
        return NoisyResult(out, snr_db(target.latency, noise), sd)
    if len(target) < 3:
        raise ValueError("interval noise needs at least 3 samples")
    gaps = np.diff(target.timestamps).astype(np.float64)
    noisy, noise, sd = _perturb(gaps, spec)
    new_gaps = np.maximum(np.round(noisy), 1).astype(np.int64)
    ts = target.timestamps[0] + np.concatenate(([0], np.cumsum(new_gaps)))
    return NoisyResult(target.replace(timestamps=ts), snr_db(gaps, noise), sd)


# --- Berk baseline ----------------------------------------------------------------

def berk_probability(x_mean: float, x_total: float) -> float:
    """P_cc = (1 - X_mean) / X_total."""
    if x_total <= 0:
        raise ValueError("X_total must be positive")
    return (1.0 - x_mean) / x_total


def berk_score(interval_series) -> float:
    """Berk score of one observation window; X_mean is the mean gap over the largest gap."""
    x = np.asarray(interval_series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("need at least one interval")
    top = float(x.max())
    x_mean = float(x.mean()) / top if top > 0 else 1.0
    return berk_probability(x_mean, x.size)


def roc_points(scores, truth) -> list[tuple[float, float]]:
    """(false-positive rate, true-positive rate) for every threshold, higher score = covert."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth) > 0
    pos, neg = int(t.sum()), int((~t).sum())
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs both classes")
    pts = [(0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        hit = s >= thr
        pts.append((float(np.count_nonzero(hit & ~t) / neg), float(np.count_nonzero(hit & t) / pos)))
    return pts


def roc_auc(points: list[tuple[float, float]]) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


# --- corpora ----------------------------------------------------------------------

def channel_config(cfg: RunConfig, kind: ResourceKind | str, seed: int, jitter_std: float | None = None) -> ChannelConfig:
    c = cfg.channel
    return ChannelConfig(
        resource_kind=ResourceKind(kind),
        bit_interval=c.bit_interval,
        value_high=c.value_high,
        value_low=c.value_low,
        base_latency=c.base_latency,
        contended_latency=c.contended_latency,
        jitter_std=c.jitter_std if jitter_std is None else jitter_std,
        seed=seed,
        tick=c.tick,
        usage_std=c.usage_std,
        timing_jitter_ms=c.timing_jitter_ms,
        run_limit=c.run_limit,
    )


def rotation_schedule(cfg: RunConfig) -> RotationSchedule:
    return RotationSchedule(parse_floats(cfg.channel.rotation), cfg.channel.dwell)


def overt_trace(n_samples: int, profile, seed: int, kind, mean_interval: float, base_latency: float = 100.0) -> Trace:
    """Overt trace with exactly ``n_samples`` samples."""
    duration = n_samples * mean_interval * 1.5 + 60.0
    while True:
        tr = generate_overt(duration, profile, seed, kind, mean_interval=mean_interval, base_latency=base_latency)
        if len(tr) >= n_samples:
            return tr.head(n_samples)
        duration *= 2


def overt_week(n_samples: int, seed: int, kind, session: int = 1000, base_latency: float = 100.0) -> Trace:
    """Overt log made of back-to-back sessions, each with its own profile and request rate."""
    rng = np.random.default_rng(seed)
    parts: list[Trace] = []
    offset = 0
    remaining = n_samples
    while remaining > 0:
        n = min(session, remaining)
        profile = WEEK_PROFILES[int(rng.integers(len(WEEK_PROFILES)))]
        mean_interval = float(rng.uniform(*OVERT_MEAN_INTERVAL))
        tr = overt_trace(n, profile, int(rng.integers(2**63 - 1)), kind, mean_interval, base_latency)
        gap = int(round(1000 * rng.lognormal(np.log(mean_interval), 0.3))) if parts else 0
        parts.append(tr.replace(timestamps=tr.timestamps + offset + max(gap, 1) * bool(parts)))
        offset = int(parts[-1].timestamps[-1])
        remaining -= n
    return Trace(
        np.concatenate([p.timestamps for p in parts]),
        np.concatenate([p.process_ids for p in parts]),
        np.concatenate([p.kinds for p in parts]),
        np.concatenate([p.usage for p in parts]),
        np.concatenate([p.latency for p in parts]),
        Label.OVERT,
        None,
        seed,
    )


def covert_trace(n_samples: int, cfg: ChannelConfig, sched: RotationSchedule | None, payload_seed: int) -> Trace:
    """Covert trace with exactly ``n_samples`` samples carrying a random payload."""
    per_bit = max(1, int(round(min(sched.intervals if sched else (cfg.bit_interval,)) / cfg.tick)))
    bits = BitStream.random(n_samples // per_bit + 1, payload_seed)
    return encode(bits, cfg, sched).head(n_samples)


def reference_trace(cfg: RunConfig, kind: ResourceKind | str) -> Trace:
    """Held-out overt trace covering every workload profile, used as the K-S reference."""
    kind = ResourceKind(kind)
    per_profile = max(cfg.eval.reference_samples // len(WEEK_PROFILES), 31)
    parts = [
        overt_trace(per_profile + 1, p, derive_seed(cfg.seed, kind.value, "reference", p.value), kind,
                    REFERENCE_MEAN_INTERVAL, cfg.channel.base_latency)
        for p in WEEK_PROFILES
    ]
    ts, offset = [], 0
    for k, tr in enumerate(parts):
        shifted = tr.timestamps + offset + (int(REFERENCE_MEAN_INTERVAL * 1000) if k else 0)
        ts.append(shifted)
        offset = int(shifted[-1])
    return Trace(
        np.concatenate(ts),
        np.concatenate([p.process_ids for p in parts]),
        np.concatenate([p.kinds for p in parts]),
        np.concatenate([p.usage for p in parts]),
        np.concatenate([p.latency for p in parts]),
        Label.OVERT,
        None,
        cfg.seed,
    )


@dataclass(eq=False)
class ChannelCorpus:
    kind: ResourceKind
    reference: ReferenceDistribution
    train_overt: list[Trace]
    train_covert: list[Trace]
    test_overt: list[Trace]
    test_covert: list[Trace]


def build_corpus(cfg: RunConfig, kind: ResourceKind | str) -> ChannelCorpus:
    """Training weeks, disjoint-seed test traces and a held-out overt reference for one channel."""
    kind = ResourceKind(kind)
    ev = cfg.eval
    master = cfg.seed
    sched = rotation_schedule(cfg)
    probe = channel_config(cfg, kind, 0)
    jitter = ev.jitter_fraction * probe.threshold_gap

    reference = ReferenceDistribution.from_trace(reference_trace(cfg, kind), cfg.signature.reference_mode)

    def overt_set(tag: str, count: int, total: int) -> list[Trace]:
        out = []
        for k in range(count):
            n = min(ev.samples_per_week, total - k * ev.samples_per_week) + 1
            out.append(overt_week(n, derive_seed(master, kind.value, tag, k), kind, ev.session_samples,
                                  cfg.channel.base_latency))
        return out

    def covert_set(tag: str, count: int, total: int) -> list[Trace]:
        out = []
        for k in range(count):
            n = min(ev.samples_per_week, total - k * ev.samples_per_week) + 1
            ch = channel_config(cfg, kind, derive_seed(master, kind.value, tag, k), jitter)
            out.append(covert_trace(n, ch, sched, derive_seed(master, kind.value, tag, "payload", k)))
        return out

    n_test = -(-ev.test_samples // ev.samples_per_week)
    train_total = ev.train_weeks * ev.samples_per_week
    return ChannelCorpus(
        kind,
        reference,
        overt_set("train-overt", ev.train_weeks, train_total),
        covert_set("train-covert", ev.train_weeks, train_total),
        overt_set("test-overt", n_test, ev.test_samples),
        covert_set("test-covert", n_test, ev.test_samples),
    )


def featurize(traces: Sequence[Trace], block_size: int, reference: ReferenceDistribution, cfg: RunConfig) -> list[Block]:
    sig = SignatureConfig(block_size, cfg.signature.binarize_ks, cfg.signature.significance, keep_partial=False)
    blocks: list[Block] = []
    for tr in traces:
        blocks.extend(build_signature(tr, block_size, reference, sig))
    return blocks


def kernel_params(cfg: RunConfig) -> KernelParams:
    s = cfg.svm
    return KernelParams(s.gamma or None, s.box_constraint, s.tolerance, s.max_passes)


def train_block_model(corpus: ChannelCorpus, block_size: int, cfg: RunConfig) -> tuple[MergedModel, int]:
    """Balanced paired training set at ``block_size``, split over the configured workers."""
    overt = featurize(corpus.train_overt, block_size, corpus.reference, cfg)
    covert = featurize(corpus.train_covert, block_size, corpus.reference, cfg)
    seed = derive_seed(cfg.seed, corpus.kind.value, block_size, "balance")
    records = paired_training_set(overt, covert, block_size, seed)
    m = min(cfg.distributed.workers, len(records) // 2)
    parts = partition(records, m, derive_seed(cfg.seed, "partition"))
    model = train_distributed(parts, kernel_params(cfg), derive_seed(cfg.seed, "svm", cfg.svm.seed))
    return model, len(records)


# --- experiment ---------------------------------------------------------------------

@dataclass(eq=False)
class CellResult:
    channel: str
    block_size: int
    matrix: ConfusionMatrix
    record_matrix: ConfusionMatrix
    train_records: int
    n_support: int
    berk_auc: float
    berk_roc: list[tuple[float, float]]
    noise_clean_error: float | None = None
    noise_errors: list[float] = field(default_factory=list)
    noise_snr_db: float | None = None

    @property
    def noise_delta(self) -> float | None:
        if self.noise_clean_error is None or not self.noise_errors:
            return None
        return float(np.mean(self.noise_errors)) - self.noise_clean_error


@dataclass(eq=False)
class EvalReport:
    seed: int
    vote: str
    noise: NoiseSpec | None
    cells: list[CellResult]

    def cell(self, channel: str, block_size: int) -> CellResult:
        for c in self.cells:
            if c.channel == channel and c.block_size == block_size:
                return c
        raise KeyError((channel, block_size))


def _berk(traces: Sequence[Trace], block_size: int) -> tuple[np.ndarray, np.ndarray]:
    scores, truth = [], []
    for tr in traces:
        x = intervals(tr.timestamps)
        for s in range(0, x.size - block_size + 1, block_size):
            scores.append(berk_score(x[s : s + block_size]))
            truth.append(tr.label.sign)
    return np.array(scores), np.array(truth)


def _subset(traces: list[Trace], total: int, per_trace: int) -> list[Trace]:
    return traces[: max(1, -(-total // per_trace))]


def run_experiment(cfg: RunConfig) -> EvalReport:
    """All channel x block-size cells; deterministic in ``cfg.seed``."""
    ev = cfg.eval
    channels = [ResourceKind(c.strip()) for c in ev.channels.split(",")]
    sizes = [int(s) for s in ev.block_sizes.split(",")]
    noise = NoiseSpec(ev.noise, ev.noise_target, 0, ev.noise_scale) if ev.noise > 0 else None
    cells = []
    for kind in channels:
        try:
            corpus = build_corpus(cfg, kind)
        except Exception as exc:
            raise RuntimeError(f"corpus stage ({kind.value}): {exc}") from exc
        test = corpus.test_overt + corpus.test_covert
        noisy_sets: list[tuple[list[Trace], float]] = []
        if noise is not None:
            n_noise = ev.noise_test_samples or ev.test_samples
            clean_subset = (_subset(corpus.test_overt, n_noise, ev.samples_per_week)
                            + _subset(corpus.test_covert, n_noise, ev.samples_per_week))
            for trial in range(ev.noise_trials):
                traces, snrs = [], []
                for k, tr in enumerate(clean_subset):
                    spec = NoiseSpec(noise.fraction, noise.target, derive_seed(cfg.seed, kind.value, "noise", trial, k),
                                     noise.scale)
                    res = add_noise(tr, spec)
                    traces.append(res.value)
                    snrs.append(res.snr_db)
                noisy_sets.append((traces, float(np.mean(snrs))))
        for n in sizes:
            stage = f"{kind.value}/N={n}"
            try:
                model, n_train = train_block_model(corpus, n, cfg)
                blocks = featurize(test, n, corpus.reference, cfg)
                matrix = evaluate(model, blocks, n, ev.vote)
                record_matrix = evaluate(model, blocks, n, "record")
                scores, truth = _berk(test, n)
                roc = roc_points(scores, truth)
                cell = CellResult(kind.value, n, matrix, record_matrix, n_train, model.n_support, roc_auc(roc), roc)
                if noisy_sets:
                    clean_blocks = featurize(clean_subset, n, corpus.reference, cfg)
                    cell.noise_clean_error = evaluate(model, clean_blocks, n, ev.vote).error_rate
                    for traces, snr in noisy_sets:
                        noisy_blocks = featurize(traces, n, corpus.reference, cfg)
                        cell.noise_errors.append(evaluate(model, noisy_blocks, n, ev.vote).error_rate)
                    cell.noise_snr_db = float(np.mean([snr for _, snr in noisy_sets]))
            except Exception as exc:
                raise RuntimeError(f"stage {stage}: {exc}") from exc
            log.info("%s: spec=%.2f sens=%.2f", stage, matrix.specificity, matrix.sensitivity)
            cells.append(cell)
    return EvalReport(cfg.seed, ev.vote, noise, cells)


# --- report files -------------------------------------------------------------------

def _f(x: float | None, digits: int = 2) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.{digits}f}"


CSV_COLUMNS = ["channel", "block_size", "tn", "fp", "fn", "tp", "sensitivity", "specificity", "accuracy",
               "record_sensitivity", "record_specificity", "berk_auc"]
NOISE_COLUMNS = ["noise_fraction", "noise_target", "noise_snr_db", "noise_clean_error", "noise_error", "noise_delta"]


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = CSV_COLUMNS + (NOISE_COLUMNS if report.noise else [])
    w.writerow(cols)
    for c in report.cells:
        m = c.matrix
        row = [c.channel, c.block_size, m.tn, m.fp, m.fn, m.tp, _f(m.sensitivity), _f(m.specificity),
               _f(m.accuracy), _f(c.record_matrix.sensitivity), _f(c.record_matrix.specificity), _f(c.berk_auc, 4)]
        if report.noise:
            row += [_f(report.noise.fraction, 4), report.noise.target, _f(c.noise_snr_db), _f(c.noise_clean_error),
                    _f(float(np.mean(c.noise_errors)) if c.noise_errors else None), _f(c.noise_delta)]
        w.writerow(row)
    return buf.getvalue()


def report_text(report: EvalReport) -> str:
    lines = [
        "covert timing channel detection report",
        f"master seed: {report.seed}",
        f"decision unit: {report.vote}",
        "",
    ]
    for c in report.cells:
        m = c.matrix
        lines += [
            f"[{c.channel}] block size N={c.block_size}  "
            f"(train records {c.train_records}, support vectors {c.n_support}, test blocks {m.total})",
            "  true\\pred      overt   covert",
            f"  overt       {m.overt_row[0]:7.2f}  {m.overt_row[1]:7.2f}",
            f"  covert      {m.covert_row[0]:7.2f}  {m.covert_row[1]:7.2f}",
            f"  sensitivity {m.sensitivity:.2f}%  specificity {m.specificity:.2f}%  accuracy {m.accuracy:.2f}%",
            f"  record level: sensitivity {c.record_matrix.sensitivity:.2f}%  "
            f"specificity {c.record_matrix.specificity:.2f}%",
            f"  berk baseline AUC {c.berk_auc:.4f}; ROC (fpr, tpr): "
            + " ".join(f"({x:.3f},{y:.3f})" for x, y in _thin(c.berk_roc)),
        ]
        if report.noise and c.noise_delta is not None:
            lines.append(
                f"  noise {report.noise.fraction:.2%} on {report.noise.target} (SNR {c.noise_snr_db:.2f} dB): "
                f"error {c.noise_clean_error:.2f}% -> {np.mean(c.noise_errors):.2f}% "
                f"(delta {c.noise_delta:+.2f} pp over {len(c.noise_errors)} trials)"
            )
        lines.append("")
    return "\n".join(lines)


def _thin(points: list[tuple[float, float]], k: int = 11) -> list[tuple[float, float]]:
    if len(points) <= k:
        return points
    idx = np.unique(np.linspace(0, len(points) - 1, k).round().astype(int))
    return [points[i] for i in idx]


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt, csv_path = out / "report.txt", out / "report.csv"
    txt.write_text(report_text(report), encoding="utf-8")
    csv_path.write_text(report_csv(report), encoding="utf-8")
    return txt, csv_path


__all__ = [
    "ConfusionMatrix",
    "EvalReport",
    "NoiseSpec",
    "add_noise",
    "berk_probability",
    "berk_score",
    "build_corpus",
    "evaluate",
    "run_experiment",
    "write_report",
]
