"""Shared data types and the trace / signature file formats.

Traces are stored column-wise (numpy arrays) because the signature and
training stages work on whole vectors; ``Trace.samples`` materialises the
per-row :class:`ResourceSample` view when it is needed.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class CovertLabError(Exception):
    """Base class for errors raised by this package."""


class TraceFormatError(CovertLabError, ValueError):
    """A trace file could not be parsed."""


class TraceValidationError(CovertLabError, ValueError):
    """Trace contents violate an invariant (ordering, ranges, labels)."""


class ResourceKind(str, enum.Enum):
    CPU = "cpu"
    CACHE = "cache"
    MEMBUS = "membus"


class Label(str, enum.Enum):
    OVERT = "overt"
    COVERT = "covert"

    @property
    def sign(self) -> int:
        # covert is the positive class
        return 1 if self is Label.COVERT else -1

    @classmethod
    def from_sign(cls, value: float) -> "Label":
        return cls.COVERT if value > 0 else cls.OVERT


@dataclass(frozen=True)
class ResourceSample:
    timestamp: int
    process_id: str
    resource_kind: ResourceKind
    usage: float
    latency: float


@dataclass(frozen=True)
class BitStream:
    """Secret payload bits.

    ``resync`` holds bit positions where a receiver suspected the sender was
    rescheduled; it is diagnostic only and ignored by equality.
    """

    bits: tuple[int, ...]
    resync: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self) -> Iterator[int]:
        return iter(self.bits)

    @classmethod
    def random(cls, n: int, seed: int) -> "BitStream":
        rng = np.random.default_rng(seed)
        return cls(tuple(int(b) for b in rng.integers(0, 2, size=n)))

    def errors(self, other: "BitStream") -> int:
        """Bit errors against ``other``; missing or extra bits count as errors."""
        n = min(len(self), len(other))
        a = np.asarray(self.bits[:n])
        b = np.asarray(other.bits[:n])
        return int(np.count_nonzero(a != b)) + abs(len(self) - len(other))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Trace:
    """An ordered, labelled sequence of resource samples."""

    __slots__ = ("timestamps", "process_ids", "kinds", "usage", "latency", "label", "channel", "seed")

    def __init__(
        self,
        timestamps: Sequence[int] | np.ndarray,
        process_ids: Sequence[str] | np.ndarray,
        kinds: Sequence[ResourceKind | str] | np.ndarray,
        usage: Sequence[float] | np.ndarray,
        latency: Sequence[float] | np.ndarray,
        label: Label | str,
        channel: ResourceKind | str | None = None,
        seed: int = 0,
        validate: bool = True,
    ) -> None:
        n = len(timestamps)
        self.timestamps = _frozen(np.asarray(timestamps, dtype=np.int64).reshape(n))
        self.process_ids = _frozen(np.asarray(process_ids, dtype=str).reshape(n))
        self.kinds = _frozen(np.asarray([ResourceKind(k).value for k in kinds], dtype=str).reshape(n))
        self.usage = _frozen(np.asarray(usage, dtype=np.float64).reshape(n))
        self.latency = _frozen(np.asarray(latency, dtype=np.float64).reshape(n))
        self.label = Label(label)
        self.channel = None if channel is None else ResourceKind(channel)
        self.seed = int(seed)
        if validate:
            self.validate()

    def __setattr__(self, name, value):
        if hasattr(self, "seed"):
            raise AttributeError("Trace is immutable")
        object.__setattr__(self, name, value)

    @classmethod
    def from_samples(
        cls,
        samples: Iterable[ResourceSample],
        label: Label | str,
        channel: ResourceKind | str | None = None,
        seed: int = 0,
    ) -> "Trace":
        rows = list(samples)
        return cls(
            [s.timestamp for s in rows],
            [s.process_id for s in rows],
            [s.resource_kind for s in rows],
            [s.usage for s in rows],
            [s.latency for s in rows],
            label,
            channel,
            seed,
        )

    def validate(self) -> None:
        if (self.label is Label.COVERT) != (self.channel is not None):
            raise TraceValidationError("covert traces must carry a channel tag and overt traces must not")
        if len(self) == 0:
            return
        if self.timestamps.min() < 0:
            raise TraceValidationError("timestamps must be non-negative")
        if not np.all((self.usage >= 0) & (self.usage <= 100)):
            raise TraceValidationError("usage must lie in [0, 100]")
        if not np.all(self.latency >= 0):
            raise TraceValidationError("latency must be non-negative")
        for pid in np.unique(self.process_ids):
            ts = self.timestamps[self.process_ids == pid]
            bad = np.flatnonzero(np.diff(ts) <= 0)
            if bad.size:
                raise TraceValidationError(
                    f"timestamps of process {pid!r} not strictly increasing at sample {int(bad[0]) + 1}"
                )

    def __len__(self) -> int:
        return int(self.timestamps.shape[0])

    @property
    def samples(self) -> list[ResourceSample]:
        return [
            ResourceSample(int(t), str(p), ResourceKind(k), float(u), float(l))
            for t, p, k, u, l in zip(self.timestamps, self.process_ids, self.kinds, self.usage, self.latency)
        ]

    def replace(self, **columns) -> "Trace":
        """Copy with some columns swapped out (validated)."""
        kw = dict(
            timestamps=self.timestamps,
            process_ids=self.process_ids,
            kinds=self.kinds,
            usage=self.usage,
            latency=self.latency,
            label=self.label,
            channel=self.channel,
            seed=self.seed,
        )
        kw.update(columns)
        return Trace(**kw)

    def head(self, n: int) -> "Trace":
        return Trace(
            self.timestamps[:n],
            self.process_ids[:n],
            self.kinds[:n],
            self.usage[:n],
            self.latency[:n],
            self.label,
            self.channel,
            self.seed,
            validate=False,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.label == other.label
            and self.channel == other.channel
            and self.seed == other.seed
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.process_ids, other.process_ids)
            and np.array_equal(self.kinds, other.kinds)
            and np.array_equal(self.usage, other.usage)
            and np.array_equal(self.latency, other.latency)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        chan = self.channel.value if self.channel else "-"
        return f"Trace(n={len(self)}, label={self.label.value}, channel={chan}, seed={self.seed})"


# --- trace file format --------------------------------------------------------

_HEADER_RE = re.compile(r"^# label=(overt|covert) channel=(cpu|cache|membus|-) seed=(\d+)$")


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_trace(trace: Trace, path: str | Path) -> None:
    bad = [p for p in set(trace.process_ids.tolist()) if "," in p or "\n" in p]
    if bad:
        raise TraceFormatError(f"process id {bad[0]!r} cannot be written: contains a separator")
    chan = trace.channel.value if trace.channel else "-"
    lines = [f"# label={trace.label.value} channel={chan} seed={trace.seed}"]
    for t, p, k, u, l in zip(trace.timestamps, trace.process_ids, trace.kinds, trace.usage, trace.latency):
        lines.append(f"{int(t)},{p},{k},{_fmt_float(u)},{_fmt_float(l)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace(path: str | Path) -> Trace:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TraceFormatError(f"{path}: line 1: missing header")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise TraceFormatError(f"{path}: line 1: malformed header {lines[0]!r}")
    label, chan, seed = m.group(1), m.group(2), int(m.group(3))
    ts, pids, kinds, usage, lat = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise TraceFormatError(f"{path}: line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            t = int(parts[0])
            kind = ResourceKind(parts[2])
            u = float(parts[3])
            l = float(parts[4])
        except ValueError as exc:
            raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
        if not parts[1]:
            raise TraceFormatError(f"{path}: line {lineno}: empty process id")
        ts.append(t)
        pids.append(parts[1])
        kinds.append(kind)
        usage.append(u)
        lat.append(l)
    return Trace(ts, pids, kinds, usage, lat, label, None if chan == "-" else chan, seed)


# --- signature records ----------------------------------------------------------

@dataclass(frozen=True)
class SignatureRecord:
    alpha: float
    beta: float
    context: float
    label: Label

    @property
    def features(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.context)


@dataclass(frozen=True, eq=False)
class Block:
    """Consecutive records sharing one K-S score.

    The score is held once (``alpha``) so the block-wide sharing invariant
    holds by construction; ``ks`` keeps the full test result.
    """

    alpha: float
    beta: np.ndarray
    context: np.ndarray
    label: Label
    ks: object = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        beta = np.asarray(self.beta, dtype=np.float64)
        context = np.asarray(self.context, dtype=np.float64)
        if beta.shape != context.shape or beta.ndim != 1:
            raise ValueError("beta and context must be 1-D arrays of equal length")
        object.__setattr__(self, "beta", _frozen(beta))
        object.__setattr__(self, "context", _frozen(context))

    def __len__(self) -> int:
        return int(self.beta.shape[0])

    @property
    def block_size(self) -> int:
        return len(self)

    @property
    def records(self) -> list[SignatureRecord]:
        return [SignatureRecord(self.alpha, float(b), float(c), self.label) for b, c in zip(self.beta, self.context)]

    def features(self) -> np.ndarray:
        X = np.empty((len(self), 3))
        X[:, 0] = self.alpha
        X[:, 1] = self.beta
        X[:, 2] = self.context
        return X


@dataclass(frozen=True, eq=False)
class RecordSet:
    """Column form of many SignatureRecords: features (n, 3) and labels in {-1, +1}."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        X = np.asarray(self.features, dtype=np.float64).reshape(-1, 3)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("features and labels differ in length")
        if not np.all(np.isin(y, (-1, 1))):
            raise ValueError("labels must be -1 (overt) or +1 (covert)")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_covert(self) -> int:
        return int(np.count_nonzero(self.labels > 0))

    @property
    def n_overt(self) -> int:
        return int(np.count_nonzero(self.labels < 0))

    def subset(self, index: np.ndarray) -> "RecordSet":
        return RecordSet(self.features[index], self.labels[index])

    @property
    def records(self) -> list[SignatureRecord]:
        return [
            SignatureRecord(float(a), float(b), float(c), Label.from_sign(s))
            for (a, b, c), s in zip(self.features, self.labels)
        ]

    @classmethod
    def from_records(cls, records: Iterable[SignatureRecord]) -> "RecordSet":
        rows = list(records)
        return cls(np.array([r.features for r in rows]).reshape(-1, 3), np.array([r.label.sign for r in rows]))

    @classmethod
    def from_blocks(cls, blocks: Iterable[Block]) -> "RecordSet":
        blocks = list(blocks)
        if not blocks:
            return cls(np.empty((0, 3)), np.empty(0, dtype=np.int64))
        X = np.vstack([b.features() for b in blocks])
        y = np.concatenate([np.full(len(b), b.label.sign) for b in blocks])
        return cls(X, y)

    @classmethod
    def concat(cls, sets: Iterable["RecordSet"]) -> "RecordSet":
        sets = list(sets)
        if not sets:
            return cls(np.empty((0, 3)), np.empty(0, dtype=np.int64))
        return cls(np.vstack([s.features for s in sets]), np.concatenate([s.labels for s in sets]))


def write_dataset(records: RecordSet, path: str | Path, **meta) -> None:
    """Write ``alpha,beta,context,label`` CSV with a ``#`` metadata line."""
    head = " ".join(f"{k}={v}" for k, v in meta.items())
    lines = [f"# signature dataset {head}".rstrip(), "alpha,beta,context,label"]
    for (a, b, c), s in zip(records.features, records.labels):
        lines.append(f"{_fmt_float(a)},{_fmt_float(b)},{_fmt_float(c)},{Label.from_sign(s).value}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path: str | Path) -> tuple[RecordSet, dict[str, str]]:
    meta: dict[str, str] = {}
    X, y = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
                continue
            if line == "alpha,beta,context,label" or not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise TraceFormatError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                X.append((float(parts[0]), float(parts[1]), float(parts[2])))
                y.append(Label(parts[3]).sign)
            except ValueError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
    return RecordSet(np.array(X).reshape(-1, 3), np.array(y, dtype=np.int64)), meta
