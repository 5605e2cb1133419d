"""Run configuration: INI-style file, CLI overrides, deterministic seed splitting.

Keys are addressed as ``section.key`` (``channel.value_high``,
``svm.gamma``...). Precedence is flag > file > default.
"""

from __future__ import annotations

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


class ConfigError(ValueError):
    pass


def derive_seed(master: int, *labels: str | int) -> int:
    """Stable 63-bit child seed for a named stage of a run."""
    key = [zlib.crc32(str(label).encode("utf-8")) for label in labels]
    state = np.random.SeedSequence(int(master), spawn_key=key).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


@dataclass
class ChannelSection:
    kind: str = "cpu"
    bit_interval: float = 10.0
    value_high: float = 80.0
    value_low: float = 60.0
    base_latency: float = 100.0
    contended_latency: float = 300.0
    jitter_std: float = 1.0
    seed: int = 0
    tick: float = 1.0
    usage_std: float = 2.0
    timing_jitter_ms: float = 20.0
    run_limit: int = 16
    rotation: str = "7,10,20"
    dwell: float = 120.0


@dataclass
class SignatureSection:
    block_size: int = 5000
    binarize_ks: bool = False
    significance: float = 0.05
    reference_mode: str = "two_sample_overt"
    seed: int = 0


@dataclass
class SvmSection:
    gamma: float = 0.0  # 0 selects the data-driven default
    box_constraint: float = 1.0
    tolerance: float = 1e-3
    max_passes: int = 200_000
    seed: int = 0


@dataclass
class DistributedSection:
    workers: int = 8
    seed: int = 0


@dataclass
class EvalSection:
    channels: str = "cpu,cache,membus"
    block_sizes: str = "5000,200"
    train_weeks: int = 4
    samples_per_week: int = 10_000
    test_samples: int = 100_000
    reference_samples: int = 6000
    session_samples: int = 1000  # overt weeks switch workload every this many samples
    jitter_fraction: float = 0.1  # covert jitter as a fraction of the decode threshold gap
    vote: str = "block"
    noise: float = 0.0
    noise_target: str = "latency"
    noise_scale: str = "std"
    noise_trials: int = 1
    noise_test_samples: int = 0  # 0: same as test_samples


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "run"
    channel: ChannelSection = field(default_factory=ChannelSection)
    signature: SignatureSection = field(default_factory=SignatureSection)
    svm: SvmSection = field(default_factory=SvmSection)
    distributed: DistributedSection = field(default_factory=DistributedSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def set(self, path: str, raw: Any) -> None:
        """Assign ``section.key`` (or a top-level key) from a string or value."""
        parts = path.split(".")
        if len(parts) == 1:
            target, key = self, parts[0]
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            target, key = getattr(self, parts[0]), parts[1]
        else:
            raise ConfigError(f"{path}: unknown configuration key")
        names = {f.name for f in dataclasses.fields(target)}
        if key not in names or dataclasses.is_dataclass(getattr(target, key)):
            raise ConfigError(f"{path}: unknown configuration key")
        kind = type(getattr(target, key))
        setattr(target, key, _coerce(path, raw, kind))

    def validate(self) -> None:
        c = self.channel
        checks = [
            ("channel.kind", c.kind in ("cpu", "cache", "membus"), "must be cpu, cache or membus"),
            ("channel.bit_interval", c.bit_interval > 0, "must be > 0"),
            ("channel.value_high", 15 <= c.value_high - c.value_low <= 25, "must exceed value_low by about 20"),
            ("channel.contended_latency", c.contended_latency > c.base_latency, "must exceed base_latency"),
            ("channel.jitter_std", c.jitter_std >= 0, "must be >= 0"),
            ("channel.tick", c.tick > 0, "must be > 0"),
            ("channel.dwell", c.dwell > 0, "must be > 0"),
            ("signature.block_size", self.signature.block_size >= 5, "must be >= 5"),
            ("signature.significance", 0 < self.signature.significance < 1, "must lie in (0, 1)"),
            ("signature.reference_mode", self.signature.reference_mode in ("two_sample_overt", "fitted_gaussian"),
             "must be two_sample_overt or fitted_gaussian"),
            ("svm.gamma", self.svm.gamma >= 0, "must be >= 0"),
            ("svm.box_constraint", self.svm.box_constraint > 0, "must be > 0"),
            ("svm.tolerance", self.svm.tolerance > 0, "must be > 0"),
            ("svm.max_passes", self.svm.max_passes >= 1, "must be >= 1"),
            ("distributed.workers", self.distributed.workers >= 1, "must be >= 1"),
            ("eval.vote", self.eval.vote in ("block", "record"), "must be block or record"),
            ("eval.noise", 0 <= self.eval.noise < 1, "must lie in [0, 1)"),
            ("eval.noise_target", self.eval.noise_target in ("latency", "intervals"), "must be latency or intervals"),
            ("eval.noise_scale", self.eval.noise_scale in ("std", "mean"), "must be std or mean"),
            ("eval.noise_trials", self.eval.noise_trials >= 1, "must be >= 1"),
            ("eval.jitter_fraction", self.eval.jitter_fraction >= 0, "must be >= 0"),
            ("eval.session_samples", self.eval.session_samples >= 1, "must be >= 1"),
            ("eval.train_weeks", self.eval.train_weeks >= 1, "must be >= 1"),
        ]
        for path, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{path}: {msg}")
        try:
            rotation = parse_floats(c.rotation)
        except ValueError:
            raise ConfigError("channel.rotation: expected comma-separated seconds") from None
        if not rotation or min(rotation) <= 0:
            raise ConfigError("channel.rotation: intervals must be positive")
        for path, text in (("eval.channels", self.eval.channels), ("eval.block_sizes", self.eval.block_sizes)):
            if not text.strip():
                raise ConfigError(f"{path}: must not be empty")
        for name in self.eval.channels.split(","):
            if name.strip() not in ("cpu", "cache", "membus"):
                raise ConfigError(f"eval.channels: unknown channel {name.strip()!r}")
        try:
            sizes = [int(s) for s in self.eval.block_sizes.split(",")]
        except ValueError:
            raise ConfigError("eval.block_sizes: expected comma-separated integers") from None
        if min(sizes) < 5:
            raise ConfigError("eval.block_sizes: block sizes must be >= 5")


_SECTIONS = ("channel", "signature", "svm", "distributed", "eval")


def parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.split(",") if s.strip())


def _coerce(path: str, raw: Any, kind: type) -> Any:
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{path}: expected {kind.__name__}, got {raw!r}") from None
    return text


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_string("[__top__]\n" + fh.read())
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section, raw=True):
                cfg.set(key if section == "__top__" else f"{section}.{key}", value)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg.set(key, value)
    cfg.validate()
    return cfg
