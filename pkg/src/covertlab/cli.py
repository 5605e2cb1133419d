"""covertlab command line: simulate, featurize, train, detect, evaluate.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import WorkloadProfile, decode, encode, generate_overt
from .config import ConfigError, RunConfig, derive_seed, load_config
from .distributed import partition, train_distributed
from .evaluation import (
    block_verdicts,
    channel_config,
    kernel_params,
    reference_trace,
    rotation_schedule,
    run_experiment,
    write_report,
)
from .model import BitStream, CovertLabError, RecordSet, Trace, read_dataset, read_trace, write_dataset, write_trace
from .signature import ReferenceDistribution, SignatureConfig, balance, build_signature
from .svm import load_model, save_model, train

RUN_DIR_ENV = "COVERTLAB_RUN_DIR"
CHANNELS = ("cpu", "cache", "membus")

log = logging.getLogger("covertlab")


class UsageError(Exception):
    pass


# --- shared helpers ---------------------------------------------------------------

def run_dir(args, cfg: RunConfig) -> Path:
    """--run-dir beats the environment, which beats the config file."""
    if args.run_dir:
        return Path(args.run_dir)
    if os.environ.get(RUN_DIR_ENV):
        return Path(os.environ[RUN_DIR_ENV])
    return Path(cfg.run_dir)


def _out_path(explicit: str | None, default: Path) -> Path:
    path = Path(explicit) if explicit else default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _trace_kind(trace: Trace) -> str:
    if trace.channel is not None:
        return trace.channel.value
    if len(trace) == 0:
        raise CovertLabError("empty trace")
    return str(trace.kinds[0])


def _reference(path: str | None, cfg: RunConfig, kind: str) -> ReferenceDistribution:
    # without --reference a held-out overt trace is regenerated from the master seed
    trace = read_trace(path) if path else reference_trace(cfg, kind)
    return ReferenceDistribution.from_trace(trace, cfg.signature.reference_mode)


def _signature_cfg(cfg: RunConfig) -> SignatureConfig:
    s = cfg.signature
    return SignatureConfig(s.block_size, s.binarize_ks, s.significance, keep_partial=True)


def _svm_seed(cfg: RunConfig) -> int:
    return derive_seed(cfg.seed, "svm", cfg.svm.seed)


# --- subcommands ------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    kind = cfg.channel.kind
    out_dir = run_dir(args, cfg) / "traces"
    if args.overt:
        profile = WorkloadProfile(args.profile)
        seed = derive_seed(cfg.seed, "simulate", "overt", profile.value, kind)
        trace = generate_overt(args.duration, profile, seed, kind, base_latency=cfg.channel.base_latency)
        path = _out_path(args.out, out_dir / f"overt_{kind}_{profile.value}_s{cfg.seed}.trace")
        write_trace(trace, path)
        print(f"wrote {path} ({len(trace)} samples, overt {kind} {profile.value})")
        return 0

    ch_seed = cfg.channel.seed or derive_seed(cfg.seed, "simulate", kind)
    ch = channel_config(cfg, kind, ch_seed)
    sched = rotation_schedule(cfg)
    payload = BitStream.random(args.bits, derive_seed(cfg.seed, "simulate", "payload"))
    trace = encode(payload, ch, sched)
    decoded = decode(trace, ch, sched)
    errors = payload.errors(decoded)
    path = _out_path(args.out, out_dir / f"covert_{kind}_s{cfg.seed}.trace")
    write_trace(trace, path)
    print(f"wrote {path} ({len(trace)} samples, covert {kind})")
    print(f"{kind}: bits={len(payload)} errors={errors} ber={errors / len(payload):.6f}")
    return 0


def cmd_featurize(args, cfg: RunConfig) -> int:
    trace = read_trace(args.trace)
    trace.validate()
    kind = _trace_kind(trace)
    ref = _reference(args.reference, cfg, kind)
    sig = _signature_cfg(cfg)
    blocks = build_signature(trace, sig.block_size, ref, sig)
    records = RecordSet.from_blocks(blocks)
    default = run_dir(args, cfg) / "datasets" / f"{Path(args.trace).stem}_n{sig.block_size}.csv"
    path = _out_path(args.out, default)
    write_dataset(records, path, source=Path(args.trace).name, block_size=sig.block_size,
                  blocks=len(blocks), label=trace.label.value, channel=kind)
    print(f"wrote {path} ({len(records)} records in {len(blocks)} blocks of <= {sig.block_size})")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    records = RecordSet.concat([read_dataset(p)[0] for p in args.dataset])
    if records.n_covert == 0 or records.n_overt == 0:
        raise CovertLabError("training needs both overt and covert records")
    n = args.balance_n or 2 * min(records.n_covert, records.n_overt)
    if n < 2 or n % 2:
        raise UsageError("--balance-n must be a positive even number")
    records = balance(records, n, derive_seed(cfg.seed, "train", "balance"))
    params = kernel_params(cfg)
    m = cfg.distributed.workers
    models_dir = run_dir(args, cfg) / "models"

    if m == 1:
        model = train(records, params, _svm_seed(cfg))
        path = _out_path(args.out, models_dir / "model.model")
        save_model(model, path)
        print(f"wrote {path} ({model.n_support} support vectors from {len(records)} records)")
        return 0

    if m > len(records) // 2:
        raise CovertLabError(f"{m} workers need at least {2 * m} balanced records, have {len(records)}")
    out = Path(args.out) if args.out else models_dir
    parts = partition(records, m)
    merged = train_distributed(parts, params, _svm_seed(cfg), max_workers=m, run_dir=out)
    print(f"wrote {m} worker models and {out / 'merged.model'} "
          f"({merged.n_support} support vectors from {len(records)} records)")
    return 0


def cmd_detect(args, cfg: RunConfig) -> int:
    model = load_model(args.model)
    trace = read_trace(args.trace)
    trace.validate()
    ref = _reference(args.reference, cfg, _trace_kind(trace))
    sig = _signature_cfg(cfg)
    blocks = build_signature(trace, sig.block_size, ref, sig)
    verdicts, frac = block_verdicts(model, blocks)
    print("block,records,alpha,covert_votes,verdict")
    for k, (b, v, f) in enumerate(zip(blocks, verdicts, frac)):
        print(f"{k},{len(b)},{b.alpha:.6f},{f:.4f},{'covert' if v > 0 else 'overt'}")
    n_cov = int(np.sum(verdicts > 0))
    print(f"# {n_cov}/{len(blocks)} blocks flagged covert", file=sys.stderr)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    report = run_experiment(cfg)
    out = run_dir(args, cfg) / "reports"
    txt, csv_path = write_report(report, out)
    sys.stdout.write(txt.read_text(encoding="utf-8"))
    print(f"wrote {txt} and {csv_path}")
    return 0


# --- parser ---------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI-style config file (section.key = value)")
    p.add_argument("--run-dir", help=f"output directory (overrides ${RUN_DIR_ENV} and run_dir)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set svm.box_constraint=10")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="covertlab", description="Covert timing channel simulation and detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a covert or overt trace")
    p.add_argument("--channel", choices=CHANNELS, help="resource channel (default channel.kind)")
    p.add_argument("--overt", action="store_true", help="generate overt traffic instead of a covert transmission")
    p.add_argument("--bits", type=int, help="payload length for covert traces (default 256)")
    p.add_argument("--duration", type=float, help="overt trace length in seconds (default 3600)")
    p.add_argument("--profile", choices=[w.value for w in WorkloadProfile], help="overt workload profile")
    p.add_argument("--jitter", type=float, help="channel.jitter_std")
    p.add_argument("--out", help="trace file to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("featurize", parents=[common], help="turn a trace into a signature dataset")
    p.add_argument("--trace", required=True)
    p.add_argument("--reference", help="overt trace used as the K-S reference")
    p.add_argument("--block-size", type=int, help="signature.block_size")
    p.add_argument("--binarize-ks", action="store_true", default=None, help="use the K-S reject flag as alpha")
    p.add_argument("--out", help="dataset CSV to write")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="train a detector from signature datasets")
    p.add_argument("--dataset", action="append", required=True, help="signature CSV (repeatable)")
    p.add_argument("--workers", type=int, help="distributed.workers; >1 trains and merges local models")
    p.add_argument("--balance-n", type=int, help="balanced training size (default 2 x minority class)")
    p.add_argument("--gamma", type=float, help="svm.gamma (0 picks the default)")
    p.add_argument("--box-constraint", type=float, help="svm.box_constraint")
    p.add_argument("--out", help="model file (workers=1) or directory (workers>1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="classify the blocks of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--reference", help="overt trace used as the K-S reference")
    p.add_argument("--block-size", type=int, help="signature.block_size")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", parents=[common], help="run the full detection experiment")
    p.add_argument("--channels", help="eval.channels, e.g. cpu,cache")
    p.add_argument("--block-sizes", help="eval.block_sizes, e.g. 5000,200")
    p.add_argument("--noise", type=float, help="eval.noise (Gaussian noise fraction)")
    p.add_argument("--noise-target", choices=["latency", "intervals"], help="eval.noise_target")
    p.add_argument("--noise-trials", type=int, help="eval.noise_trials")
    p.add_argument("--test-samples", type=int, help="eval.test_samples per class")
    p.add_argument("--samples-per-week", type=int, help="eval.samples_per_week")
    p.add_argument("--workers", type=int, help="distributed.workers")
    p.add_argument("--vote", choices=["block", "record"], help="eval.vote")
    p.set_defaults(func=cmd_evaluate)
    return parser


# flag attribute -> config key
_FLAG_KEYS = {
    "seed": "seed",
    "channel": "channel.kind",
    "jitter": "channel.jitter_std",
    "block_size": "signature.block_size",
    "binarize_ks": "signature.binarize_ks",
    "workers": "distributed.workers",
    "gamma": "svm.gamma",
    "box_constraint": "svm.box_constraint",
    "channels": "eval.channels",
    "block_sizes": "eval.block_sizes",
    "noise": "eval.noise",
    "noise_target": "eval.noise_target",
    "noise_trials": "eval.noise_trials",
    "test_samples": "eval.test_samples",
    "samples_per_week": "eval.samples_per_week",
    "vote": "eval.vote",
}


def resolve_config(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        overrides[key.strip()] = value
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _check_combinations(args) -> None:
    if args.command != "simulate":
        return
    if args.overt:
        if args.bits is not None:
            raise UsageError("--bits applies to covert traces only")
        args.duration = 3600.0 if args.duration is None else args.duration
        args.profile = args.profile or WorkloadProfile.STEADY.value
        if args.duration < 0:
            raise UsageError("--duration must be >= 0")
    else:
        if args.duration is not None or args.profile is not None:
            raise UsageError("--duration and --profile need --overt")
        args.bits = 256 if args.bits is None else args.bits
        if args.bits < 1:
            raise UsageError("--bits must be >= 1")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_combinations(args)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"covertlab: error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"covertlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CovertLabError, ValueError, OSError, RuntimeError, KeyError) as exc:
        log.debug("failure", exc_info=True)
        print(f"covertlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
