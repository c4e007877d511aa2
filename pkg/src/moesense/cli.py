"""Command-line surface: dataset generation, training, rate/target sweeps,
and single-shot detection.

Subcommands
-----------
generate     write a labeled stream dataset (files + manifest.csv)
train        build a trained bundle from a dataset
eval-rate    accuracy vs. communication rate, CSV output
eval-targets accuracy vs. number of targets, CSV output
detect       run the detector on one stream file

All commands are deterministic under a fixed --seed. Relative output paths
resolve under $MOESENSE_OUT_DIR when it is set. Exit codes: 0 success,
2 configuration, 3 input, 4 I/O, 5 format, 6 training.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    EXIT_CONFIG,
    EXIT_FORMAT,
    EXIT_INPUT,
    EXIT_IO,
    EXIT_OK,
    EXIT_TRAINING,
    ConfigurationError,
    FormatError,
    InputError,
    MoeSenseError,
    TrainingError,
)
from .classifiers import predict_posterior
from .features import FeatureKind
from .gating import ExpertSpec, decide, default_registry, filter_by_rate, fuse, load_registry
from .pipeline import (
    TrainedBundle,
    build_bundle,
    detect,
    expert_input_rate,
    extract_feature,
    load_bundle,
    save_bundle,
    split_train_val,
)
from .simulate import (
    CsiStream,
    ManifestEntry,
    ScenarioConfig,
    decimate,
    load_stream,
    read_manifest,
    save_stream,
    synthesize_stream,
    write_manifest,
)

DEFAULT_RATES = (100.0, 200.0, 300.0, 400.0, 500.0)
DEFAULT_TARGET_COUNTS = tuple(range(3, 11))
DEFAULT_SWEEP_RATE = 300.0  # rate at which the target sweep runs
CSV_FLOAT_FMT = "{:.4f}"


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs for the synthetic benchmark."""

    k_max: int = 5
    streams_per_class: int = 100
    rates_to_test: tuple[float, ...] = DEFAULT_RATES
    target_counts_to_test: tuple[int, ...] = ()
    seed: int = 42
    packet_rate: float = 1000.0
    duration: float = 2.0
    num_subcarriers: int = 30
    snr_db: float = 15.0
    doppler_range: tuple[float, float] = (5.0, 60.0)

    def __post_init__(self) -> None:
        if self.k_max < 0 or self.streams_per_class < 1:
            raise ConfigurationError("k_max must be >= 0 and streams_per_class >= 1")
        if any(r <= 0 for r in self.rates_to_test):
            raise ConfigurationError("rates must be positive")
        if any(c < 0 or c > self.k_max for c in self.target_counts_to_test):
            raise ConfigurationError("target counts must lie in [0, k_max]")


def dataset_configs(cfg: ExperimentConfig) -> list[ScenarioConfig]:
    """Per-stream scenario configs with seeds derived from the master seed."""
    master = np.random.default_rng(cfg.seed)
    configs = []
    for cls in range(cfg.k_max + 1):
        for _ in range(cfg.streams_per_class):
            configs.append(
                ScenarioConfig(
                    num_targets=cls,
                    packet_rate=cfg.packet_rate,
                    duration=cfg.duration,
                    num_subcarriers=cfg.num_subcarriers,
                    snr_db=cfg.snr_db,
                    doppler_range=cfg.doppler_range,
                    rng_seed=int(master.integers(0, 2**63)),
                )
            )
    return configs


def iter_dataset(configs: Sequence[ScenarioConfig]) -> Iterator[tuple[CsiStream, int]]:
    for sc in configs:
        yield synthesize_stream(sc), sc.num_targets


# ---------------------------------------------------------------------------
# Sweep evaluation
# ---------------------------------------------------------------------------

@dataclass
class ResultTable:
    """Accuracy rows keyed by a sweep condition (rate or target count)."""

    condition_name: str
    expert_ids: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def fieldnames(self) -> list[str]:
        return [self.condition_name, "n_samples", "framework", "random3", *self.expert_ids]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.fieldnames())
            writer.writeheader()
            for row in self.rows:
                out = {}
                for key in self.fieldnames():
                    val = row.get(key, "")
                    if isinstance(val, float):
                        val = CSV_FLOAT_FMT.format(val)
                    out[key] = val
                writer.writerow(out)


def _evaluation_pool(registry: Sequence[ExpertSpec], rate: float) -> list[str]:
    eligible = filter_by_rate(registry, rate)
    return sorted(eligible) if eligible else sorted(s.id for s in registry)


def _gating_features(observed: CsiStream, doppler_cfg) -> dict:
    return {
        FeatureKind.DOPPLER_ENERGY: extract_feature(observed, FeatureKind.DOPPLER_ENERGY, doppler_cfg),
        FeatureKind.AMPLITUDE_STATS: extract_feature(observed, FeatureKind.AMPLITUDE_STATS, doppler_cfg),
    }


def _pool_posteriors(
    bundle: TrainedBundle, observed: CsiStream, rate: float, pool: Sequence[str]
) -> dict[str, np.ndarray]:
    doppler_cfg = bundle.doppler_config()
    out = {}
    for eid in pool:
        spec = bundle.spec(eid)
        expert_input = decimate(observed, expert_input_rate(spec, rate))
        fv = extract_feature(expert_input, spec.feature_kind, doppler_cfg)
        out[eid] = predict_posterior(bundle.models[eid], fv)
    return out


def evaluate_rate_sweep(
    bundle: TrainedBundle,
    data: Iterable[tuple[CsiStream, int]],
    rates: Sequence[float],
    seed: int = 42,
    k: int = 3,
) -> ResultTable:
    """Framework, per-expert, and random-triple accuracy at each rate.

    The per-expert columns cover the rate-eligible experts, or the whole
    registry at fallback rates. The random baseline draws one expert triple
    per rate from that same pool and fuses with uniform weights.
    """
    registry = bundle.registry
    doppler_cfg = bundle.doppler_config()
    pools = {r: _evaluation_pool(registry, r) for r in rates}
    # One RNG per rate; a fresh triple is drawn per stream so the baseline
    # reflects the average random combination, not one lucky draw.
    triple_rngs = {r: np.random.default_rng([seed, i]) for i, r in enumerate(sorted(rates))}

    hits: dict[float, dict[str, int]] = {r: {"framework": 0, "random3": 0} for r in rates}
    for r in rates:
        for eid in pools[r]:
            hits[r][eid] = 0
    totals = {r: 0 for r in rates}

    for stream, label in data:
        for r in rates:
            observed = decimate(stream, r)
            stream_features = _gating_features(observed, doppler_cfg)
            posteriors = _pool_posteriors(bundle, observed, r, pools[r])

            decision = decide(registry, bundle.templates, stream_features, r, k)
            _, predicted = fuse([posteriors[eid] for eid in decision.selected], decision.weights)
            hits[r]["framework"] += int(predicted == label)

            pool = pools[r]
            triple = sorted(triple_rngs[r].choice(pool, size=min(3, len(pool)), replace=False).tolist())
            _, rand_pred = fuse([posteriors[eid] for eid in triple],
                                [1.0 / len(triple)] * len(triple))
            hits[r]["random3"] += int(rand_pred == label)

            for eid in pools[r]:
                hits[r][eid] += int(np.argmax(posteriors[eid]) == label)
            totals[r] += 1

    all_experts = tuple(sorted(s.id for s in registry))
    table = ResultTable("rate", all_experts)
    for r in rates:
        n = totals[r]
        row = {"rate": CSV_FLOAT_FMT.format(r), "n_samples": n}
        row["framework"] = hits[r]["framework"] / n if n else 0.0
        row["random3"] = hits[r]["random3"] / n if n else 0.0
        for eid in pools[r]:
            row[eid] = hits[r][eid] / n if n else 0.0
        table.rows.append(row)
    return table


def evaluate_target_sweep(
    bundle: TrainedBundle,
    data: Iterable[tuple[CsiStream, int]],
    target_counts: Sequence[int],
    rate: float = DEFAULT_SWEEP_RATE,
    k: int = 3,
) -> ResultTable:
    """Exact-count accuracy per target count at one communication rate."""
    registry = bundle.registry
    doppler_cfg = bundle.doppler_config()
    pool = _evaluation_pool(registry, rate)
    wanted = set(int(c) for c in target_counts)

    hits = {c: {"framework": 0, **{eid: 0 for eid in pool}} for c in wanted}
    totals = {c: 0 for c in wanted}
    seen = set()

    for stream, label in data:
        seen.add(int(label))
        if int(label) not in wanted:
            continue
        observed = decimate(stream, rate)
        stream_features = _gating_features(observed, doppler_cfg)
        posteriors = _pool_posteriors(bundle, observed, rate, pool)
        decision = decide(registry, bundle.templates, stream_features, rate, k)
        _, predicted = fuse([posteriors[eid] for eid in decision.selected], decision.weights)
        c = int(label)
        hits[c]["framework"] += int(predicted == c)
        for eid in pool:
            hits[c][eid] += int(np.argmax(posteriors[eid]) == c)
        totals[c] += 1

    missing = wanted - seen
    if missing:
        raise InputError(f"target counts {sorted(missing)} not present in dataset")

    table = ResultTable("target_count", tuple(pool))
    for c in sorted(wanted):
        n = totals[c]
        row = {"target_count": c, "n_samples": n}
        row["framework"] = hits[c]["framework"] / n if n else 0.0
        for eid in pool:
            row[eid] = hits[c][eid] / n if n else 0.0
        table.rows.append(row)
    return table


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _resolve_out(path: str) -> Path:
    base = os.environ.get("MOESENSE_OUT_DIR")
    p = Path(path)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _load_dataset_entries(dataset_dir: Path) -> list[ManifestEntry]:
    manifest = dataset_dir / "manifest.csv"
    if not manifest.exists():
        raise InputError(f"no manifest.csv under {dataset_dir}")
    return read_manifest(manifest)


def _iter_manifest_streams(dataset_dir: Path,
                           entries: Sequence[ManifestEntry]) -> Iterator[tuple[CsiStream, int]]:
    for e in entries:
        yield load_stream(dataset_dir / e.path), e.label


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig(
        k_max=args.k_max,
        streams_per_class=args.streams_per_class,
        seed=args.seed,
        packet_rate=args.packet_rate,
        duration=args.duration,
        num_subcarriers=args.subcarriers,
        snr_db=args.snr_db,
        doppler_range=(args.doppler_min, args.doppler_max),
    )
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    per_class_counter: dict[int, int] = {}
    for stream, label in iter_dataset(dataset_configs(cfg)):
        idx = per_class_counter.get(label, 0)
        per_class_counter[label] = idx + 1
        name = f"class{label}_{idx:04d}.csi"
        save_stream(stream, out_dir / name)
        entries.append(ManifestEntry(name, label, stream.packet_rate))
    write_manifest(out_dir / "manifest.csv", entries)
    print(f"wrote {len(entries)} streams to {out_dir}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    dataset_dir = Path(args.dataset)
    entries = _load_dataset_entries(dataset_dir)
    if not entries:
        raise TrainingError(f"dataset {dataset_dir} is empty")
    registry = load_registry(args.registry) if args.registry else default_registry()

    labels = [e.label for e in entries]
    train_e, train_l, val_e, val_l = split_train_val(
        entries, labels, val_fraction=args.val_fraction, seed=args.seed
    )
    bundle = build_bundle(
        (load_stream(dataset_dir / e.path) for e in train_e), train_l,
        (load_stream(dataset_dir / e.path) for e in val_e), val_l,
        registry, seed=args.seed,
    )

    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out)

    acc = bundle.metadata["validation_accuracy"]
    print(f"{'expert':<8}{'feature':<12}{'classifier':<12}{'req_rate':>9}{'val_acc':>9}")
    for spec in bundle.registry:
        print(
            f"{spec.id:<8}{spec.feature_kind.value:<12}{spec.classifier_kind.value:<12}"
            f"{spec.required_rate:>9.1f}{acc[spec.id]:>9.4f}"
        )
    print(f"bundle written to {out}")
    return EXIT_OK


def _check_rates_against_dataset(entries: Sequence[ManifestEntry], rates: Sequence[float]) -> None:
    base = min(e.rate for e in entries)
    too_high = [r for r in rates if r > base]
    if too_high:
        raise InputError(f"rates {too_high} above dataset base rate {base}")


def cmd_eval_rate(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    dataset_dir = Path(args.dataset)
    entries = _load_dataset_entries(dataset_dir)
    rates = args.rates
    _check_rates_against_dataset(entries, rates)
    table = evaluate_rate_sweep(
        bundle, _iter_manifest_streams(dataset_dir, entries), rates, seed=args.seed
    )
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    print(f"rate sweep written to {out}")
    return EXIT_OK


def cmd_eval_targets(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    dataset_dir = Path(args.dataset)
    entries = _load_dataset_entries(dataset_dir)
    _check_rates_against_dataset(entries, [args.rate])
    table = evaluate_target_sweep(
        bundle, _iter_manifest_streams(dataset_dir, entries), args.counts, rate=args.rate
    )
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    print(f"target sweep written to {out}")
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    stream = load_stream(args.stream)
    report = detect(stream, args.rate, bundle)

    if args.json:
        payload = {
            "predicted_count": report.predicted_count,
            "mode": report.mode.value,
            "selected": list(report.decision.selected),
            "weights": [round(w, 6) for w in report.decision.weights],
            "eligible": sorted(report.decision.eligible),
            "current_rate": report.current_rate,
            "fused": [round(float(p), 6) for p in report.fused],
        }
        print(json.dumps(payload, sort_keys=True))
    else:
        print(f"predicted_count: {report.predicted_count}")
        print(f"mode: {report.mode.value}")
        print(f"selected: {' '.join(report.decision.selected)}")
        print("weights: " + " ".join(f"{w:.4f}" for w in report.decision.weights))
        print(f"eligible: {' '.join(sorted(report.decision.eligible)) or '(none)'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moesense", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a labeled stream dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--streams-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--packet-rate", type=float, default=1000.0)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--subcarriers", type=int, default=30)
    p.add_argument("--snr-db", type=float, default=15.0)
    p.add_argument("--doppler-min", type=float, default=5.0)
    p.add_argument("--doppler-max", type=float, default=60.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train all experts and build a bundle")
    p.add_argument("--dataset", required=True, help="dataset directory (with manifest.csv)")
    p.add_argument("--out", required=True, help="bundle output path")
    p.add_argument("--registry", default=None, help="registry JSON (default: built-in 8 experts)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-rate", help="accuracy vs. communication rate")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--rates", type=_float_list, default=list(DEFAULT_RATES))
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_eval_rate)

    p = sub.add_parser("eval-targets", help="accuracy vs. number of targets")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--counts", type=_int_list, default=list(DEFAULT_TARGET_COUNTS))
    p.add_argument("--rate", type=float, default=DEFAULT_SWEEP_RATE)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_eval_targets)

    p = sub.add_parser("detect", help="detect the target count in one stream")
    p.add_argument("--bundle", required=True)
    p.add_argument("--stream", required=True, help="stream container file")
    p.add_argument("--rate", type=float, required=True, help="current communication rate")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_detect)

    return parser


_ERROR_EXITS = [
    (ConfigurationError, EXIT_CONFIG),
    (TrainingError, EXIT_TRAINING),
    (FormatError, EXIT_FORMAT),
    (InputError, EXIT_INPUT),
]


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MoeSenseError as exc:
        for cls, code in _ERROR_EXITS:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
