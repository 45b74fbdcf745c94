"""Command-line pipeline: fit, aggregate, train, eval, bench, gen.

One JSON config file drives everything; --set key=value overrides single
entries, and BURSTVLAD_<NAME> environment variables override path entries
only. Every run logs the resolved config hash so outputs can be traced back
to the exact settings. Exit codes: 0 success, 1 runtime or numerical
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .aggregation import (
    AggregationModel,
    BurstParams,
    aggregate,
    init_assignment_from_vocab,
    load_bundle,
    save_bundle,
)
from .errors import BurstVladError, ConfigError, DataError, IoError
from .featureio import (
    load_descriptor,
    load_features,
    normalize_rows,
    peek_shape,
    sample_features,
    save_descriptor,
)
from .projection import fit_pca, fit_whitening, make_random_projection, project_rows
from .retrieval import (
    GenParams,
    evaluate,
    generate_burst_benchmark,
    load_manifest,
    report_dict,
    write_report,
)
from .training import (
    TrainableModel,
    TrainConfig,
    build_triplets,
    gradient_check,
    make_gradcheck_case,
    save_trace,
    train,
)
from .vocabulary import kmeans_fit

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_CASES = 10

DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {
        "manifest": "manifest.jsonl",
        "bundle": "bundle",
        "trained_bundle": "bundle_trained",
        "descriptors": "descriptors",
        "report": "report.json",
        "trace": "trace.csv",
        "bench_report": "bench.json",
        "bench_csv": "",
        "bench_svg": "",
        "out_dir": "synthetic",
    },
    "vocab": {
        "c": 64,
        "sample_count": 50000,
        "kmeans_max_iters": 100,
        "kmeans_tol": 1e-6,
    },
    "projection": {"enabled": False, "out_dim": 192, "init": "pca"},
    "burst": {"enabled": True, "a": 10.0, "b": -5.0, "p": 1.0},
    "assignment": {"sharpness_init": 100.0},
    "whitening": {"enabled": False, "out_dim": 0, "epsilon": 1e-8},
    "retrieval": {"radius_m": 25.0, "ks": [1, 5]},
    "training": {
        "lr": 1e-5,
        "steps": 100,
        "margin": 0.1,
        "negatives": 10,
        "train_burst": True,
        "train_centroids": True,
        "train_assignment": True,
        "train_projection": False,
    },
    "bench": {
        "n": 1024,
        "runs": 30,
        "c": 64,
        "in_dim": 768,
        "dims": [768, 384, 192, 64],
        "threads": 1,
    },
    "gen": {"n_places": 64, "n_distractors": 4, "burst_size": 16, "d": 32, "n_pool": 8},
}


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} must be a table")
            _merge(current, value, prefix=f"{dotted}.")
            continue
        if isinstance(current, bool) != isinstance(value, bool):
            raise ConfigError(f"config key {dotted} must be a boolean")
        if isinstance(current, (int, float)) and not isinstance(current, bool):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {dotted} must be a number")
        elif not isinstance(value, type(current)):
            raise ConfigError(
                f"config key {dotted} must be {type(current).__name__}, "
                f"got {type(value).__name__}"
            )
        base[key] = value


def load_config(path: str | None) -> dict:
    """Defaults, overlaid with the JSON config file; unknown keys rejected."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        _merge(config, loaded)
    return config


def apply_set_overrides(config: dict, assignments: list[str]) -> None:
    """Apply --set dotted.key=value pairs; values parse as JSON, else strings."""
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"--set needs KEY=VALUE, got {assignment!r}")
        dotted, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node: dict = {}
        leaf = node
        parts = dotted.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = value
        _merge(config, node)


def apply_env_overrides(config: dict, env: dict) -> None:
    """BURSTVLAD_<NAME> variables override paths.<name>; nothing else."""
    for key in config["paths"]:
        var = f"BURSTVLAD_{key.upper()}"
        if var in env:
            config["paths"][key] = env[var]


def config_hash(config: dict) -> str:
    """sha256 of the canonical (sorted-key) JSON serialization."""
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _fit_model(config: dict) -> AggregationModel:
    manifest = load_manifest(config["paths"]["manifest"])
    seed = config["seed"]
    vocab_cfg = config["vocab"]
    available = sum(peek_shape(e.feature_path)[0] for e in manifest.entries)
    count = min(int(vocab_cfg["sample_count"]), available)
    samples = sample_features(manifest, count, seed)

    prepool = None
    proj_cfg = config["projection"]
    if proj_cfg["enabled"]:
        if proj_cfg["init"] == "pca":
            prepool = fit_pca(samples, int(proj_cfg["out_dim"]))
        elif proj_cfg["init"] == "random_linear":
            prepool = make_random_projection(samples.shape[1], int(proj_cfg["out_dim"]), seed)
        else:
            raise ConfigError(f"unknown projection init {proj_cfg['init']!r}")
        pooled_space = project_rows(samples, prepool)
    else:
        pooled_space = normalize_rows(samples)

    vocab = kmeans_fit(
        pooled_space,
        int(vocab_cfg["c"]),
        seed,
        max_iters=int(vocab_cfg["kmeans_max_iters"]),
        tol=float(vocab_cfg["kmeans_tol"]),
    )
    burst_cfg = config["burst"]
    return AggregationModel(
        vocabulary=vocab,
        assignment=init_assignment_from_vocab(
            vocab, float(config["assignment"]["sharpness_init"])
        ),
        burst=BurstParams(
            a=float(burst_cfg["a"]),
            b=float(burst_cfg["b"]),
            p=float(burst_cfg["p"]),
            enabled=bool(burst_cfg["enabled"]),
        ),
        prepool=prepool,
    )


def cmd_fit(config: dict, args: argparse.Namespace) -> int:
    model = _fit_model(config)
    save_bundle(model, config["paths"]["bundle"])
    print(f"bundle written to {config['paths']['bundle']} (model hash {model.config_hash[:12]})")
    return 0


def _descriptor_path(desc_dir: Path, image_id: str) -> Path:
    return desc_dir / f"{image_id}.vbff"


def _is_up_to_date(path: Path, model_hash: str) -> bool:
    sidecar = path.with_suffix(".json")
    if not (path.is_file() and sidecar.is_file()):
        return False
    try:
        stored = json.loads(sidecar.read_text())
    except (OSError, ValueError):
        return False
    return stored.get("config_hash") == model_hash


def cmd_aggregate(config: dict, args: argparse.Namespace) -> int:
    manifest = load_manifest(config["paths"]["manifest"])
    model = load_bundle(config["paths"]["bundle"])
    desc_dir = Path(config["paths"]["descriptors"])
    desc_dir.mkdir(parents=True, exist_ok=True)

    whit_cfg = config["whitening"]
    if whit_cfg["enabled"] and model.whitening is None:
        stack = np.stack(
            [
                aggregate(load_features(e.feature_path, e.image_id), model).vector
                for e in manifest.references
            ]
        )
        out_dim = int(whit_cfg["out_dim"])
        if out_dim < 1:
            out_dim = min(stack.shape[1], stack.shape[0] - 1)
        whitening = fit_whitening(stack, out_dim, float(whit_cfg["epsilon"]))
        model = AggregationModel(
            vocabulary=model.vocabulary,
            assignment=model.assignment,
            burst=model.burst,
            prepool=model.prepool,
            whitening=whitening,
        )
        save_bundle(model, config["paths"]["bundle"])
        print(f"whitening fitted on {stack.shape[0]} references (K={out_dim})")

    written = skipped = 0
    for entry in manifest.entries:
        out_path = _descriptor_path(desc_dir, entry.image_id)
        if not args.force and _is_up_to_date(out_path, model.config_hash):
            skipped += 1
            continue
        descriptor = aggregate(load_features(entry.feature_path, entry.image_id), model)
        save_descriptor(descriptor, out_path)
        written += 1
    print(f"descriptors: {written} written, {skipped} up to date, in {desc_dir}")
    return 0


def cmd_train(config: dict, args: argparse.Namespace) -> int:
    if args.check_grads:
        worst = 0.0
        failed = 0
        for case in range(GRADCHECK_CASES):
            trainable, batch = make_gradcheck_case(seed=config["seed"] + case)
            err = gradient_check(trainable, batch)
            worst = max(worst, err)
            status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
            if status == "FAIL":
                failed += 1
            print(f"gradcheck case {case}: max relative error {err:.3e} [{status}]")
        print(f"gradcheck worst {worst:.3e} over {GRADCHECK_CASES} cases")
        return 0 if failed == 0 else 1

    manifest = load_manifest(config["paths"]["manifest"])
    model = load_bundle(config["paths"]["bundle"])
    train_cfg = config["training"]
    trainable = TrainableModel(
        model=model,
        train_burst=bool(train_cfg["train_burst"]),
        train_centroids=bool(train_cfg["train_centroids"]),
        train_assignment=bool(train_cfg["train_assignment"]),
        train_projection=bool(train_cfg["train_projection"]),
    )
    batches = build_triplets(
        manifest,
        negatives_per_anchor=int(train_cfg["negatives"]),
        margin=float(train_cfg["margin"]),
        seed=config["seed"],
    )
    result = train(
        trainable,
        batches,
        TrainConfig(
            lr=float(train_cfg["lr"]), steps=int(train_cfg["steps"]), seed=config["seed"]
        ),
    )
    save_bundle(result.model.model, config["paths"]["trained_bundle"])
    save_trace(result.trace, config["paths"]["trace"])
    burst = result.model.model.burst
    print(
        f"trained {len(batches)} triplets for {int(train_cfg['steps'])} steps: "
        f"loss {result.initial_loss:.6f} -> {result.final_loss:.6f}; "
        f"a={burst.a:.4f} b={burst.b:.4f} p={burst.p:.4f}"
    )
    print(f"trained bundle in {config['paths']['trained_bundle']}, trace in {config['paths']['trace']}")
    return 0


def _load_descriptor_dir(manifest, desc_dir: str) -> dict:
    desc_dir = Path(desc_dir)
    descriptors = {}
    for entry in manifest.entries:
        path = _descriptor_path(desc_dir, entry.image_id)
        if not path.is_file():
            raise DataError(f"descriptor missing for {entry.image_id}: {path}")
        descriptors[entry.image_id] = load_descriptor(path)
    return descriptors


def cmd_eval(config: dict, args: argparse.Namespace) -> int:
    manifest = load_manifest(config["paths"]["manifest"])
    ks = [int(k) for k in config["retrieval"]["ks"]]
    result = evaluate(manifest, _load_descriptor_dir(manifest, config["paths"]["descriptors"]), ks)
    if args.compare is None:
        write_report(result, config["paths"]["report"])
        for k in sorted(result.recall_at):
            print(f"R@{k} = {result.recall_at[k]:.4f}")
        print(f"excluded queries: {result.excluded_queries}")
        print(f"report written to {config['paths']['report']}")
        return 0

    other = evaluate(manifest, _load_descriptor_dir(manifest, args.compare), ks)
    payload = {
        "baseline": report_dict(result),
        "compare": report_dict(other),
        "delta": {str(k): other.recall_at[k] - result.recall_at[k] for k in sorted(ks)},
    }
    try:
        Path(config["paths"]["report"]).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise IoError(f"cannot write report {config['paths']['report']}: {exc}") from exc
    for k in sorted(ks):
        print(
            f"R@{k}: baseline {result.recall_at[k]:.4f}, compare {other.recall_at[k]:.4f}, "
            f"delta {payload['delta'][str(k)]:+.4f}"
        )
    print(f"comparison written to {config['paths']['report']}")
    return 0


def cmd_bench(config: dict, args: argparse.Namespace) -> int:
    bench_cfg = config["bench"]
    models = bench_mod.make_bench_models(
        int(bench_cfg["in_dim"]),
        [int(d) for d in bench_cfg["dims"]],
        int(bench_cfg["c"]),
        config["seed"],
    )
    report = bench_mod.time_aggregation(
        models,
        n=int(bench_cfg["n"]),
        runs=int(bench_cfg["runs"]),
        seed=config["seed"],
        threads=int(bench_cfg["threads"]),
    )
    bench_mod.write_bench_report(report, config["paths"]["bench_report"])
    for case in report.cases:
        flag = "" if case.stable else "  [unstable]"
        print(f"D'={case.d_prime:4d}: {case.mean_ms:8.3f} ms +- {case.stddev_ms:.3f}{flag}")
    if config["paths"]["bench_csv"]:
        bench_mod.write_bench_csv(report, config["paths"]["bench_csv"])
    if config["paths"]["bench_svg"]:
        bench_mod.plot_bench_svg(report, config["paths"]["bench_svg"])
    print(f"benchmark report written to {config['paths']['bench_report']}")
    return 0


def cmd_gen(config: dict, args: argparse.Namespace) -> int:
    gen_cfg = config["gen"]
    params = GenParams(
        n_places=int(gen_cfg["n_places"]),
        n_distractors=int(gen_cfg["n_distractors"]),
        burst_size=int(gen_cfg["burst_size"]),
        d=int(gen_cfg["d"]),
        n_pool=int(gen_cfg["n_pool"]),
        radius_m=float(config["retrieval"]["radius_m"]),
    )
    out_dir = Path(config["paths"]["out_dir"])
    manifest = generate_burst_benchmark(out_dir, config["seed"], params)
    print(
        f"generated {len(manifest.queries)} queries, {len(manifest.references)} references "
        f"under {out_dir} (manifest: {out_dir / 'manifest.jsonl'})"
    )
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "aggregate": cmd_aggregate,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gen": cmd_gen,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="burstvlad",
        description="Burst-aware VLAD aggregation, retrieval evaluation, and benchmarking.",
    )
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config entry (dotted key, JSON value)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", help="sample features, fit projection and vocabulary, write bundle")
    p_agg = sub.add_parser("aggregate", help="compute descriptors for every manifest entry")
    p_agg.add_argument("--force", action="store_true", help="recompute up-to-date outputs")
    p_train = sub.add_parser("train", help="train the aggregation parameters on triplets")
    p_train.add_argument(
        "--check-grads",
        action="store_true",
        help="run the finite-difference gradient suite and exit",
    )
    p_eval = sub.add_parser("eval", help="rank queries and report Recall@K")
    p_eval.add_argument(
        "--compare",
        default=None,
        metavar="DESC_DIR",
        help="second descriptor directory; report both recalls and deltas",
    )
    sub.add_parser("bench", help="time aggregation across pre-pool dimensions")
    sub.add_parser("gen", help="generate the synthetic burst benchmark")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        apply_env_overrides(config, dict(os.environ))
        apply_set_overrides(config, args.overrides)
        print(f"resolved config hash {config_hash(config)}", file=sys.stderr)
        return _COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BurstVladError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
