"""Wall-clock benchmark of projection + aggregation across pre-pool dimensions.

Only the descriptor computation is timed (no I/O, no whitening fit). Every
configuration aggregates the same seeded random input after 10 warmup
iterations; absolute milliseconds are hardware-specific and reported, never
asserted. Orderings and ratios between dimensions are the meaningful output.
"""

from __future__ import annotations

import csv
import json
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .aggregation import AggregationModel, BurstParams, init_assignment_from_vocab, aggregate
from .errors import BenchError, ConfigError, IoError, ShapeError
from .featureio import LocalFeatureSet, normalize_rows
from .projection import make_random_projection
from .rng import make_rng
from .vocabulary import Vocabulary

WARMUP_ITERATIONS = 10
MIN_RUNS = 30
STABILITY_LIMIT = 0.20


@dataclass(frozen=True)
class BenchCase:
    """Timing summary for one aggregation configuration."""

    d_prime: int
    n: int
    c: int
    mean_ms: float
    stddev_ms: float
    runs: int
    stable: bool
    threads: int = 1


@dataclass(frozen=True)
class BenchReport:
    cases: tuple[BenchCase, ...]
    environment: str

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        for case in self.cases:
            if case.runs < MIN_RUNS:
                raise ConfigError(f"benchmark needs >= {MIN_RUNS} runs, got {case.runs}")
            if not case.mean_ms > 0:
                raise BenchError(f"non-positive mean time {case.mean_ms} ms")

    def case_for(self, d_prime: int) -> BenchCase:
        for case in self.cases:
            if case.d_prime == d_prime:
                return case
        raise ConfigError(f"no benchmark case with d_prime={d_prime}")


def _environment_note(threads: int) -> str:
    return (
        f"{platform.platform()}; python {platform.python_version()}; "
        f"numpy {np.__version__}; threads={threads}"
    )


def time_aggregation(
    models: list[AggregationModel],
    n: int,
    runs: int,
    seed: int = 0,
    threads: int = 1,
) -> BenchReport:
    """Time aggregate() per model over identical seeded input features.

    Models are visited in the given order; each gets 10 warmup iterations
    followed by `runs` timed ones. A case is flagged unstable when the
    stddev exceeds 20% of the mean. With threads > 1, each timed iteration
    aggregates the input `threads` times concurrently and reports the
    per-descriptor wall time.
    """
    if runs < MIN_RUNS:
        raise ConfigError(f"benchmark needs >= {MIN_RUNS} runs, got {runs}")
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    if not models:
        raise ConfigError("no models to benchmark")
    in_dims = {m.in_dim for m in models}
    if len(in_dims) != 1:
        raise ShapeError(f"models expect different input dims: {sorted(in_dims)}")

    rng = make_rng(seed)
    features = LocalFeatureSet(
        image_id="bench", features=rng.standard_normal((n, in_dims.pop()))
    )
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1000.0

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    # Pin BLAS to one thread so `threads` is the only concurrency knob and
    # timings are comparable across machines with different core counts.
    try:
        cases = []
        with threadpool_limits(limits=1):
            for model in models:
                for _ in range(WARMUP_ITERATIONS):
                    aggregate(features, model)
                samples = np.empty(runs)
                for i in range(runs):
                    if pool is None:
                        start = time.perf_counter()
                        aggregate(features, model)
                        elapsed = time.perf_counter() - start
                    else:
                        start = time.perf_counter()
                        futures = [pool.submit(aggregate, features, model) for _ in range(threads)]
                        for future in futures:
                            future.result()
                        elapsed = (time.perf_counter() - start) / threads
                    samples[i] = elapsed * 1000.0
                mean_ms = float(samples.mean())
                stddev_ms = float(samples.std())
                if resolution_ms > 0.01 * mean_ms:
                    raise BenchError(
                        f"timer resolution {resolution_ms} ms exceeds 1% of the {mean_ms:.4f} ms "
                        f"mean; increase n"
                    )
                cases.append(
                    BenchCase(
                        d_prime=model.vocabulary.dim,
                        n=n,
                        c=model.vocabulary.c,
                        mean_ms=mean_ms,
                        stddev_ms=stddev_ms,
                        runs=runs,
                        stable=stddev_ms / mean_ms < STABILITY_LIMIT,
                        threads=threads,
                    )
                )
    finally:
        if pool is not None:
            pool.shutdown()
    return BenchReport(cases=tuple(cases), environment=_environment_note(threads))


def make_bench_models(
    in_dim: int, dims: list[int], c: int, seed: int = 0
) -> list[AggregationModel]:
    """One model per target dimension; d' == in_dim means no projection.

    Centroids and projections are random but seeded; timing does not care
    whether the vocabulary came from k-means.
    """
    rng = make_rng(seed)
    models = []
    for d_prime in dims:
        if not 1 <= d_prime <= in_dim:
            raise ConfigError(f"target dim {d_prime} outside [1, {in_dim}]")
        vocab = Vocabulary(
            centroids=normalize_rows(rng.standard_normal((c, d_prime))),
            fitted_on_normalized=True,
            seed=seed,
            inertia=0.0,
        )
        models.append(
            AggregationModel(
                vocabulary=vocab,
                assignment=init_assignment_from_vocab(vocab),
                burst=BurstParams(),
                prepool=None if d_prime == in_dim else make_random_projection(in_dim, d_prime, seed),
            )
        )
    return models


def report_to_dict(report: BenchReport) -> dict:
    return {
        "environment": report.environment,
        "cases": [
            {
                "d_prime": case.d_prime,
                "n": case.n,
                "c": case.c,
                "mean_ms": case.mean_ms,
                "stddev_ms": case.stddev_ms,
                "runs": case.runs,
                "stable": case.stable,
                "threads": case.threads,
            }
            for case in report.cases
        ],
    }


def write_bench_report(report: BenchReport, path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write benchmark report {path}: {exc}") from exc


def write_bench_csv(report: BenchReport, path: str | Path) -> None:
    try:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["d_prime", "n", "c", "mean_ms", "stddev_ms", "runs", "stable", "threads"])
            for case in report.cases:
                writer.writerow(
                    [case.d_prime, case.n, case.c, repr(case.mean_ms), repr(case.stddev_ms),
                     case.runs, case.stable, case.threads]
                )
    except OSError as exc:
        raise IoError(f"cannot write benchmark CSV {path}: {exc}") from exc


def plot_bench_svg(report: BenchReport, path: str | Path) -> None:
    """Time-vs-dimension SVG with one errorbar point per case."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dims = [case.d_prime for case in report.cases]
    means = [case.mean_ms for case in report.cases]
    errs = [case.stddev_ms for case in report.cases]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(dims, means, yerr=errs, marker="o", linestyle="-")
    ax.set_xlabel("pre-pool dimension")
    ax.set_ylabel("aggregation time (ms)")
    ax.set_title("aggregation time vs pre-pool dimension")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg")
    except OSError as exc:
        raise IoError(f"cannot write plot {path}: {exc}") from exc
    finally:
        plt.close(fig)
