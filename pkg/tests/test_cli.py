"""End-to-end tests for the command-line pipeline and its config handling."""

import json
import os
import time

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from burstvlad.aggregation import aggregate, load_bundle
from burstvlad.cli import (
    DEFAULT_CONFIG,
    GRADCHECK_CASES,
    apply_env_overrides,
    apply_set_overrides,
    config_hash,
    load_config,
    main,
)
from burstvlad.featureio import (
    LocalFeatureSet,
    load_descriptor,
    load_features,
    save_features,
)
from burstvlad.retrieval import load_manifest
from burstvlad.rng import make_rng


def _pipeline_config(root):
    return {
        "paths": {
            "manifest": str(root / "synthetic/manifest.jsonl"),
            "bundle": str(root / "bundle"),
            "trained_bundle": str(root / "bundle_trained"),
            "descriptors": str(root / "descriptors"),
            "report": str(root / "report.json"),
            "trace": str(root / "trace.csv"),
            "bench_report": str(root / "bench.json"),
            "bench_csv": str(root / "bench.csv"),
            "bench_svg": str(root / "bench.svg"),
            "out_dir": str(root / "synthetic"),
        },
        "vocab": {"c": 4, "sample_count": 500},
        "gen": {"n_places": 6, "n_distractors": 2, "burst_size": 4, "d": 8, "n_pool": 2},
        "training": {"lr": 1e-2, "steps": 5, "negatives": 2},
        "bench": {"n": 256, "runs": 30, "c": 4, "in_dim": 64, "dims": [64, 32], "threads": 1},
    }


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen -> fit -> aggregate -> eval -> train, once, on a tiny dataset."""
    root = tmp_path_factory.mktemp("cli")
    config = _pipeline_config(root)
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    codes = {
        command: main(["--config", str(config_path), command])
        for command in ("gen", "fit", "aggregate", "eval", "train")
    }
    return root, config_path, codes


class TestPipeline:
    def test_every_stage_succeeds(self, pipeline):
        _, _, codes = pipeline
        assert codes == {"gen": 0, "fit": 0, "aggregate": 0, "eval": 0, "train": 0}

    def test_report_schema(self, pipeline):
        root, _, _ = pipeline
        report = json.loads((root / "report.json").read_text())
        assert set(report) == {"config_hash", "radius_m", "recalls", "excluded_queries"}
        assert set(report["recalls"]) == {"1", "5"}
        assert report["radius_m"] == 25.0
        assert report["excluded_queries"] == 0
        assert report["recalls"]["1"] > 0.5
        assert report["recalls"]["5"] >= report["recalls"]["1"]

    def test_aggregate_skips_up_to_date_outputs(self, pipeline, capsys):
        _, config_path, _ = pipeline
        assert main(["--config", str(config_path), "aggregate"]) == 0
        assert "0 written, 14 up to date" in capsys.readouterr().out

    def test_force_recomputes(self, pipeline, capsys):
        _, config_path, _ = pipeline
        assert main(["--config", str(config_path), "aggregate", "--force"]) == 0
        assert "14 written, 0 up to date" in capsys.readouterr().out

    def test_descriptors_match_library_aggregation(self, pipeline):
        root, _, _ = pipeline
        manifest = load_manifest(root / "synthetic/manifest.jsonl")
        model = load_bundle(root / "bundle")
        for entry in manifest.entries[:3]:
            from_cli = load_descriptor(root / "descriptors" / f"{entry.image_id}.vbff")
            from_lib = aggregate(load_features(entry.feature_path, entry.image_id), model)
            assert from_cli.config_hash == from_lib.config_hash
            assert_array_equal(from_cli.vector, from_lib.vector)

    def test_trained_outputs(self, pipeline):
        root, _, _ = pipeline
        trained = load_bundle(root / "bundle_trained")
        baseline = load_bundle(root / "bundle")
        assert trained.config_hash != baseline.config_hash
        trace_lines = (root / "trace.csv").read_text().splitlines()
        assert trace_lines[0] == "step,loss,a,b,p"
        assert len(trace_lines) == 1 + 5 + 1  # header + steps + final row

    def test_eval_compare_reports_deltas(self, pipeline, capsys):
        root, config_path, _ = pipeline
        second = root / "descriptors_trained"
        assert main([
            "--config", str(config_path),
            "--set", f"paths.bundle={root / 'bundle_trained'}",
            "--set", f"paths.descriptors={second}",
            "aggregate",
        ]) == 0
        assert main([
            "--config", str(config_path), "eval", "--compare", str(second)
        ]) == 0
        out = capsys.readouterr().out
        assert "delta" in out
        report = json.loads((root / "report.json").read_text())
        assert set(report) == {"baseline", "compare", "delta"}
        assert set(report["delta"]) == {"1", "5"}

    def test_fit_is_deterministic(self, pipeline):
        root, config_path, _ = pipeline

        def refit(name):
            bundle = root / name
            assert main([
                "--config", str(config_path), "--set", f"paths.bundle={bundle}", "fit"
            ]) == 0
            return {f.name: f.read_bytes() for f in bundle.iterdir() if f.is_file()}

        assert refit("bundle_a") == refit("bundle_b")


class TestExitCodes:
    @pytest.fixture()
    def config_path(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(_pipeline_config(tmp_path)))
        return path

    def test_missing_manifest_is_usage_error(self, config_path, tmp_path):
        code = main([
            "--config", str(config_path),
            "--set", f"paths.manifest={tmp_path / 'absent.jsonl'}",
            "fit",
        ])
        assert code == 2

    def test_unknown_set_key(self, config_path):
        assert main(["--config", str(config_path), "--set", "nonsense.key=1", "gen"]) == 2

    def test_malformed_set(self, config_path):
        assert main(["--config", str(config_path), "--set", "no_equals_sign", "gen"]) == 2

    def test_set_type_mismatch(self, config_path):
        assert main(["--config", str(config_path), "--set", "vocab.c=lots", "gen"]) == 2
        assert main(["--config", str(config_path), "--set", "burst.enabled=3", "gen"]) == 2

    def test_invalid_config_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{oops")
        assert main(["--config", str(path), "gen"]) == 2

    def test_config_must_be_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        assert main(["--config", str(path), "gen"]) == 2

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "extra.json"
        path.write_text(json.dumps({"bogus": 1}))
        assert main(["--config", str(path), "gen"]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["--config", str(tmp_path / "absent.json"), "gen"]) == 2

    def test_missing_descriptors_is_runtime_error(self, pipeline, tmp_path):
        _, config_path, _ = pipeline
        code = main([
            "--config", str(config_path),
            "--set", f"paths.descriptors={tmp_path / 'nosuch'}",
            "eval",
        ])
        assert code == 1

    def test_missing_bundle_is_runtime_error(self, pipeline, tmp_path):
        _, config_path, _ = pipeline
        code = main([
            "--config", str(config_path),
            "--set", f"paths.bundle={tmp_path / 'nobundle'}",
            "aggregate",
        ])
        assert code == 1


class TestCheckGrads:
    def test_suite_passes(self, capsys):
        assert main(["train", "--check-grads"]) == 0
        out = capsys.readouterr().out
        assert out.count("gradcheck case") == GRADCHECK_CASES
        assert "[FAIL]" not in out

    def test_failure_flips_exit_code(self, monkeypatch, capsys):
        monkeypatch.setattr("burstvlad.cli.gradient_check", lambda *a, **k: 1.0)
        assert main(["train", "--check-grads"]) == 1
        assert "[FAIL]" in capsys.readouterr().out


class TestConfig:
    def test_hash_is_key_order_independent(self):
        config = load_config(None)
        reserialized = json.loads(json.dumps(config, sort_keys=True))
        assert config_hash(config) == config_hash(reserialized)
        changed = json.loads(json.dumps(config))
        changed["seed"] = 1
        assert config_hash(changed) != config_hash(config)

    def test_defaults_round_trip(self):
        assert load_config(None) == DEFAULT_CONFIG
        assert load_config(None) is not DEFAULT_CONFIG

    def test_set_values_parse_as_json(self):
        config = load_config(None)
        apply_set_overrides(config, [
            "vocab.c=8",
            "projection.enabled=true",
            "paths.report=out/report.json",
            "retrieval.ks=[1,10]",
        ])
        assert config["vocab"]["c"] == 8
        assert config["projection"]["enabled"] is True
        assert config["paths"]["report"] == "out/report.json"
        assert config["retrieval"]["ks"] == [1, 10]

    def test_env_overrides_paths_only(self):
        config = load_config(None)
        env = {"BURSTVLAD_REPORT": "elsewhere.json", "BURSTVLAD_SEED": "99"}
        apply_env_overrides(config, env)
        assert config["paths"]["report"] == "elsewhere.json"
        assert config["seed"] == 0

    def test_env_override_end_to_end(self, pipeline, monkeypatch):
        root, config_path, _ = pipeline
        target = root / "report_env.json"
        monkeypatch.setenv("BURSTVLAD_REPORT", str(target))
        assert main(["--config", str(config_path), "eval"]) == 0
        assert target.is_file()


@pytest.fixture(scope="module")
def projected_pipeline(tmp_path_factory):
    """Pipeline with pre-pool projection and whitening enabled."""
    root = tmp_path_factory.mktemp("cli_proj")
    config = _pipeline_config(root)
    config["projection"] = {"enabled": True, "out_dim": 6, "init": "pca"}
    config["whitening"] = {"enabled": True, "out_dim": 6, "epsilon": 1e-8}
    config["training"] = {"lr": 1e-2, "steps": 3, "negatives": 2}
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    codes = {
        command: main(["--config", str(config_path), command])
        for command in ("gen", "fit", "aggregate", "eval")
    }
    return root, config_path, codes


class TestProjectedPipeline:
    def test_stages_succeed(self, projected_pipeline):
        _, _, codes = projected_pipeline
        assert codes == {"gen": 0, "fit": 0, "aggregate": 0, "eval": 0}

    def test_bundle_carries_projection_and_whitening(self, projected_pipeline):
        root, _, _ = projected_pipeline
        model = load_bundle(root / "bundle")
        assert model.prepool is not None
        assert model.prepool.out_dim == 6
        assert model.whitening is not None
        assert model.out_dim == 6
        descriptor = load_descriptor(root / "descriptors" / "q000.vbff")
        assert descriptor.dim == 6
        assert descriptor.config_hash == model.config_hash

    def test_whitening_fitted_once(self, projected_pipeline, capsys):
        _, config_path, _ = projected_pipeline
        assert main(["--config", str(config_path), "aggregate"]) == 0
        out = capsys.readouterr().out
        assert "whitening fitted" not in out
        assert "0 written, 14 up to date" in out

    def test_train_through_projection(self, projected_pipeline):
        _, config_path, _ = projected_pipeline
        code = main([
            "--config", str(config_path),
            "--set", "training.train_projection=true",
            "train",
        ])
        assert code == 0

    def test_bench_writers(self, projected_pipeline):
        root, config_path, _ = projected_pipeline
        assert main(["--config", str(config_path), "bench"]) == 0
        bench = json.loads((root / "bench.json").read_text())
        assert [case["d_prime"] for case in bench["cases"]] == [64, 32]
        assert all(case["runs"] == 30 for case in bench["cases"])
        csv_lines = (root / "bench.csv").read_text().splitlines()
        assert csv_lines[0].startswith("d_prime,")
        assert len(csv_lines) == 3
        assert (root / "bench.svg").read_text().lstrip().startswith("<?xml")


class TestTwinDatabase:
    def test_identical_query_and_reference_features_give_perfect_recall(self, tmp_path):
        """Queries that share bytes with their reference must retrieve it first."""
        rng = make_rng(4)
        data_dir = tmp_path / "twin"
        data_dir.mkdir()
        lines = [json.dumps({"radius_m": 25.0})]
        for j in range(4):
            rows = rng.standard_normal((5, 8))
            for prefix, y in (("q", 5.0), ("r", 0.0)):
                image_id = f"{prefix}{j:03d}"
                save_features(
                    LocalFeatureSet(image_id=image_id, features=rows),
                    data_dir / f"{image_id}.vbff",
                )
                lines.append(json.dumps({
                    "image_id": image_id,
                    "feature_path": f"{image_id}.vbff",
                    "x_m": j * 100.0,
                    "y_m": y,
                    "split": "query" if prefix == "q" else "reference",
                }))
        (data_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n")

        config = _pipeline_config(tmp_path)
        config["paths"]["manifest"] = str(data_dir / "manifest.jsonl")
        config["vocab"] = {"c": 2, "sample_count": 40}
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        for command in ("fit", "aggregate", "eval"):
            assert main(["--config", str(config_path), command]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["recalls"]["1"] == 1.0


class TestDefaultSizedFit:
    def test_default_generation_and_fit_complete_quickly(self, tmp_path):
        """The stock config (64 places, C=64, D=32) fits well inside a minute."""
        config = {"paths": _pipeline_config(tmp_path)["paths"]}
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        start = time.perf_counter()
        assert main(["--config", str(config_path), "gen"]) == 0
        assert main(["--config", str(config_path), "fit"]) == 0
        elapsed = time.perf_counter() - start
        assert elapsed < 60.0
        model = load_bundle(tmp_path / "bundle")
        assert model.c == 64
        assert model.dim == 32
