import json
import os

import numpy as np
import pytest

from agglom.cli import main, parse_counts, parse_net


def run(args):
    return main(args)


def read_manifest(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        return json.load(fh)


class TestParsers:
    def test_parse_counts(self):
        assert parse_counts("1:10,2:5") == {1: 10, 2: 5}

    def test_parse_net(self):
        assert parse_net("number") == ("number", None)
        assert parse_net("area:3") == ("area", 3)
        with pytest.raises(ValueError):
            parse_net("area:6")
        with pytest.raises(ValueError):
            parse_net("wibble")


class TestExitCodes:
    def test_unknown_flag_usage_error(self, capsys):
        assert run(["synth", "--bogus"]) == 2
        capsys.readouterr()

    def test_runtime_failure(self, tmp_path, capsys):
        code = run(["measure", "--bundle", str(tmp_path / "nope"),
                    "--images", str(tmp_path), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_version_exits_zero(self, capsys):
        assert run(["--version"]) == 0
        capsys.readouterr()


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = run(["synth", "--counts", "1:8,2:8", "--seed", "17",
                "--out", str(out), "--workers", "1"])
    assert code == 0
    return str(out)


class TestSynthCommand:
    def test_dataset_layout(self, small_dataset):
        assert os.path.isdir(os.path.join(small_dataset, "images"))
        labels = open(os.path.join(small_dataset, "labels.jsonl")).read().splitlines()
        assert 0 < len(labels) <= 16
        rec = json.loads(labels[0])
        for key in ("file", "class", "areas_px2", "c_T", "deform", "blur_sigma",
                    "noise_sigma", "illum", "seed"):
            assert key in rec
        manifest = read_manifest(small_dataset)
        assert manifest["commands"][0]["command"] == "synth"
        assert manifest["commands"][0]["seed"] == 17

    def test_byte_identical_rerun(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["synth", "--counts", "1:4", "--seed", "3",
                        "--out", str(out), "--workers", "1"]) == 0
        for name in sorted(os.listdir(a / "images")):
            assert (a / "images" / name).read_bytes() == (b / "images" / name).read_bytes()
        assert (a / "labels.jsonl").read_bytes() == (b / "labels.jsonl").read_bytes()


@pytest.fixture(scope="module")
def trained_bundle(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "bundle"
    code = run(["train", "--dataset", small_dataset, "--net", "number",
                "--out", str(out), "--seed", "1", "--epochs", "8",
                "--patience", "8", "--workers", "1"])
    assert code == 0
    code = run(["train", "--dataset", small_dataset, "--net", "area:1",
                "--out", str(out), "--seed", "1", "--epochs", "8",
                "--patience", "8", "--workers", "1"])
    assert code == 0
    return str(out)


class TestTrainMeasureEvaluate:
    def test_bundle_files(self, trained_bundle):
        for name in ("normalizer.json", "number_net.json", "area_net_1.json", "meta.json"):
            assert os.path.exists(os.path.join(trained_bundle, name)), name
        meta = json.load(open(os.path.join(trained_bundle, "meta.json")))
        assert "number" in meta["nets"] and "area:1" in meta["nets"]

    def test_measure_pipeline(self, small_dataset, trained_bundle, tmp_path):
        out = tmp_path / "res"
        code = run(["measure", "--bundle", trained_bundle,
                    "--images", os.path.join(small_dataset, "images"),
                    "--out", str(out), "--workers", "1"])
        assert code == 0
        summary = json.load(open(out / "summary.json"))
        assert summary["n"] > 0
        assert summary["included"] + summary["excluded"] + summary["errors"] >= 1
        assert os.path.exists(out / "audit.jsonl")

    def test_evaluate_report_fields(self, small_dataset, trained_bundle, tmp_path):
        res = tmp_path / "res"
        assert run(["measure", "--bundle", trained_bundle,
                    "--images", os.path.join(small_dataset, "images"),
                    "--out", str(res), "--workers", "1"]) == 0
        rep_dir = tmp_path / "rep"
        code = run(["evaluate", "--pred", str(res),
                    "--truth", os.path.join(small_dataset, "labels.jsonl"),
                    "--out", str(rep_dir)])
        assert code == 0
        rep = json.load(open(rep_dir / "report.json"))
        for key in ("mean_classification_accuracy", "E_dg", "E_sigma_g"):
            assert key in rep
        assert rep["n_matched"] > 0

    def test_measure_deterministic(self, small_dataset, trained_bundle, tmp_path):
        outs = []
        for name in ("m1", "m2"):
            out = tmp_path / name
            assert run(["measure", "--bundle", trained_bundle,
                        "--images", os.path.join(small_dataset, "images"),
                        "--out", str(out), "--workers", "1"]) == 0
            outs.append((out / "summary.json").read_bytes())
        assert outs[0] == outs[1]


class TestBaselineCommand:
    def test_results_jsonl_out(self, small_dataset, tmp_path):
        out = tmp_path / "bl" / "results.jsonl"
        code = run(["baseline", "--method", "wst", "--images", small_dataset,
                    "--out", str(out), "--workers", "1"])
        assert code == 0
        rows = [json.loads(l) for l in open(out)]
        assert all({"file", "count", "areas_px2"} <= set(r) for r in rows)
        assert os.path.exists(tmp_path / "bl" / "manifest.json")

    def test_dir_out_and_evaluate(self, small_dataset, tmp_path):
        out = tmp_path / "ht"
        code = run(["baseline", "--method", "ht", "--images", small_dataset,
                    "--out", str(out), "--workers", "1"])
        assert code == 0
        assert os.path.exists(out / "results.jsonl")
        code = run(["evaluate", "--pred", str(out),
                    "--truth", os.path.join(small_dataset, "labels.jsonl"),
                    "--out", str(tmp_path / "rep")])
        assert code == 0


class TestAnalyzeDistortions:
    def test_writes_distribution_json(self, small_dataset, tmp_path):
        out = tmp_path / "dists"
        code = run(["analyze-distortions", "--images", small_dataset,
                    "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "distortions.json").read_text())
        assert len(doc["blur_sigma"]) > 0
        assert len(doc["noise_sigma"]) == len(doc["blur_sigma"])
        assert all(len(row) == 3 for row in doc["illum"])
        assert all(b >= 0 for b in doc["blur_sigma"])
        assert (out / "calibration.json").exists()
        assert (out / "manifest.json").exists()

    def test_empty_dir_fails(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        code = run(["analyze-distortions", "--images", str(tmp_path / "empty"),
                    "--out", str(tmp_path / "o")])
        assert code == 1
        capsys.readouterr()


class TestEvaluateStdout:
    def test_report_printed_without_out(self, small_dataset, tmp_path, capsys):
        out = tmp_path / "bl"
        assert run(["baseline", "--method", "ue", "--images", small_dataset,
                    "--out", str(out), "--workers", "1"]) == 0
        code = run(["evaluate", "--pred", str(out),
                    "--truth", os.path.join(small_dataset, "labels.jsonl")])
        assert code == 0
        rep = json.loads(capsys.readouterr().out)
        assert "mean_classification_accuracy" in rep


class TestSweepCommand:
    def test_neurons_sweep_outputs(self, small_dataset, tmp_path):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text("[sweep]\nneuron_grid = [1, 2]\nseeds = 2\nepochs = 4\n")
        out = tmp_path / "sweep"
        code = run(["sweep", "--kind", "neurons", "--dataset", small_dataset,
                    "--net", "number", "--config", str(cfg), "--out", str(out),
                    "--seed", "0", "--workers", "1"])
        assert code == 0
        lines = open(out / "sweep.csv").read().splitlines()
        assert lines[0] == "x,mean,std"
        assert len(lines) == 3
        bounds = json.load(open(out / "bounds.json"))
        assert bounds == {"lower": 6, "upper_exclusive": 26, "approx": 15}
        assert os.path.exists(out / "sweep.svg")
