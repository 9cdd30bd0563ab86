import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from imumix import pipeline
from imumix.cli import main
from imumix.dro import read_weights_json
from imumix.ingest import STANDARD_GRAVITY, read_domain_store
from imumix.mixture import mixture_sizes, read_mixture
from imumix.synth import SyntheticDomainSpec, SyntheticSpec, generate_trace, write_synthetic

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = ("optimize/weights.json", "optimize/trajectory.csv", "optimize/trace.jsonl",
             "reference/baseline_losses.csv", "reference/checkpoint.bin",
             "mixture/manifest.json", "mixture/windows.f32", "mixture/labels.csv", "mixture/mixture_manifest.json")


def tiny_config(n_windows=12):
    cfg = pipeline.desk_config()
    for d in cfg["synthetic"]["domains"]:
        d["n_windows"] = n_windows
    cfg["model"] = {"num_layers": 1, "d_model": 16, "num_heads": 2}
    cfg["train"] = {"batch_size": 16, "epochs": 2}
    cfg["dro"] = {"eta": 0.001, "c": 0.01, "steps": 10}
    return cfg


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def digest(root):
    return {a: hashlib.sha256((root / a).read_bytes()).hexdigest() for a in ARTIFACTS}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("tiny")
    conf = write_config(base / "tiny.json", tiny_config())
    assert main(["run-all", "--config", conf, "--out", str(base / "a")]) == 0
    return base, conf


class TestConfig:
    def test_bundled_config_matches_builtin(self):
        builtin = json.loads(json.dumps(pipeline.desk_config()))
        assert json.loads((ROOT / "configs" / "synthetic.json").read_text()) == builtin

    def test_paper_scale_config_loads(self):
        cfg = pipeline.PipelineConfig.load(ROOT / "configs" / "paper_scale.json")
        assert cfg.train_config("x").epochs == 200 and cfg.dro_config().steps == 1000

    def test_unknown_keys(self):
        cfg = tiny_config()
        cfg["model"]["depth"] = 3
        with pytest.raises(pipeline.ConfigError, match="depth"):
            pipeline.PipelineConfig.from_dict(cfg)
        cfg = tiny_config()
        cfg["extra"] = 1
        with pytest.raises(pipeline.ConfigError, match="extra"):
            pipeline.PipelineConfig.from_dict(cfg)

    def test_reference_epochs_default(self):
        cfg = tiny_config()
        del cfg["train"]["epochs"]
        assert pipeline.PipelineConfig.from_dict(cfg).train_config("r").epochs == 200

    def test_stage_seeds_independent(self):
        s = {pipeline.stage_seed(0, t) for t in ("synth", "reference", "proxy", "dro", "mixture")}
        assert len(s) == 5
        assert pipeline.stage_seed(3, "dro") == pipeline.stage_seed(3, "dro")


class TestSynth:
    def test_static_trace_is_gravity(self):
        spec = SyntheticDomainSpec("s", n_windows=2, motion_freqs=(), motion_amps=(), tilt_freqs=(),
                                   tilt_amps_deg=(), noise_sigma=0.0, gyro_noise_sigma=0.0)
        tr = generate_trace(spec, np.random.default_rng(0))
        np.testing.assert_allclose(tr.body[:, :3], np.tile([0, 0, STANDARD_GRAVITY], (len(tr.t), 1)), atol=1e-12)
        np.testing.assert_allclose(tr.body[:, 3:], 0, atol=1e-9)

    def test_files_deterministic(self, tmp_path):
        spec = SyntheticSpec([SyntheticDomainSpec("a", n_windows=3)], seed=4)
        write_synthetic(spec, tmp_path / "x")
        write_synthetic(spec, tmp_path / "y")
        for f in ("a.csv", "a.json"):
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


class TestStages:
    def test_window_counts(self, tiny_run):
        base, _ = tiny_run
        for i, name in enumerate(("easy_a", "hard", "easy_b")):
            d, _ = read_domain_store(base / "a" / "domains" / f"{i:02d}_{name}")
            # 12 blocks of 6 s cycling through five labels; Sitting and Standing merge into Still
            assert d.size == 12
            assert d.label_histogram() == {"Walking": 3, "Upstairs": 3, "Downstairs": 2, "Still": 4}

    def test_reference_outputs(self, tiny_run):
        base, _ = tiny_run
        rows = (base / "a" / "reference" / "baseline_losses.csv").read_text().splitlines()
        assert len(rows) - 1 == 36
        summary = json.loads((base / "a" / "reference" / "summary.json").read_text())
        assert summary["rows"] == 36 and summary["epochs"] == 2
        np.testing.assert_allclose(summary["weights"], [1 / 3] * 3)

    def test_optimize_outputs(self, tiny_run):
        base, _ = tiny_run
        w, names, _ = read_weights_json(base / "a" / "optimize" / "weights.json")
        assert names == ["easy_a", "hard", "easy_b"]
        assert abs(w.alpha.sum() - 1) <= 1e-12 and w.alpha.min() >= 0.01 / 3
        assert len((base / "a" / "optimize" / "trajectory.csv").read_text().splitlines()) == 11
        assert (base / "a" / "optimize" / "trajectory.svg").read_text().startswith("<svg")

    def test_mix_matches_plan(self, tiny_run, capsys):
        base, conf = tiny_run
        w, _, _ = read_weights_json(base / "a" / "optimize" / "weights.json")
        domain, manifest = read_mixture(base / "a" / "mixture")
        plan = mixture_sizes([12, 12, 12], w)
        assert [d["count"] for d in manifest["domains"]] == plan.counts.tolist()
        assert domain.size == manifest["num_windows"]
        assert main(["mix", "--config", conf, "--out", str(base / "a")]) == 0
        printed = capsys.readouterr().out
        assert f"usage fraction {manifest['usage_fraction']:.6f}" in printed

    def test_report_durations(self, tiny_run, capsys):
        base, conf = tiny_run
        rep = json.loads((base / "a" / "report.json").read_text())
        assert set(rep["durations_seconds"]) == {"synth", "preprocess", "reference", "optimize", "mix"}
        assert main(["report", "--config", conf, "--out", str(base / "a")]) == 0
        assert json.loads(capsys.readouterr().out)["mixture"]["num_windows"] == rep["mixture"]["num_windows"]

    def test_run_all_deterministic(self, tiny_run):
        base, conf = tiny_run
        assert main(["run-all", "--config", conf, "--out", str(base / "b")]) == 0
        assert digest(base / "a") == digest(base / "b")

    def test_stagewise_equals_run_all(self, tiny_run):
        base, conf = tiny_run
        out = str(base / "c")
        for stage in ("synth", "preprocess", "reference", "optimize", "mix"):
            assert main([stage, "--config", conf, "--out", out]) == 0
        assert digest(base / "a") == digest(base / "c")

    def test_preprocess_rerun_byte_identical(self, tiny_run):
        base, conf = tiny_run
        store = base / "a" / "domains" / "01_hard" / "windows.f32"
        before = store.read_bytes()
        assert main(["preprocess", "--config", conf, "--out", str(base / "a")]) == 0
        assert store.read_bytes() == before

    def test_other_seed_differs(self, tiny_run):
        base, conf = tiny_run
        assert main(["synth", "--config", conf, "--out", str(base / "s1"), "--seed", "1"]) == 0
        assert (base / "s1" / "raw" / "hard.csv").read_bytes() != (base / "a" / "raw" / "hard.csv").read_bytes()


class TestExitCodes:
    def test_missing_dataset(self, tmp_path, capsys):
        cfg = tiny_config()
        del cfg["synthetic"]
        cfg["datasets"] = ["nowhere.json"]
        conf = write_config(tmp_path / "c.json", cfg)
        assert main(["preprocess", "--config", conf, "--out", str(tmp_path / "o")]) == 2
        assert "nowhere.json" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["preprocess", "--config", str(tmp_path / "none.json")]) == 2

    def test_negative_seed(self, tmp_path):
        assert main(["synth", "--seed", "-1", "--out", str(tmp_path)]) == 2

    def test_optimize_without_baseline(self, tmp_path, capsys):
        conf = write_config(tmp_path / "c.json", tiny_config(n_windows=3))
        out = str(tmp_path / "o")
        assert main(["synth", "--config", conf, "--out", out]) == 0
        assert main(["preprocess", "--config", conf, "--out", out]) == 0
        assert main(["optimize", "--config", conf, "--out", out]) == 4
        assert "imumix optimize" in capsys.readouterr().err

    def test_mix_without_weights(self, tmp_path):
        conf = write_config(tmp_path / "c.json", tiny_config(n_windows=3))
        out = str(tmp_path / "o")
        main(["synth", "--config", conf, "--out", out])
        main(["preprocess", "--config", conf, "--out", out])
        assert main(["mix", "--config", conf, "--out", out]) == 4

    def test_run_all_names_failing_stage(self, tmp_path, capsys):
        cfg = tiny_config(n_windows=3)
        del cfg["synthetic"]
        cfg["datasets"] = ["missing.json"]
        conf = write_config(tmp_path / "c.json", cfg)
        assert main(["run-all", "--config", conf, "--out", str(tmp_path / "o")]) == 2
        assert capsys.readouterr().err.startswith("imumix preprocess:")

    def test_infeasible_plan(self, tiny_run, tmp_path):
        base, conf = tiny_run
        import shutil
        out = tmp_path / "o"
        shutil.copytree(base / "a", out)
        wpath = out / "optimize" / "weights.json"
        w = json.loads(wpath.read_text())
        w["domains"][0]["weight"] = 0.0
        w["domains"][1]["weight"] = 1.0
        wpath.write_text(json.dumps(w))
        assert main(["mix", "--config", conf, "--out", str(out)]) == 5
