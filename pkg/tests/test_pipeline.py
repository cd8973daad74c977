"""
Pytest tests for the staged pipeline: config loading, the hash manifest,
stage reuse, skipping, determinism and CLI exit codes.
Runs on the synthetic demo inputs with reduced settings.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import app
import core.pipeline as pipeline_module
from core.embeddings import StubEmbeddingProvider
from core.errors import ConfigValidationError, ProviderError, StageError, exit_code_for
from core.mesh import load_obj
from core.pipeline import GarmentPipeline, config_from_dict, load_pipeline_config, run_pipeline
from core.demo import make_demo

QUICK = {
    "optimizer": {"iterations": 4, "cameras_per_iter": 1, "surface_samples": 200, "resolution": [32, 32],
                  "checkpoint_every": 2, "workers": 1, "log_every": 0, "show_progress": False},
    "texture": {"size": 32, "dilation": 1},
    "fit": {"stage_iterations": [3, 3, 2], "samples": 100, "log_every": 0, "show_progress": False},
    "evaluation": {"views": 2, "resolution": [32, 32]},
}


class FailingProvider(StubEmbeddingProvider):
    def embed(self, image):
        raise ProviderError("service unavailable")


def write_demo(directory, **changes):
    """Demo inputs with a config small enough for unit tests."""
    paths = make_demo(directory, view_resolution=(48, 48), texture_size=32)
    data = json.loads(paths["config"].read_text())
    for section, values in QUICK.items():
        data[section] = dict(data.get(section) or {}, **values)
    data.update(changes)
    paths["config"].write_text(json.dumps(data, indent=2))
    return paths


@pytest.fixture(autouse=True)
def texel_cache(tmp_path, monkeypatch):
    monkeypatch.setattr(pipeline_module, "TEXEL_CACHE_DIR", tmp_path / "texel_cache")


@pytest.fixture
def demo(tmp_path):
    return write_demo(tmp_path / "demo")


# ── Demo Inputs ───────────────────────────────────────────────────────────

class TestDemo:
    """Synthetic input generation."""

    def test_files_written(self, demo):
        for key in ("base", "guide", "guidance", "body", "cameras", "config"):
            assert demo[key].is_file(), key
        views = json.loads(demo["cameras"].read_text())["views"]
        assert [v["tag"] for v in views][:2] == ["front", "back"]
        for v in views:
            assert (demo["cameras"].parent / v["image"]).is_file()

    def test_config_paths_resolve(self, demo):
        config = load_pipeline_config(demo["config"])
        assert config.base_mesh == demo["base"]
        assert config.views_dir == demo["cameras"].parent
        assert config.optimizer.iterations == 4
        config.validate()


# ── Config ────────────────────────────────────────────────────────────────

class TestPipelineConfig:
    """Config parsing and validation."""

    def minimal(self, **extra):
        data = {"base_mesh": "base.obj", "guide_mesh": "guide.obj", "guidance_image": "guidance.png"}
        data.update(extra)
        return data

    def test_defaults(self, tmp_path):
        config = config_from_dict(self.minimal(), base_dir=tmp_path)
        assert config.base_mesh == tmp_path / "base.obj"
        assert config.provider == "stub"
        assert config.body_file is None

    def test_seed_override_reaches_every_stage(self, tmp_path):
        config = config_from_dict(self.minimal(seed=3, fit={"seed": 9}), base_dir=tmp_path, seed=11)
        assert config.seed == 11
        assert config.optimizer.seed == 11
        assert config.fit.seed == 11

    def test_top_level_weights(self, tmp_path):
        weights = {"w_cd": 1.0, "w_lap": 0.5, "w_triag": 0.0, "w_2d": 0.0, "w_e": 0.0}
        config = config_from_dict(self.minimal(weights=weights), base_dir=tmp_path)
        assert config.optimizer.weights.w_lap == 0.5

    def test_endpoint_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(pipeline_module.EMBED_ENDPOINT_ENV, "http://embed.local:9000/embed")
        config = config_from_dict(self.minimal(endpoint="http://other/embed"), base_dir=tmp_path)
        assert config.endpoint == "http://embed.local:9000/embed"

    @pytest.mark.parametrize(
        "data",
        [
            {"base_mesh": "base.obj", "guide_mesh": "guide.obj"},
            {"base_mesh": "base.obj", "guide_mesh": "guide.obj", "guidance_image": "g.png", "colour": 1},
            {"base_mesh": "base.obj", "guide_mesh": "guide.obj", "guidance_image": "g.png",
             "optimizer": {"iteration": 5}},
            {"base_mesh": "base.obj", "guide_mesh": "guide.obj", "guidance_image": "g.png",
             "texture": {"size": 0}},
            {"base_mesh": "base.obj", "guide_mesh": "guide.obj", "guidance_image": "g.png",
             "evaluation": {"views": 0}},
        ],
        ids=["missing-image", "unknown-key", "unknown-optimizer-key", "texture-size", "views"],
    )
    def test_invalid(self, data, tmp_path):
        with pytest.raises(ConfigValidationError):
            config_from_dict(data, base_dir=tmp_path)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ConfigValidationError):
            load_pipeline_config(path)
        with pytest.raises(ConfigValidationError):
            load_pipeline_config(tmp_path / "absent.json")

    def test_missing_inputs_found_before_running(self, tmp_path):
        config = config_from_dict(self.minimal(output_dir="out"), base_dir=tmp_path)
        with pytest.raises(ConfigValidationError) as excinfo:
            run_pipeline(config)
        assert "base_mesh" in str(excinfo.value)
        assert not (tmp_path / "out").exists()

    def test_unknown_stage(self, demo):
        with pytest.raises(ConfigValidationError):
            run_pipeline(load_pipeline_config(demo["config"]), stage="polish")


# ── Running ───────────────────────────────────────────────────────────────

class TestPipelineRun:
    """Stages, manifest and reuse."""

    def test_full_run(self, demo):
        config = load_pipeline_config(demo["config"])
        result = run_pipeline(config)
        assert result.statuses == {s: "done" for s in ("align", "deform", "evaluate", "texture", "fit")}

        out = config.output_dir
        for rel in ("align/guide_aligned.obj", "align/alignment.json", "deform/deformed.obj",
                    "deform/checkpoint.g3dg", "deform/loss.csv", "evaluate/report.json",
                    "texture/garment.png", "texture/garment.obj", "fit/fit_params.json", "fit/body_posed.obj"):
            assert (out / rel).is_file(), rel

        base = load_obj(demo["base"])
        deformed = load_obj(out / "deform" / "deformed.obj")
        np.testing.assert_array_equal(deformed.faces, base.faces)

        alignment = json.loads((out / "align" / "alignment.json").read_text())
        assert "yaw_degrees" in alignment

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["completed"] == ["align", "deform", "evaluate", "texture", "fit"]
        assert set(manifest["stages"]["deform"]["outputs"]) == {
            "deform/deformed.obj", "deform/checkpoint.g3dg", "deform/loss.csv"
        }
        report = json.loads((out / "evaluate" / "report.json").read_text())
        assert len(report["views"]) == 2

    def test_rerun_reuses_everything(self, demo):
        config = load_pipeline_config(demo["config"])
        first = run_pipeline(config)
        second = run_pipeline(load_pipeline_config(demo["config"]))
        assert set(second.statuses.values()) == {"cached"}
        assert second.manifest.output_hashes() == first.manifest.output_hashes()

    def test_settings_change_reruns_only_that_stage(self, demo):
        run_pipeline(load_pipeline_config(demo["config"]))
        data = json.loads(demo["config"].read_text())
        data["texture"]["dilation"] = 2
        demo["config"].write_text(json.dumps(data))
        result = run_pipeline(load_pipeline_config(demo["config"]))
        assert result.statuses == {"align": "cached", "deform": "cached", "evaluate": "cached",
                                   "texture": "done", "fit": "cached"}

    def test_edited_output_is_recomputed(self, demo):
        config = load_pipeline_config(demo["config"])
        run_pipeline(config)
        report = config.output_dir / "evaluate" / "report.json"
        report.write_text("{}")
        result = run_pipeline(load_pipeline_config(demo["config"]))
        assert result.statuses["evaluate"] == "done"
        assert result.statuses["deform"] == "cached"
        assert json.loads(report.read_text())["views"]

    def test_stage_runs_dependencies_only(self, demo):
        result = run_pipeline(load_pipeline_config(demo["config"]), stage="deform")
        assert list(result.records) == ["align", "deform"]
        assert not (load_pipeline_config(demo["config"]).output_dir / "evaluate").exists()

    def test_optional_stages_skipped(self, tmp_path):
        paths = write_demo(tmp_path / "demo", views_dir=None, body_file=None)
        result = run_pipeline(load_pipeline_config(paths["config"]))
        assert result.statuses["texture"] == "skipped"
        assert result.statuses["fit"] == "skipped"
        assert result.statuses["deform"] == "done"
        assert "views_dir" in result.records["texture"].error

    def test_provider_failure(self, demo):
        config = load_pipeline_config(demo["config"])
        run_pipeline(config, stage="deform")
        # same provider id as the stub, so align and deform are reused
        with pytest.raises(StageError) as excinfo:
            GarmentPipeline(config, provider=FailingProvider()).run(stage="evaluate")
        assert excinfo.value.stage == "evaluate"
        assert exit_code_for(excinfo.value) == 4
        manifest = json.loads((config.output_dir / "manifest.json").read_text())
        assert manifest["stages"]["evaluate"]["status"] == "failed"
        assert manifest["stages"]["deform"]["status"] == "done"

    def test_broken_input_fails_stage(self, demo):
        demo["base"].write_text("v 0 0 0\nf 1 2 3\n")
        with pytest.raises(StageError) as excinfo:
            run_pipeline(load_pipeline_config(demo["config"]))
        assert excinfo.value.stage == "align"
        assert exit_code_for(excinfo.value) == 3

    def test_same_seed_same_outputs(self, tmp_path):
        first = write_demo(tmp_path / "a")
        second = write_demo(tmp_path / "b")
        a = run_pipeline(load_pipeline_config(first["config"]))
        b = run_pipeline(load_pipeline_config(second["config"]))
        assert a.manifest.output_hashes() == b.manifest.output_hashes()

    @pytest.mark.slow
    def test_demo_settings_deterministic(self, tmp_path):
        hashes = []
        for name in ("a", "b"):
            paths = make_demo(tmp_path / name)
            hashes.append(run_pipeline(load_pipeline_config(paths["config"])).manifest.output_hashes())
        assert hashes[0] == hashes[1]


# ── CLI ───────────────────────────────────────────────────────────────────

class TestCli:
    """Exit codes of app.main."""

    def test_make_demo_then_deform(self, tmp_path):
        assert app.main(["make-demo", "--out", str(tmp_path / "demo")]) == 0
        config = tmp_path / "demo" / "run.json"
        data = json.loads(config.read_text())
        data["optimizer"].update(QUICK["optimizer"])
        config.write_text(json.dumps(data))
        assert app.main(["deform", "--config", str(config)]) == 0
        assert (tmp_path / "demo" / "output" / "deform" / "deformed.obj").is_file()
        assert not (tmp_path / "demo" / "output" / "texture").exists()

    def test_stage_option_runs_dependencies(self, demo, capsys):
        assert app.main(["pipeline", "--config", str(demo["config"]), "--stage", "evaluate"]) == 0
        manifest = json.loads((demo["config"].parent / "output" / "manifest.json").read_text())
        assert manifest["completed"] == ["align", "deform", "evaluate"]

        capsys.readouterr()
        with pytest.raises(SystemExit):
            app.main(["pipeline", "--help"])
        assert "depends on" in " ".join(capsys.readouterr().out.split())

    def test_missing_config(self, tmp_path):
        assert app.main(["pipeline", "--config", str(tmp_path / "absent.json")]) == 2

    def test_stage_failure(self, demo):
        demo["guide"].write_text("v 0 0 0\nv 1 0 0\nf 1 2 9\n")
        assert app.main(["pipeline", "--config", str(demo["config"]), "--stage", "align"]) == 3

    def test_make_test_body(self, tmp_path):
        assert app.main(["make-test-body", "--out", str(tmp_path / "body.g3db"),
                         "--obj", str(tmp_path / "body.obj")]) == 0
        assert (tmp_path / "body.g3db").is_file()
        assert (tmp_path / "body.obj").is_file()

    def test_exit_code_mapping(self):
        assert exit_code_for(ConfigValidationError("bad")) == 2
        assert exit_code_for(StageError("deform", RuntimeError("boom"))) == 3
        assert exit_code_for(StageError("evaluate", ProviderError("down"))) == 4
        assert exit_code_for(ProviderError("down")) == 4
        assert exit_code_for(KeyError("x")) == 3
