"""End-to-end command-line flows on tiny workloads."""

import json
import os

import numpy as np
import pytest

from mpsim import fileio
from mpsim.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes") / "plain"
    assert run("gen", "--preset", "plain", "--seed", "3", "--out", d) == 0
    return d


class TestGen:
    def test_layout_and_determinism(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run("gen", "--preset", "sphere", "--seed", "7", "--out", a) == 0
        assert run("gen", "--preset", "sphere", "--seed", "7", "--out", b) == 0
        names = sorted(os.listdir(a / "images"))
        assert names == [f"{i:02d}.pgm" for i in range(5)]
        for rel in ["cams.txt", "gt_depth.pfm", "spec.json", "images/00.pgm"]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
        assert json.loads((a / "run_manifest.json").read_text())["command"] == "gen"

    def test_gt_depth_within_range(self, scene_dir):
        depth, mask = fileio.read_depth_pfm(scene_dir / "gt_depth.pfm")
        spec = json.loads((scene_dir / "spec.json").read_text())
        assert depth[mask].min() >= spec["z_min"] - 1e-6
        assert depth[mask].max() <= spec["z_max"] + 1e-6

    def test_five_camera_blocks(self, scene_dir):
        cams = fileio.read_cameras(scene_dir / "cams.txt")
        assert len(cams) == 5

    def test_custom_spec_json(self, tmp_path):
        spec = {
            "surfaces": [{"kind": "plane", "depth": 0.7}],
            "view_count": 3,
            "image_size": 160,
            "seed": 4,
        }
        sp = tmp_path / "spec.json"
        sp.write_text(json.dumps(spec))
        out = tmp_path / "s"
        assert run("gen", "--spec", sp, "--out", out) == 0
        assert len(fileio.read_cameras(out / "cams.txt")) == 3
        # the default depth range is 0.45..1.0 m; gt must respect it
        written = json.loads((out / "spec.json").read_text())
        assert (written["z_min"], written["z_max"]) == (0.45, 1.0)
        depth, mask = fileio.read_depth_pfm(out / "gt_depth.pfm")
        assert depth[mask].min() >= 0.45 - 1e-6
        assert depth[mask].max() <= 1.0 + 1e-6


class TestSample:
    def test_cache_written_balanced(self, scene_dir, tmp_path):
        out = tmp_path / "patches.mpsp"
        assert (
            run(
                "sample", "--scene", scene_dir, "--out", out,
                "--count", "40", "--plane-count", "48", "--seed", "5",
            )
            == 0
        )
        patches, labels = fileio.load_patches(out)
        assert patches.shape == (40, 5, 32, 32)
        assert labels.sum() == 20


class TestSweepEval:
    def test_zncc_sweep_outputs(self, scene_dir, tmp_path):
        out = tmp_path / "sw"
        assert (
            run(
                "sweep", "--scene", scene_dir, "--measure", "zncc",
                "--plane-count", "16", "--out", out,
            )
            == 0
        )
        for name in ("depth.pfm", "conf.pfm", "heatmap.ppm", "run_manifest.json"):
            assert (out / name).exists()
        depth, mask = fileio.read_depth_pfm(out / "depth.pfm")
        assert mask.mean() > 0.3
        assert 0.55 <= depth[mask].min() and depth[mask].max() <= 0.95
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["measure"] == "zncc"
        assert manifest["config"]["plane_count"] == 16

    def test_eval_of_gt_is_zero(self, scene_dir, tmp_path):
        out = tmp_path / "ev"
        assert (
            run(
                "eval",
                "--est", scene_dir / "gt_depth.pfm",
                "--gt", scene_dir / "gt_depth.pfm",
                "--cams", scene_dir / "cams.txt",
                "--out", out,
            )
            == 0
        )
        res = json.loads((out / "eval.json").read_text())
        assert res["accuracy_mean_mm"] == 0.0
        assert res["accuracy_median_mm"] == 0.0
        assert res["completeness_mean_mm"] == 0.0
        assert res["completeness_median_mm"] == 0.0
        assert res["truncation_mm"] == 20.0

    def test_eval_trunc_flag_echoed(self, scene_dir, tmp_path):
        out = tmp_path / "ev2"
        assert (
            run(
                "eval",
                "--est", scene_dir / "gt_depth.pfm",
                "--gt", scene_dir / "gt_depth.pfm",
                "--cams", scene_dir / "cams.txt",
                "--trunc-mm", "10",
                "--out", out,
            )
            == 0
        )
        assert json.loads((out / "eval.json").read_text())["truncation_mm"] == 10.0

    def test_eval_list_emits_row_per_object(self, scene_dir, tmp_path):
        # per-object evaluation over several scenes, one result row each
        other = tmp_path / "other"
        assert run("gen", "--preset", "slanted", "--seed", "8", "--out", other) == 0
        entries = [
            {"name": "plain", "est": str(scene_dir / "gt_depth.pfm"),
             "gt": str(scene_dir / "gt_depth.pfm"),
             "cams": str(scene_dir / "cams.txt")},
            {"name": "slanted", "est": str(other / "gt_depth.pfm"),
             "gt": str(other / "gt_depth.pfm"),
             "cams": str(other / "cams.txt")},
        ]
        lst = tmp_path / "objects.json"
        lst.write_text(json.dumps(entries))
        out = tmp_path / "rows"
        assert run("eval", "--list", lst, "--out", out) == 0
        rows = json.loads((out / "eval.json").read_text())["rows"]
        assert [r["name"] for r in rows] == ["plain", "slanted"]
        assert all(r["accuracy_mean_mm"] == 0.0 for r in rows)

    def test_zncc_heatmap_uniformly_blue_on_plane_scene(self, scene_dir, tmp_path):
        # noise-free plane scene: sub-millimeter errors everywhere, so the
        # error map stays in the blue end of the ramp wherever evaluated
        out = tmp_path / "blue"
        assert (
            run(
                "sweep", "--scene", scene_dir, "--measure", "zncc",
                "--plane-count", "32", "--out", out,
            )
            == 0
        )
        rgb = fileio.read_ppm(out / "heatmap.ppm").astype(int)
        evaluated = rgb.sum(axis=2) > 0
        assert evaluated.mean() > 0.3
        blue_dominant = rgb[..., 2] > rgb[..., 0] + 50
        assert blue_dominant[evaluated].mean() > 0.98

    def test_learned_measure_requires_weights(self, scene_dir, tmp_path):
        assert (
            run(
                "sweep", "--scene", scene_dir, "--measure", "learnedN",
                "--plane-count", "4", "--out", tmp_path / "x",
            )
            == 1
        )

    def test_dump_slices(self, scene_dir, tmp_path):
        out = tmp_path / "sl"
        assert (
            run(
                "sweep", "--scene", scene_dir, "--measure", "sad",
                "--plane-count", "3", "--out", out, "--dump-slices",
            )
            == 0
        )
        assert (out / "slice_000.pfm").exists()
        assert (out / "slice_002.pfm").exists()


class TestTrain:
    def test_train_resume_and_outputs(self, tmp_path):
        scene = tmp_path / "sc"
        assert run("gen", "--preset", "plain", "--seed", "9", "--out", scene) == 0
        out = tmp_path / "tr"
        args = [
            "train", "--scenes", scene, "--out", out,
            "--iterations", "3", "--samples-per-scene", "40",
            "--plane-count", "48", "--head-width", "16", "--seed", "1",
        ]
        assert run(*args) == 0
        wpath = out / "weights.mpsw"
        assert wpath.exists()
        curve = (out / "loss_curve.csv").read_text().strip().splitlines()
        assert curve[0] == "iteration,loss"
        assert len(curve) == 4
        first_bytes = wpath.read_bytes()
        # resume continues the curve
        assert (
            run(*args, "--resume", wpath, "--start-iteration", "3") == 0
        )
        curve2 = (out / "loss_curve.csv").read_text().strip().splitlines()
        assert len(curve2) == 7
        assert curve2[4].startswith("3,")
        assert wpath.read_bytes() != first_bytes

    def test_train_determinism(self, tmp_path):
        scene = tmp_path / "sc2"
        assert run("gen", "--preset", "plain", "--seed", "9", "--out", scene) == 0
        outs = []
        for name in ("t1", "t2"):
            out = tmp_path / name
            assert (
                run(
                    "--threads", "1",
                    "train", "--scenes", scene, "--out", out,
                    "--iterations", "2", "--samples-per-scene", "20",
                    "--plane-count", "48", "--head-width", "8", "--seed", "2",
                )
                == 0
            )
            outs.append((out / "weights.mpsw").read_bytes())
        assert outs[0] == outs[1]

    def test_schedule_defaults_mirror_paper(self):
        from mpsim.cli import _TRAIN_DEFAULTS

        assert _TRAIN_DEFAULTS["base_lr"] == 1e-3
        assert _TRAIN_DEFAULTS["decay_factor"] == 0.1
        assert _TRAIN_DEFAULTS["batch_size"] == 64

    def test_config_file_and_flag_precedence(self, tmp_path):
        scene = tmp_path / "sc3"
        assert run("gen", "--preset", "plain", "--seed", "9", "--out", scene) == 0
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"iterations": 2, "samples_per_scene": 20,
                                   "head_width": 8, "plane_count": 48}))
        out = tmp_path / "tr3"
        assert (
            run("train", "--scenes", scene, "--out", out, "--config", cfg,
                "--head-width", "12") == 0
        )
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["iterations"] == 2  # from file
        assert manifest["config"]["head_width"] == 12  # flag overrides file


class TestGradcheckBench:
    def test_gradcheck_passes(self, tmp_path):
        out = tmp_path / "gc"
        assert run("gradcheck", "--seed", "0", "--out", out) == 0
        rep = json.loads((out / "gradcheck.json").read_text())
        assert rep["pass"] is True
        assert rep["max_rel_err"] < 1e-4

    def test_bench_reports_backends(self, tmp_path):
        from mpsim import backend

        out = tmp_path / "bench"
        assert run("bench", "--out", out) == 0
        rep = json.loads((out / "bench.json").read_text())
        assert set(rep) == set(backend.available())
        for stats in rep.values():
            assert stats["train_iter_ms"] > 0
            assert stats["learned_scores_per_s"] > 0


class TestExitCodes:
    def test_unknown_flag_is_validation_error(self):
        assert run("sweep", "--nonsense") == 1

    def test_missing_scene_is_validation_error(self, tmp_path):
        assert run("sweep", "--scene", tmp_path / "nope", "--out", tmp_path / "o") == 1

    def test_bad_threads_rejected(self):
        assert run("--threads", "0", "gradcheck") == 1

    def test_help_exits_zero(self):
        assert run("--help") == 0
