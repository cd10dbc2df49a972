import json
import subprocess
import sys

import pytest

from tumortriage import __version__
from tumortriage.cli import build_parser, main

SMALL_SYNTH = ["synth", "--tumor", "2", "--normal", "2", "--width", "256", "--height", "256",
               "--tile-size", "128", "--nodules", "1-2", "--radius-min", "20",
               "--radius-max", "28"]
SMALL_PATCH = ["--patch-size", "32", "--pos", "8", "--neg-tumor", "8", "--neg-normal", "12"]


def run(out, *argv):
    return main(["--out-dir", str(out), *map(str, argv)])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    d = {name: root / name for name in ("synth", "patch", "train", "eval", "infer")}
    assert run(d["synth"], *SMALL_SYNTH) == 0
    manifest = d["synth"] / "manifest.json"
    assert run(d["patch"], "patch", manifest, *SMALL_PATCH) == 0
    assert run(d["train"], "train", d["patch"] / "patches", "--epochs", "1",
               "--batch-size", "8") == 0
    model = d["train"] / "model.ptri"
    assert run(d["eval"], "eval", model, d["patch"] / "patches", "--n-boot", "50",
               "--plot") == 0
    entry = json.loads(manifest.read_text())["entries"][0]
    slide, mask = d["synth"] / entry["slide"], d["synth"] / entry["mask"]
    assert run(d["infer"], "infer", model, slide, "--mask", mask, "--overlay") == 0
    return d


def test_pipeline_artifacts(pipeline):
    assert (pipeline["synth"] / "manifest.json").is_file()
    assert (pipeline["patch"] / "patches" / "template.json").is_file()
    for name in ("model.ptri", "train_run.json"):
        assert (pipeline["train"] / name).is_file()
    metrics = json.loads((pipeline["eval"] / "metrics.json").read_text())
    assert 0 <= metrics["accuracy"] <= 1
    assert (pipeline["eval"] / "roc.csv").read_text().startswith("threshold")
    for name in ("heatmap.png", "heatmap.json", "comparison.json", "overlay.png"):
        assert (pipeline["infer"] / name).is_file()


@pytest.mark.parametrize("step", ["synth", "patch", "train", "eval", "infer"])
def test_run_record_and_replay(pipeline, step, tmp_path, capsys):
    record = json.loads((pipeline[step] / "run.json").read_text())
    assert record["tool"] == "tumortriage" and record["version"] == __version__
    assert record["command"] == step and record["seeds"] == {"global": 0}
    assert record["artifacts"] and record["timing_dependent"] == []
    assert "out_dir" not in record["config"]
    assert run(tmp_path / "again", "replay", pipeline[step] / "run.json") == 0
    assert "byte-identical" in capsys.readouterr().out
    again = (tmp_path / "again" / "run.json").read_bytes()
    assert again == (pipeline[step] / "run.json").read_bytes()


def test_replay_into_same_directory_refused(pipeline, capsys):
    assert run(pipeline["synth"], "replay", pipeline["synth"] / "run.json") == 2


def test_replay_detects_tampering(pipeline, tmp_path, capsys):
    record = json.loads((pipeline["synth"] / "run.json").read_text())
    name = next(iter(record["artifacts"]))
    record["artifacts"][name] = "0" * 64
    fake = tmp_path / "run.json"
    fake.write_text(json.dumps(record))
    assert run(tmp_path / "out", "replay", fake) == 4
    assert capsys.readouterr().err.startswith("error: data-invariant:")


def test_train_defaults_follow_the_study():
    parser, _ = build_parser()
    args = parser.parse_args(["train", "p"])
    assert (args.epochs, args.lr, args.arch) == (10, 0.01, "mobile")
    args = parser.parse_args(["infer", "m", "s"])
    assert args.threshold == 0.9


def test_global_flags_after_subcommand(tmp_path):
    assert main(["synth", "--width", "128", "--height", "128", "--tile-size", "64",
                 "--nodules", "0", "--out-dir", str(tmp_path), "--seed", "4"]) == 0
    assert json.loads((tmp_path / "run.json").read_text())["seeds"] == {"global": 4}


def test_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("TRIAGE_OUT_DIR", str(tmp_path / "env"))
    monkeypatch.setenv("TRIAGE_THREADS", "2")
    assert main(["synth", "--width", "128", "--height", "128", "--tile-size", "64",
                 "--nodules", "0"]) == 0
    assert json.loads((tmp_path / "env" / "run.json").read_text())["threads"] == 2
    monkeypatch.setenv("TRIAGE_THREADS", "many")
    assert main(["bench"]) == 2


@pytest.mark.parametrize("argv,code,category", [
    (["train"], 2, "usage"),
    (["frobnicate"], 2, "usage"),
    (["--threads", "0", "bench"], 2, "usage"),
    (["segment", "/nonexistent/slide"], 3, "io"),
    (["synth", "--width", "64", "--height", "64", "--tile-size", "64", "--nodules", "5",
      "--radius-min", "60", "--radius-max", "60"], 4, "data-invariant"),
])
def test_exit_codes(argv, code, category, tmp_path, capsys):
    assert main(["--out-dir", str(tmp_path), *argv]) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error: {category}:")


def test_bench_marks_timing_artifacts(tmp_path):
    assert run(tmp_path, "bench", "--input-size", "32", "--batch", "2", "--warmup", "1",
               "--reps", "10") == 0
    record = json.loads((tmp_path / "run.json").read_text())
    assert record["timing_dependent"] == ["bench.json", "bench.txt"]
    assert "MobileMini" in (tmp_path / "bench.txt").read_text()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "tumortriage", "--version"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == __version__
