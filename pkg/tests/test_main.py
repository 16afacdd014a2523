import csv

import pytest

from looptrack.data import load_dataset, load_masks, read_boxes
from looptrack.main import build_parser, main

TINY = ["--width", "8", "--anchor-ratios", "0.5,2", "--batch-size", "1", "--cycle-length-max", "2"]


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    code = main(["synth", "--out", str(out), "--count", "2", "--length", "3",
                 "--frame-width", "64", "--frame-height", "64", "--size-min", "14", "--size-max", "18",
                 "--speed-max", "1", "--texture-seed", "1"])
    assert code == 0
    return out


def test_synth_writes_loadable_sequences(dataset_dir):
    sequences = load_dataset(dataset_dir)
    assert [s.id for s in sequences] == ["synth_0000", "synth_0001"]
    assert all(len(s) == 3 and s.has_full_gt and s.masks is not None for s in sequences)
    assert (dataset_dir / "synth.cfg").exists()


def test_train_track_and_score_boxes(dataset_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset_dir), "--out", str(run), "--steps", "1", *TINY]) == 0
    assert (run / "checkpoint.pt").exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 1

    pred = tmp_path / "pred"
    assert main(["track", "--checkpoint", str(run / "checkpoint.pt"), "--data", str(dataset_dir),
                 "--out", str(pred), "--jobs", "2"]) == 0
    assert len(read_boxes(pred / "synth_0000.txt")) == 3

    reports = tmp_path / "reports"
    assert main(["eval", "--task", "vot", "--data", str(dataset_dir), "--pred", str(pred),
                 "--out", str(reports), "--name", "tiny"]) == 0
    assert "Accuracy" in (reports / "report.txt").read_text()
    with open(reports / "report.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[1][0] == "tiny"

    assert main(["eval", "--task", "vot", "--data", str(dataset_dir),
                 "--checkpoint", str(run / "checkpoint.pt"), "--out", str(reports)]) == 0


def test_train_propagate_and_score_masks(dataset_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset_dir), "--out", str(run), "--steps", "1",
                 "--mask-enabled", "--mask-size", "15", *TINY]) == 0
    masks = tmp_path / "masks"
    assert main(["propagate", "--checkpoint", str(run / "checkpoint.pt"), "--data", str(dataset_dir),
                 "--out", str(masks)]) == 0
    assert len(load_masks(masks / "synth_0001")) == 3
    reports = tmp_path / "reports"
    assert main(["eval", "--task", "davis", "--data", str(dataset_dir), "--pred", str(masks),
                 "--out", str(reports)]) == 0
    assert (reports / "report.csv").read_text().startswith("Tracker,J(Mean),F(Mean),FPS")


def test_config_file_and_flag_precedence(dataset_dir, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("steps=5\nwidth=8\nanchor_ratios=0.5,2\nbatch_size=1\ncycle_length_max=2\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(dataset_dir), "--out", str(run), "--steps", "0"]) == 0
    assert "steps=0" in (run / "train.cfg").read_text()
    assert (run / "metrics.jsonl").read_text() == ""


def test_help_and_version_exit_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["--version"]) == 0
    assert "looptrack" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["train", "--data", "x"],
    ["synth", "--out", "x", "--bogus", "1"],
    ["frobnicate"],
    ["synth", "--out", "x", "--length", "1"],
    ["track", "--checkpoint", "missing.pt", "--data", "missing", "--out", "x"],
    ["eval", "--task", "vot", "--data", ".", "--out", "x"],
])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_malformed_config_exits_one(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps\n")
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "r")]) == 1


def test_runtime_errors_exit_two(dataset_dir, tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"garbage")
    assert main(["track", "--checkpoint", str(bad), "--data", str(dataset_dir), "--out", str(tmp_path / "p")]) == 2


def test_model_flags_are_generated():
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o", "--no-mask-enabled", "--lambda2", "5"])
    assert args.mask_enabled is False
    assert args.lambda2 == "5"
    assert args.steps is None


def test_same_seed_gives_identical_outputs(dataset_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--count", "2", "--length", "3",
                 "--frame-width", "64", "--frame-height", "64", "--size-min", "14", "--size-max", "18",
                 "--speed-max", "1", "--texture-seed", "1"]) == 0
    for path in sorted(dataset_dir.rglob("*")):
        if path.is_file():
            assert path.read_bytes() == (again / path.relative_to(dataset_dir)).read_bytes()

    runs = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["train", "--data", str(dataset_dir), "--out", str(run), "--steps", "2", *TINY]) == 0
        runs.append(run)
    assert (runs[0] / "metrics.jsonl").read_bytes() == (runs[1] / "metrics.jsonl").read_bytes()
