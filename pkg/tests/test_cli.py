"""Command-line interface: subcommands, exit codes, artifacts."""

import json
import os

import pytest

from shapecap.cli import main
from shapecap.config import TrainConfig, write_config

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_gen_data_is_deterministic(tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        code = main(["gen-data", "--seed", "0", "--out", str(out),
                     "--count", "3", "--eval-count", "2"])
        assert code == 0
    assert read_bytes(a / "train.jsonl") == read_bytes(b / "train.jsonl")
    assert read_bytes(a / "eval.jsonl") == read_bytes(b / "eval.jsonl")
    assert len((a / "train.jsonl").read_text().splitlines()) == 3
    assert "wrote 3 scenes" in capsys.readouterr().out


def test_gen_data_seed_changes_output(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["gen-data", "--seed", "0", "--out", str(a), "--count", "2",
                 "--eval-count", "1"]) == 0
    assert main(["gen-data", "--seed", "5", "--out", str(b), "--count", "2",
                 "--eval-count", "1"]) == 0
    assert read_bytes(a / "train.jsonl") != read_bytes(b / "train.jsonl")


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--bogus", "1", "--out", "x"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_eval_requires_checkpoint(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--out", "somewhere"])
    assert exc.value.code == 2
    assert "--checkpoint" in capsys.readouterr().err


def test_runtime_error_exits_1(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "missing.pt"),
                 "--out", str(tmp_path)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_train_command_writes_artifacts(tmp_path):
    data_dir = tmp_path / "data"
    assert main(["gen-data", "--seed", "0", "--out", str(data_dir),
                 "--count", "4", "--eval-count", "2"]) == 0

    cfg = TrainConfig(dim=32, heads=4, depth=1, enc_channels=(8, 8, 16, 16),
                      d_joint=32, steps=6, batch_size=2, epochs_stage1=1,
                      epochs_stage2=1, warmup_epochs=1, lr=1e-3)
    cfg_path = tmp_path / "train.cfg"
    write_config(cfg, str(cfg_path))

    run_dir = tmp_path / "run"
    code = main(["train", "--config", str(cfg_path), "--out", str(run_dir),
                 "--data", str(data_dir / "train.jsonl"),
                 "--eval-data", str(data_dir / "eval.jsonl")])
    assert code == 0
    assert (run_dir / "checkpoint.pt").exists()
    assert (run_dir / "run_log.jsonl").exists()
    assert (run_dir / "config.txt").exists()
    assert read_bytes(run_dir / "training_curves.png").startswith(PNG_MAGIC)


def test_train_set_override_rejects_unknown_key(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path / "run"), "--set", "bogus=1"])
    assert code == 1
    assert "unknown config key" in capsys.readouterr().err


def test_eval_command_writes_report_and_figures(tmp_path, capsys, tiny_checkpoint):
    out_dir = tmp_path / "eval"
    code = main(["eval", "--checkpoint", tiny_checkpoint, "--out", str(out_dir),
                 "--k", "2", "--limit", "2"])
    assert code == 0
    out = capsys.readouterr().out
    assert "BLEU-4" in out and "mAP@0.5" in out

    lines = (out_dir / "report.jsonl").read_text().splitlines()
    assert len(lines) == 3  # two samples + summary
    summary = json.loads(lines[-1])["summary"]
    assert set(summary) == {"bleu4", "cider", "miou", "map", "exact_match", "n_samples"}
    assert read_bytes(out_dir / "metrics.png").startswith(PNG_MAGIC)
    assert read_bytes(out_dir / "qualitative.png").startswith(PNG_MAGIC)


def test_sample_command_prints_candidates(tmp_path, capsys, tiny_checkpoint):
    fig_dir = tmp_path / "figs"
    code = main(["sample", "--checkpoint", tiny_checkpoint, "--k", "5",
                 "--scene-seed", "1", "--out", str(fig_dir)])
    assert code == 0
    out = capsys.readouterr().out
    shown = [line for line in out.splitlines() if line.startswith("[")]
    assert 1 <= len(shown) <= 5
    assert all("score=" in line and "caption=" in line for line in shown)
    captions = [line.split("caption=")[1] for line in shown]
    assert len(set(captions)) == len(captions)  # distinct candidates
    assert "ground truth:" in out
    assert read_bytes(fig_dir / "sample.png").startswith(PNG_MAGIC)
