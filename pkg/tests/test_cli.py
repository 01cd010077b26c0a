import json
from pathlib import Path

import numpy as np
import pytest

from speatforge import cli, fileio, harness


@pytest.fixture
def cfg_file(tmp_path):
    cfg = harness.ExperimentConfig(
        model="tiny", scale=1000, seed=5,
        categories=(harness.CategorySpec("planted", 1.0),),
        targets_per_group=6, attributes_per_group=3,
        pretrain_utterances=16, pretrain_steps=3,
        out_dir=str(tmp_path / "run"),
    )
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return path, cfg


def test_synth_extract_eval_pipeline(tmp_path, cfg_file, capsys):
    cfg_path, cfg = cfg_file
    assert cli.main(["synth", "--config", str(cfg_path)]) == 0
    manifest_path = Path(cfg.out_dir) / "corpora" / "planted" / "manifest.json"
    assert manifest_path.exists()

    assert cli.main(["extract", "--config", str(cfg_path),
                     "--manifest", str(manifest_path), "--kind", "mfcc"]) == 0
    containers = Path(cfg.out_dir) / "embeddings" / "planted"
    assert len(list(containers.glob("*.speb"))) == 18

    capsys.readouterr()
    assert cli.main(["eval", "--config", str(cfg_path),
                     "--manifest", str(manifest_path),
                     "--containers", str(containers),
                     "--n-perm", "200", "--out", cfg.out_dir]) == 0
    out = capsys.readouterr().out
    report = json.loads(out)
    assert report["category"] == "planted"
    assert np.isfinite(report["d_aggregate"])
    assert 0.0 < report["p_value"] <= 1.0
    assert (Path(cfg.out_dir) / "planted_report.json").exists()


def test_eval_direct_from_wavs(tmp_path, cfg_file, capsys):
    cfg_path, cfg = cfg_file
    cli.main(["synth", "--config", str(cfg_path)])
    manifest_path = Path(cfg.out_dir) / "corpora" / "planted" / "manifest.json"
    capsys.readouterr()
    assert cli.main(["eval", "--config", str(cfg_path),
                     "--manifest", str(manifest_path), "--kind", "mel"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["p_value"] is None


def test_pretrain_prune_report_pipeline(tmp_path, cfg_file, capsys):
    cfg_path, cfg = cfg_file
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    ckpt = Path(cfg.out_dir) / "model.spfm"
    assert ckpt.exists()
    loaded = fileio.load_checkpoint(ckpt)
    assert loaded.config == cfg.model_config()

    assert cli.main(["prune", "--config", str(cfg_path),
                     "--checkpoint", str(ckpt), "--method", "head"]) == 0
    head_dir = Path(cfg.out_dir) / "head"
    records = harness.read_trajectory_csv(head_dir / "trajectory.csv")
    assert [r.point for r in records] == [8.0, 6.0, 4.0, 2.0]
    events = fileio.read_event_log(head_dir / "events.jsonl")
    assert len(events) == 3
    assert (head_dir / "report" / "summary.json").exists()

    capsys.readouterr()
    assert cli.main(["report", "--records", str(head_dir / "trajectory.csv"),
                     "--out", str(tmp_path / "re_report")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert "planted" in summary["categories"]


def test_weight_prune_replay_cli(tmp_path, cfg_file):
    cfg_path, cfg = cfg_file
    cli.main(["pretrain", "--config", str(cfg_path)])
    ckpt = Path(cfg.out_dir) / "model.spfm"
    assert cli.main(["prune", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                     "--method", "weight"]) == 0
    log = Path(cfg.out_dir) / "weight" / "events.jsonl"
    events = fileio.read_event_log(log)

    replay_out = tmp_path / "replay_run"
    assert cli.main(["prune", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                     "--method", "weight", "--replay", str(log),
                     "--out", str(replay_out)]) == 0
    replayed = fileio.read_event_log(replay_out / "weight" / "events.jsonl")
    assert [e.step for e in replayed] == [e.step for e in events]
    assert replayed[-1].sparsity_after == events[-1].sparsity_after


def test_distill_cli(tmp_path, cfg_file):
    cfg_path, cfg = cfg_file
    cli.main(["pretrain", "--config", str(cfg_path)])
    ckpt = Path(cfg.out_dir) / "model.spfm"
    assert cli.main(["distill", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                     "--layers", "2", "--steps", "4"]) == 0
    out = Path(cfg.out_dir) / "distill"
    assert (out / "student_2layer.spfm").exists()
    records = harness.read_trajectory_csv(out / "trajectory.csv")
    assert len(records) == 2


def test_prune_method_distill_route(tmp_path, cfg_file):
    cfg_path, cfg = cfg_file
    cli.main(["pretrain", "--config", str(cfg_path)])
    ckpt = Path(cfg.out_dir) / "model.spfm"
    out = tmp_path / "prune_distill"
    assert cli.main(["prune", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                     "--method", "distill", "--out", str(out),
                     "--scale", "10000"]) == 0
    records = harness.read_trajectory_csv(out / "distill" / "trajectory.csv")
    assert [r.point for r in records] == [2.0, 2.0, 4.0, 6.0]


def test_trajectory_cli(tmp_path, cfg_file):
    cfg_path, cfg = cfg_file
    assert cli.main(["trajectory", "--config", str(cfg_path)]) == 0
    out = Path(cfg.out_dir) / "trajectory"
    records = harness.read_trajectory_csv(out / "trajectory.csv")
    assert [r.step for r in records] == [0, 1, 2, 3]
    data = json.loads((out / "trajectory.json").read_text())
    assert len(data) == 4


def test_cli_seed_override(tmp_path, cfg_file, capsys):
    cfg_path, cfg = cfg_file
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    cli.main(["synth", "--config", str(cfg_path), "--out", str(out_a)])
    cli.main(["synth", "--config", str(cfg_path), "--out", str(out_b),
              "--seed", "99"])
    wav_a = sorted((out_a / "corpora" / "planted").glob("*.wav"))[0]
    wav_b = sorted((out_b / "corpora" / "planted").glob("*.wav"))[0]
    assert wav_a.read_bytes() != wav_b.read_bytes()
