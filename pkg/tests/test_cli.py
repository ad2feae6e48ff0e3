import csv
import json

import pytest

from hybridcast.cli import main
from hybridcast.config import RunConfig

SYNTH = "n=3 days=14 steps_per_day=8 seed=1 noise_std=0.1"
SMALL = ["--t-in", "4", "--t-out", "4", "--dim", "2", "--hidden", "4", "--max-epochs", "2", "--batch-size", "16"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


@pytest.fixture
def trained_dir(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--synthetic", SYNTH, "--out-dir", str(tmp_path), *SMALL)
    assert code == 0, out
    return tmp_path


def test_gen_data_then_train_from_files(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--synthetic", SYNTH, "--out-dir", str(tmp_path))
    assert code == 0 and out["command"] == "gen-data"
    data = tmp_path / "data"
    assert {p.name for p in data.iterdir()} == {"data.csv", "edges.csv", "meta.json"}
    code, out, _ = run(
        capsys, "train", "--data", str(data / "data.csv"), "--edges", str(data / "edges.csv"),
        "--meta", str(data / "meta.json"), "--out-dir", str(tmp_path / "run"), *SMALL,
    )
    assert code == 0 and out["epochs"] == 2


def test_train_outputs(trained_dir):
    assert (trained_dir / "checkpoints" / "best.hypd").is_file()
    assert (trained_dir / "checkpoints" / "last.hypd").is_file()
    lines = (trained_dir / "logs" / "train.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert {"epoch", "l_pred", "val_mae"} <= set(json.loads(lines[0]))


def test_predict_evaluate_perturb_export(trained_dir, capsys):
    out_dir = str(trained_dir)
    code, out, _ = run(capsys, "predict", "--out-dir", out_dir)
    assert code == 0 and out["horizon"] == 4 and out["nodes"] == 3
    rows = list(csv.reader(open(trained_dir / "forecasts" / "forecast.csv")))
    assert rows[0] == ["step", "tod", "dow", "node_0", "node_1", "node_2"] and len(rows) == 5

    code, out, _ = run(capsys, "evaluate", "--out-dir", out_dir)
    assert code == 0
    metrics = json.loads((trained_dir / "reports" / "metrics.json").read_text())
    assert set(metrics) == {"model", "historical_average", "last_value"}
    assert out["mae"] == metrics["model"]["mae"]

    code, out, _ = run(capsys, "perturb", "--out-dir", out_dir, "--kinds", "surge,interrupt", "--injections", "2")
    assert code == 0 and set(out["mean_drop_percent"]) == {"surge", "interrupt"}
    assert len(list(csv.DictReader(open(trained_dir / "reports" / "robustness.csv")))) == 4

    code, out, _ = run(capsys, "export-embeddings", "--out-dir", out_dir)
    assert code == 0 and set(out) == {"command", "daily", "weekly"}
    assert len((trained_dir / "reports" / "embeddings_weekly.csv").read_text().splitlines()) == 7 * 8 + 1


def test_ablate(tmp_path, capsys):
    code, out, _ = run(
        capsys, "ablate", "--synthetic", SYNTH, "--out-dir", str(tmp_path), "--variants", "full,no_stfe", *SMALL,
        "--max-epochs", "1",
    )
    assert code == 0 and set(out["mae"]) == {"full", "no_stfe"}
    rows = list(csv.DictReader(open(tmp_path / "reports" / "ablation.csv")))
    assert float(rows[0]["mae_vs_full_percent"]) == 0.0


def test_resume_extends_log(trained_dir, capsys):
    code, out, _ = run(capsys, "train", "--resume", "--out-dir", str(trained_dir), "--max-epochs", "3")
    assert code == 0 and out["epochs"] == 3
    lines = (trained_dir / "logs" / "train.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2, 3]


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"t_in": 4, "t_out": 4, "dim": 2, "hidden": 4, "max_epochs": 5, "synthetic": {"n": 3, "days": 14, "steps_per_day": 8}}))
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--max-epochs", "1", "--out-dir", str(tmp_path / "r"))
    assert code == 0 and out["epochs"] == 1


def test_config_errors_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--synthetic", SYNTH, "--alpha", "-1", "--out-dir", str(tmp_path))
    assert code == 2 and err["error"] == "config" and err["field"] == "alpha"
    code, _, err = run(capsys, "train", "--out-dir", str(tmp_path))
    assert code == 2 and err["field"] == "data_path"
    code, _, err = run(capsys, "train", "--t-in", "four")
    assert code == 2 and err["field"] == "argv"
    code, _, err = run(capsys, "ablate", "--synthetic", SYNTH, "--variants", "full,bogus", "--out-dir", str(tmp_path))
    assert code == 2 and err["field"] == "variants"


def test_existing_outputs_need_overwrite(trained_dir, capsys):
    args = ["train", "--synthetic", SYNTH, "--out-dir", str(trained_dir), *SMALL]
    code, _, err = run(capsys, *args)
    assert code == 2 and err["field"] == "overwrite"
    code, _, _ = run(capsys, *args, "--overwrite")
    assert code == 0


def test_missing_checkpoint_exit_3(tmp_path, capsys):
    for cmd in ("predict", "evaluate", "perturb", "export-embeddings"):
        code, _, err = run(capsys, cmd, "--out-dir", str(tmp_path))
        assert code == 3 and err["error"] == "missing_checkpoint", cmd
    code, _, err = run(capsys, "train", "--resume", "--out-dir", str(tmp_path))
    assert code == 3


def test_divergence_exit_4_keeps_best_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--synthetic", SYNTH, "--out-dir", str(tmp_path), *SMALL, "--lr", "1e38")
    assert code == 4 and err["error"] == "aborted"
    assert (tmp_path / "checkpoints" / "best.hypd").is_file()


def test_help_shows_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    defaults = RunConfig()
    for fragment in (f"(default: {defaults.lr})", f"(default: {defaults.alpha})", f"(default: {defaults.t_in})"):
        assert fragment in text


def test_rerun_is_identical_except_timings(tmp_path, capsys):
    args = ["train", "--synthetic", SYNTH, "--out-dir", str(tmp_path), *SMALL, "--overwrite"]
    snapshots = []
    for _ in range(2):
        code, _, _ = run(capsys, *args)
        assert code == 0
        records = [json.loads(l) for l in (tmp_path / "logs" / "train.jsonl").read_text().splitlines()]
        for r in records:
            r.pop("seconds")
        ckpts = [(tmp_path / "checkpoints" / c).read_bytes() for c in ("best.hypd", "last.hypd")]
        snapshots.append((ckpts, records))
    assert snapshots[0] == snapshots[1]


def test_out_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HYBRIDCAST_OUT_DIR", str(tmp_path / "env"))
    code, _, _ = run(capsys, "train", "--synthetic", SYNTH, *SMALL)
    assert code == 0 and (tmp_path / "env" / "checkpoints" / "best.hypd").is_file()
