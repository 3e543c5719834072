import json

import pytest

from inctkg.cli import main
from inctkg.model import load_checkpoint

FAST = ["--dim", "8", "--epochs-per-task", "1", "--post-eval-epochs", "1", "--n-negatives", "8"]


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    assert "--lam" in out and "(default: 0.5)" in out and "--epochs-per-task" in out


def test_synth_then_train_then_report(tmp_path, capsys):
    bundle = str(tmp_path / "b")
    assert main(["synth", str(tmp_path / "c.tsv"), "--bundle", bundle, "--n-entities", "60",
                 "--n-quads", "1500", "--n-days", "40", "--window-days", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["n_snapshots"] == 5
    run = str(tmp_path / "run")
    assert main(["train", bundle, "--out", run, "--strategy", "ours-full"] + FAST) == 0
    report = json.loads(open(f"{run}/task_5/metrics.json").read())
    assert report["checkpoint"] == "eval" and "test_5" in report["metrics"]["time_filtered"]
    params, header, extra = load_checkpoint(f"{run}/task_2/checkpoint.carry")
    assert header["tag"] == "carry" and "index_events" in extra
    assert main(["report", run, "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.tsv").exists()


def test_snapshots_command(tmp_path, capsys):
    src = tmp_path / "raw.tsv"
    src.write_text("".join(f"a{i % 4}\tr{i % 2}\tb{i % 3}\t2014-01-{1 + i % 22:02d}\n" for i in range(200)))
    assert main(["snapshots", str(src), str(tmp_path / "b"), "--window-days", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["n_snapshots"] == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, small_bundle):
    assert main(["train", small_bundle, "--out", str(tmp_path / "r"), "--set", "run.nope=1"]) == 2
    assert main(["train", small_bundle, "--out", str(tmp_path / "r"), "--lam", "3"]) == 2
    assert main(["snapshots", str(tmp_path / "missing.tsv"), str(tmp_path / "x")]) == 3
    bad = tmp_path / "bad.tsv"
    bad.write_text("a\tr\tb\n")
    assert main(["snapshots", str(bad), str(tmp_path / "x")]) == 3
    assert main(["train", small_bundle, "--out", str(tmp_path / "r"), "--lr", "1e200"] + FAST) == 4


def test_grid_list(capsys):
    assert main(["grid", "unused", "--preset", "full", "--list"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 216


def test_grid_runs_small_cells(tmp_path, small_bundle, capsys):
    grid = tmp_path / "g.ini"
    grid.write_text("[grid]\nenhancement.lam = 0.3, 0.7\n")
    assert main(["grid", small_bundle, "--grid", str(grid), "--out", str(tmp_path / "sel"),
                 "--strategy", "ours-enhancement-only"] + FAST) == 0
    assert (tmp_path / "sel" / "best.ini").exists()
