import json

import numpy as np
import pytest

from dagnet.cli import build_parser, main
from dagnet.data import PLAY_STEPS, PlayRecord, write_plays

SMALL = ["--epochs", "1", "--synth-scenes", "6", "--synth-agents", "3", "--batch-size", "2"]


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text("hidden = 8\nlatent = 4\ngraph_hidden = 2\n")
    return str(p)


def test_parser_lists_commands():
    text = build_parser().format_help()
    for cmd in ("train", "eval", "ablate", "plot", "synth", "convert"):
        assert cmd in text


def test_train_eval_plot(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", small_cfg, "--out", str(out), *SMALL]) == 0
    info = json.loads(capsys.readouterr().out)
    # 6 scenes -> 4 for training -> 2 batches of 2
    assert info["steps"] == 2 and (out / "best.ckpt").exists() and (out / "run.cfg").exists()

    assert main(["eval", "--checkpoint", info["checkpoint"], "--out", str(out), "--plots", "2",
                 "--splits", "8-4"]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("obs\tpred\tade_units") and len(table) == 3
    report = json.loads((out / "eval_report.jsonl").read_text().splitlines()[-1])
    assert report["variant"] == "dagnet" and "8-4" in report["splits"]
    assert (out / "eval_table.tsv").exists() and (out / "rollout_000.svg").exists()

    assert main(["plot", "--checkpoint", info["checkpoint"], "--out", str(tmp_path / "fig"),
                 "--scenes", "1", "--split", "all"]) == 0
    assert (tmp_path / "fig" / "rollout_000.svg").exists()


def test_ablate(tmp_path, small_cfg, capsys):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", small_cfg, "--out", str(out), *SMALL]) == 0
    lines = (out / "ablation.tsv").read_text().splitlines()
    assert len(lines) == 4 and lines[3].startswith("DAG-Net\t✓\t✓")
    assert len((out / "ablation.jsonl").read_text().splitlines()) == 3
    assert (out / "ablation.svg").exists()


def test_synth_then_train_on_file(tmp_path, small_cfg, capsys):
    assert main(["synth", "--out", str(tmp_path), "--synth-scenes", "5", "--synth-agents", "2"]) == 0
    path = capsys.readouterr().out.strip()
    assert path.endswith("synthetic_seed0.txt")
    assert main(["train", "--config", small_cfg, "--data", path, "--out", str(tmp_path / "r"),
                 "--epochs", "1"]) == 0


def test_sports_eval_path(tmp_path, small_cfg, capsys):
    rng = np.random.default_rng(0)
    plays = [PlayRecord(f"p{k}", rng.uniform([0, 0], [94, 50], (PLAY_STEPS, 10, 2)), np.zeros((PLAY_STEPS, 3)))
             for k in range(6)]
    write_plays(plays, tmp_path / "plays.txt")
    common = ["--dataset", "sports", "--data", str(tmp_path / "plays.txt"), "--config", small_cfg]
    assert main(["train", *common, "--out", str(tmp_path / "r"), "--epochs", "1", "--batch-size", "4"]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert main(["eval", *common, "--checkpoint", ckpt, "--out", str(tmp_path / "r"), "--split", "all",
                 "--plots", "0"]) == 0
    assert capsys.readouterr().out.splitlines()[0].split("\t")[2] == "ade_ft"


@pytest.mark.parametrize("argv,msg", [
    (["train", "--dataset", "sdd"], "data path"),
    (["eval", "--checkpoint", "missing.ckpt"], "missing.ckpt"),
    (["train", "--splits", "20:10"], "OBS-PRED"),
    (["convert", "nothing.json", "--out", "x.txt"], "nothing.json"),
])
def test_errors_exit_nonzero(tmp_path, monkeypatch, capsys, argv, msg):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith(f"dagnet {argv[0]}: error:") and msg in err


def test_unknown_choice_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "lstm"])
    assert exc.value.code == 2
