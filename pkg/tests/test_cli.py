import json
import subprocess
import sys

import pytest

from ddsnas.cli import SUBCOMMANDS, main
from conftest import SMALL


def sets(*extra):
    out = []
    for s in SMALL + list(extra):
        out += ["--set", s]
    return out


def test_help_lists_subcommands_and_schema(capsys):
    assert main(["--help"]) == 0
    text = capsys.readouterr().out
    for name in SUBCOMMANDS:
        assert name in text
    assert "curriculum.tau_hard (float) = 0.85" in text


def test_no_command_is_an_error(capsys):
    assert main([]) == 1


def test_bad_threshold_exits_one(capsys):
    assert main(["search", "--set", "curriculum.tau_mastery=1.5"]) == 1
    assert "curriculum.tau_mastery must lie in (0, 1), got 1.5" in capsys.readouterr().err


def test_unknown_option_exits_one(capsys):
    assert main(["search", "--bogus"]) == 1


def test_report_without_metrics_exits_two(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "metrics.csv" in capsys.readouterr().err


def test_search_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["search", "--seed", "3", "--out", str(out)] + sets()) == 0
    text = capsys.readouterr().out
    assert text.startswith("# resolved configuration\n") and "seed: 3" in text
    assert main(["report", str(out)]) == 0
    assert "fine-tune accuracy" in capsys.readouterr().out
    curves = (out / "curves.csv").read_text().splitlines()
    assert curves[0] == "epoch,subset_accuracy,mean_hardness,lr,train_loss,val_loss,unique_visited"
    assert len(curves) == 26


def test_data_embed_index_chain(tmp_path, capsys):
    d = tmp_path / "d"
    assert main(["gen-data", "--out", str(d)] + sets()) == 0
    assert main(["train-ae", "--out", str(d)] + sets()) == 0
    assert main(["embed", "--model", str(d / "autoencoder.npz"), "--out", str(d)] + sets()) == 0
    capsys.readouterr()
    assert main(["build-index", "--embeddings", str(d / "embeddings.ddse"), "--out", str(d)] + sets()) == 0
    stats = json.loads((d / "index_stats.json").read_text())
    assert stats["records"] == 400 and len(stats["classes"]) == 10
    # the stored datasets drive a search
    args = sets(f"data.path={d / 'train.ddsd'}", f"data.test_path={d / 'test.ddsd'}")
    assert main(["search", "--out", str(tmp_path / "r")] + args) == 0


def test_ablate_rows(tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--seeds", "2", "--out", str(out)] + sets("supernet.max_epochs=12")) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 2
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "untrained-autoencoder" in capsys.readouterr().out


def test_bench_refresh_small(tmp_path, capsys):
    args = ["bench-refresh", "--n", "1000", "--subset", "50", "--epoch-fraction", "0.2", "--out", str(tmp_path)]
    assert main(args + ["--set", "data.side=8"]) == 0
    assert json.loads((tmp_path / "bench_refresh.json").read_text())["swapped"] == 50


def test_console_script_exit_code(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ddsnas.cli", "search", "--set", "curriculum.tau_hard=0"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "config error" in res.stderr


@pytest.mark.parametrize("bad", [["ablate", "--seeds", "0"], ["bench-refresh", "--epoch-fraction", "2"]])
def test_argument_values_checked(bad, capsys):
    assert main(bad) == 1
