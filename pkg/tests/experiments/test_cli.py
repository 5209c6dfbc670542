import json

import pandas as pd
import pytest

import lrlc_experiments.cli as cli
from lrlc_experiments.checkpoints import load_checkpoint
from lrlc_experiments.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, build_parser, main


def test_costs_command_writes_a_table(config_file, tmp_path):
    """Test the costs command output."""
    out = tmp_path / "costs"

    code = main(["costs", "--config", str(config_file), "--output-dir", str(out), "--ranks", "1", "2"])

    assert code == EXIT_OK
    frame = pd.read_csv(out / "costs.csv")
    assert sorted(frame[frame["kind"] == "lrlc"]["rank"].unique().tolist()) == [1, 2]
    assert "lowered_inference" in set(frame["mode"])


def test_train_then_lower_heatmaps_and_eval(config_file, tmp_path):
    """Test the train, lower, heatmaps and eval commands in sequence."""
    run_dir = tmp_path / "cli-run"

    code = main(["train", "--config", str(config_file), "--output-dir", str(run_dir), "--kind", "lrlc", "--rank", "3"])

    assert code == EXIT_OK
    checkpoint = run_dir / "cells" / "lrlc-k3-third-s0" / "checkpoint"
    assert load_checkpoint(checkpoint).epoch == 1
    assert pd.read_csv(run_dir / "results.csv")["rank"].tolist() == [3]

    assert main(["lower", str(checkpoint), str(tmp_path / "lowered")]) == EXIT_OK
    assert load_checkpoint(tmp_path / "lowered").lowered

    assert main(["heatmaps", "--config", str(config_file), str(checkpoint), str(tmp_path / "maps")]) == EXIT_OK
    assert len(list((tmp_path / "maps").glob("layer2_k*.csv"))) == 3

    assert main(["eval", "--config", str(config_file), str(checkpoint), "--lowered"]) == EXIT_OK
    assert main(["eval", "--config", str(config_file), str(checkpoint), "--split", "validation"]) == EXIT_OK


def test_sweep_command(config_file, tmp_path):
    """Test the sweep command."""
    code = main(["sweep", "--config", str(config_file), "--output-dir", str(tmp_path / "sweep"), "--epochs", "0"])

    assert code == EXIT_OK
    summary = pd.read_csv(tmp_path / "sweep" / "summary.csv")
    assert set(summary["kind"]) == {"conv", "lrlc"}


def test_dynamic_checkpoints_fail_to_lower(config_file, tmp_path):
    """Test lowering a dynamic checkpoint from the command line."""
    run_dir = tmp_path / "dynamic"
    overrides = ["--set", 'model.weight_net={"projection_channels": 2, "bottleneck_channels": 2, "expansion_channels": 2}']
    assert main(
        ["train", "--config", str(config_file), "--output-dir", str(run_dir), "--kind", "dynamic_lrlc", "--epochs", "0",
         *overrides]
    ) == EXIT_OK

    code = main(["lower", str(run_dir / "cells" / "dynamic_lrlc-k2-third-s0" / "checkpoint"), str(tmp_path / "out")])

    assert code == EXIT_FAILED


def test_invalid_config_exits_with_config_code(config_file, capsys):
    """Test the exit code for an invalid configuration."""
    code = main(["train", "--config", str(config_file), "--set", "training.batch_size=1"])

    assert code == EXIT_CONFIG
    assert "training.batch_size" in capsys.readouterr().out


def test_out_of_range_rank(config_file):
    """Test a rank above the cap."""
    assert main(["train", "--config", str(config_file), "--kind", "lrlc", "--rank", "17"]) == EXIT_CONFIG


def test_rank_flag_follows_the_shared_cap(config_file, monkeypatch):
    """Test that --rank is bounded by the library-wide rank cap."""
    monkeypatch.setattr(cli, "MAX_RANK", 2)

    assert main(["train", "--config", str(config_file), "--kind", "lrlc", "--rank", "3"]) == EXIT_CONFIG


def test_missing_checkpoint(tmp_path):
    """Test lowering a checkpoint that does not exist."""
    assert main(["lower", str(tmp_path / "absent"), str(tmp_path / "out")]) == EXIT_FAILED


def test_parser_requires_a_command():
    """Test the parser without a command."""
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_seed_shorthand_overrides_the_sweep(config_file, tmp_path):
    """Test the --seeds shorthand."""
    out = tmp_path / "seeds"

    assert main(["sweep", "--config", str(config_file), "--output-dir", str(out), "--epochs", "0", "--seeds", "3", "4"]) == EXIT_OK

    resolved = json.loads((out / "config.resolved.json").read_text(encoding="utf-8"))
    assert resolved["sweep"]["seeds"] == [3, 4]
    assert sorted(pd.read_csv(out / "results.csv")["seed"].unique().tolist()) == [3, 4]
