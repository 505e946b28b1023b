from __future__ import annotations

import subprocess
import sys

import pytest

from hhvaem.cli import COMMANDS, build_parser, main

TINY = ["--set", "model.hidden=16", "--set", "train.marginal_steps=20", "--set", "train.total_steps=20",
        "--set", "train.hmc_fraction=0.5", "--set", "hmc.T=2", "--set", "eval.k=3", "--set", "saia.samples=30"]


def test_help_lists_every_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert all(name in out for name in COMMANDS)


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_subcommand_help_documents_common_flags(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--variant"):
        assert flag in out


def test_unknown_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_failures_give_one_line_diagnostics(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("hhvaem train: error:")
    assert main(["train", "--out", str(tmp_path), "--set", "hmc.T=x"]) == 1


def test_variant_flag_maps_onto_the_config():
    from hhvaem.cli import resolve_config

    args = build_parser().parse_args(["train", "--variant", "hmcvaem", "--seed", "4", "--set", "hmc.LF=3"])
    cfg = resolve_config(args)
    assert (cfg.variant, cfg.seed, cfg.hmc_LF, cfg.hierarchical, cfg.use_hmc) == ("hmcvaem", 4, 3, False, True)


def test_pipeline_end_to_end(tmp_path):
    out = str(tmp_path)
    assert main(["synth", "--recipe", "informative-one", "--n", "200", "--out", out]) == 0
    cfg = ["--config", str(tmp_path / "config.txt"), "--out", out, *TINY]
    assert main(["train", *cfg]) == 0
    assert (tmp_path / "checkpoint.manifest").exists() and (tmp_path / "train.log").exists()
    assert main(["eval", *cfg]) == 0
    metrics = (tmp_path / "metrics.txt").read_text()
    assert "# config variant = hhvaem" in metrics and "\nnll_x\t" in metrics
    assert main(["impute", *cfg]) == 0
    assert main(["predict", *cfg]) == 0
    assert len((tmp_path / "predictions.csv").read_text().splitlines()) == 41
    assert main(["saia", *cfg, "--rows", "3", "--policy", "random"]) == 0
    curve = (tmp_path / "saia_random.csv").read_text().splitlines()
    assert curve[0] == "step,rmse,nll,wallclock_seconds" and len(curve) == 1 + 7
    assert main(["toy-hmc", "--out", out, "--steps", "3", "--samples", "50"]) == 0
    assert len((tmp_path / "toy_samples.tsv").read_text().splitlines()) == 51


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hhvaem.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "toy-hmc" in proc.stdout
