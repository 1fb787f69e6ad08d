"""CLI contract: flags, exit codes, idempotent byte-identical outputs."""

import os

import numpy as np
import pytest

from mrharm import cli
from mrharm.figures import read_pgm


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "ds"
    code = run(["gen-data", "--out-dir", str(d), "--seed", "5",
                "--sites", "siteA,siteB", "--subjects", "2", "--slices", "2",
                "--travel", "1", "--size", "32"])
    assert code == 0
    return d


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory, tiny_data):
    out = tmp_path_factory.mktemp("run")
    code = run(["train", "--data-dir", str(tiny_data), "--out-dir", str(out),
                "--seed", "5", "--epochs", "2"])
    assert code == 0
    return out / "checkpoint.mrh"


def test_help_documents_all_flags(capsys):
    parser = cli.build_parser()
    for name, sp in parser._subparsers._group_actions[0].choices.items():
        help_text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in help_text, f"{name}: {opt} missing from --help"


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["gen-data", "--out-dir", str(d), "--seed", "9",
                    "--sites", "siteA,siteB", "--subjects", "2",
                    "--slices", "2", "--travel", "1", "--size", "32"]) == 0
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
    for root, _, files in os.walk(a):
        for f in files:
            rel = os.path.relpath(os.path.join(root, f), a)
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_train_zero_epochs_writes_initialization(tiny_data, tmp_path):
    out = tmp_path / "zero"
    assert run(["train", "--data-dir", str(tiny_data), "--out-dir", str(out),
                "--seed", "5", "--epochs", "0"]) == 0
    from mrharm.networks import load_checkpoint
    model, meta = load_checkpoint(out / "checkpoint.mrh")
    assert model.step_count == 0
    assert meta["epochs"] == 0


def test_train_config_file_overridden_by_flags(tiny_data, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("epochs = 7\nwidth = 2\nlambda_recon = 5.0\n")
    out = tmp_path / "run"
    assert run(["train", "--data-dir", str(tiny_data), "--out-dir", str(out),
                "--config", str(cfg), "--seed", "5", "--epochs", "0"]) == 0
    from mrharm.networks import load_checkpoint
    model, meta = load_checkpoint(out / "checkpoint.mrh")
    assert meta["epochs"] == 0          # flag wins
    assert meta["lambda"]["recon"] == 5.0  # config applies
    assert model.width == 2


def test_missing_dataset_exit_code():
    assert run(["train", "--data-dir", "/nonexistent/ds",
                "--out-dir", "/tmp/x", "--epochs", "0"]) == 3


def test_corrupt_checkpoint_exit_code(tiny_data, tmp_path):
    bad = tmp_path / "bad.mrh"
    bad.write_bytes(b"not a checkpoint at all")
    assert run(["harmonize", "--checkpoint", str(bad),
                "--data-dir", str(tiny_data), "--direction", "siteA:siteB",
                "--out-dir", str(tmp_path / "o")]) == 4


def test_site_mismatch_exit_code(tiny_ckpt, tiny_data, tmp_path):
    assert run(["harmonize", "--checkpoint", str(tiny_ckpt),
                "--data-dir", str(tiny_data), "--direction", "siteA:siteZ",
                "--out-dir", str(tmp_path / "o")]) == 5


def test_unknown_flag_exit_code(tiny_data):
    with pytest.raises(SystemExit) as exc:
        run(["gen-data", "--out-dir", "/tmp/x", "--bogus-flag", "1"])
    assert exc.value.code == 2


def test_invalid_direction_exit_code(tiny_ckpt, tiny_data, tmp_path):
    assert run(["eval", "--checkpoint", str(tiny_ckpt),
                "--data-dir", str(tiny_data), "--direction", "siteAsiteB",
                "--out-dir", str(tmp_path / "o")]) == 6


def test_full_pipeline_smoke(tiny_ckpt, tiny_data, tmp_path):
    harm = tmp_path / "harm"
    assert run(["harmonize", "--checkpoint", str(tiny_ckpt),
                "--data-dir", str(tiny_data), "--direction", "siteA:siteB",
                "--out-dir", str(harm)]) == 0
    assert (harm / "provenance.csv").exists()
    assert any(f.suffix == ".f64" for f in harm.iterdir())

    ev = tmp_path / "eval"
    assert run(["eval", "--checkpoint", str(tiny_ckpt),
                "--data-dir", str(tiny_data),
                "--direction", "siteA:siteB,siteB:siteA",
                "--out-dir", str(ev), "--seed", "5"]) == 0
    summary = (ev / "summary.txt").read_text()
    assert "siteA->siteB" in summary and "siteB->siteA" in summary
    assert (ev / "metrics.csv").exists() and (ev / "tests.csv").exists()

    th = tmp_path / "theta"
    assert run(["export-theta", "--checkpoint", str(tiny_ckpt),
                "--data-dir", str(tiny_data), "--out-dir", str(th)]) == 0
    lines = (th / "theta.csv").read_text().strip().splitlines()
    assert lines[0] == "site_id,theta1,theta2"
    assert len(lines) > 1

    fig = tmp_path / "fig"
    assert run(["render-figure", "--checkpoint", str(tiny_ckpt),
                "--data-dir", str(tiny_data), "--out-dir", str(fig),
                "--targets", "siteB"]) == 0
    grid = read_pgm(fig / "harmonization_grid.pgm")
    scatter = read_pgm(fig / "theta_scatter.pgm")
    assert grid.ndim == 2 and scatter.shape == (400, 400)


def test_adapt_smoke_and_freeze(tmp_path):
    data = tmp_path / "ds3"
    assert run(["gen-data", "--out-dir", str(data), "--seed", "6",
                "--sites", "siteA,siteB,siteC", "--subjects", "2",
                "--slices", "2", "--travel", "1", "--size", "32",
                "--travel-pairs", "siteC:siteA"]) == 0
    pre = tmp_path / "pre"
    assert run(["train", "--data-dir", str(data), "--out-dir", str(pre),
                "--seed", "6", "--epochs", "1", "--sites", "siteA,siteB"]) == 0
    post = tmp_path / "post"
    assert run(["adapt", "--checkpoint", str(pre / "checkpoint.mrh"),
                "--data-dir", str(data), "--site", "siteC",
                "--out-dir", str(post), "--seed", "6", "--epochs", "1"]) == 0
    from mrharm.networks import load_checkpoint
    before, _ = load_checkpoint(pre / "checkpoint.mrh")
    after, meta = load_checkpoint(post / "checkpoint.mrh")
    assert meta["adapted_site"] == "siteC"
    for (name, pa), (_, pb) in zip(before.named_parameters(),
                                   after.named_parameters()):
        if name.startswith(("decoder.", "disc.")):
            assert pa.data.tobytes() == pb.data.tobytes(), name


def test_commands_do_not_mutate_dataset(tiny_ckpt, tiny_data, tmp_path):
    def snapshot():
        state = {}
        for root, _, files in os.walk(tiny_data):
            for f in files:
                p = os.path.join(root, f)
                state[p] = (os.path.getsize(p), open(p, "rb").read()[:64])
        return state
    before = snapshot()
    run(["eval", "--checkpoint", str(tiny_ckpt), "--data-dir", str(tiny_data),
         "--direction", "siteA:siteB", "--out-dir", str(tmp_path / "e2"),
         "--seed", "1"])
    assert snapshot() == before


def test_train_rerun_byte_identical(tiny_data, tmp_path):
    outs = []
    for sub in ("r1", "r2"):
        out = tmp_path / sub
        assert run(["train", "--data-dir", str(tiny_data), "--out-dir",
                    str(out), "--seed", "7", "--epochs", "1"]) == 0
        outs.append(out)
    assert (outs[0] / "checkpoint.mrh").read_bytes() == \
        (outs[1] / "checkpoint.mrh").read_bytes()
    assert (outs[0] / "loss_log.csv").read_bytes() == \
        (outs[1] / "loss_log.csv").read_bytes()
