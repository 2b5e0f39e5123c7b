import json

import pytest

from genlora.checkpoint import load_checkpoint
from genlora.cli import main

TINY_CONFIG = """\
[backbone]
image_size = 16
embed_dim = 16
depth = 2
heads = 2
mlp_ratio = 2
warmup_epochs = 0
[router]
router_hidden = 16
[data]
n_real_train = 16
n_fake_train = 16
n_real_test = 8
n_fake_test = 8
[stage1]
stage1_epochs = 1
stage1_batch_size = 16
[stage2]
stage2_epochs = 1
stage2_batch_size = 16
joint_epochs = 1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.txt").write_text(TINY_CONFIG)
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_two_stage_workflow(workdir):
    d = workdir
    cfg = d / "c.txt"
    assert run("gen-data", "--out", d / "D", "--k", 2, "--seed", 1, "--config", cfg) == 0
    assert (d / "D" / "config.txt").is_file()
    for name in ("checker", "spectral"):
        assert run("train-stage1", "--data", d / "D", "--generator", name, "--config", cfg,
                   "--out", d / f"{name}.ckpt") == 0
    assert run("train-stage2", "--data", d / "D", "--branches", f"{d / 'checker.ckpt'},{d / 'spectral.ckpt'}",
               "--config", cfg, "--out", d / "m.ckpt") == 0
    assert load_checkpoint(d / "m.ckpt").names == ["checker", "spectral"]
    records = [json.loads(line) for line in (d / "m.ckpt.log.jsonl").read_text().splitlines()]
    assert records and set(records[0]) == {"stage", "step", "epoch", "l_cls", "l_route", "l_reg", "total"}
    assert (d / "m.ckpt.config.txt").is_file()

    assert run("eval", "--model", d / "m.ckpt", "--data", d / "D", "--report", d / "r.json") == 0
    report = json.loads((d / "r.json").read_text())
    assert {"acc", "ap", "auc", "eer"} <= set(report) and report["split"] == "test"

    assert run("gen-data", "--out", d / "D3", "--generators", "checker,spectral,blocky", "--k", 3,
               "--seed", 1, "--config", cfg) == 0
    assert run("add-generator", "--model", d / "m.ckpt", "--data", d / "D3", "--out", d / "m3.ckpt") == 0
    old, new = load_checkpoint(d / "m.ckpt"), load_checkpoint(d / "m3.ckpt")
    assert new.names == ["checker", "spectral", "blocky"] and new.router.width == 3
    assert [b.digest() for b in new.hub.branches[:2]] == [b.digest() for b in old.hub.branches]


def test_gradcheck_command(workdir, capsys):
    cfg = workdir / "g.txt"
    cfg.write_text("[backbone]\nimage_size = 8\nembed_dim = 16\ndepth = 2\nheads = 2\nwarmup_epochs = 0\n"
                   "[router]\nrouter_hidden = 8\n[data]\nk = 2\n")
    assert run("gradcheck", "--config", cfg, "--report", workdir / "g.json") == 0
    assert "PASS" in capsys.readouterr().out
    assert json.loads((workdir / "g.json").read_text())["passed"] is True


def test_ablate_command(workdir):
    d = workdir
    assert run("gen-data", "--out", d / "A", "--k", 3, "--seed", 2, "--config", d / "c.txt") == 0
    assert run("ablate", "--data", d / "A", "--flags", "k=1,no_fusion", "--seeds", 1, "--config", d / "c.txt",
               "--report", d / "a.json") == 0
    result = json.loads((d / "a.json").read_text())
    assert [r["variant"] for r in result["rows"]] == ["k=1", "no_fusion"]


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["eval", "--model", "x"],
    ["gen-data", "--out", "{d}/E", "--generators", "nope", "--k", 1],
    ["eval", "--model", "{d}/missing.ckpt", "--data", "{d}/D", "--report", "{d}/r2.json"],
    ["ablate", "--data", "{d}/D", "--flags", "no_router+no_route_loss", "--config", "{d}/c.txt"],
    ["gradcheck", "--config", "{d}/absent.txt"],
])
def test_validation_errors_exit_1(workdir, argv, capsys):
    argv = [str(a).format(d=workdir) for a in argv]
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_corrupt_checkpoint(workdir, capsys):
    (workdir / "bad.ckpt").write_bytes(b"LEGO\x01\x00\x00\x00\x05")
    code = main(["eval", "--model", str(workdir / "bad.ckpt"), "--data", str(workdir / "D"),
                 "--report", str(workdir / "r3.json")])
    assert code == 1 and "bad.ckpt" in capsys.readouterr().err
