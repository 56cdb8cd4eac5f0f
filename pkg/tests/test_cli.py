import csv
import json

import pytest

from instastyle import checkpoint
from instastyle.cli import main

FAST = ["--pretrain-iters", "150", "--pretrain-batch", "32", "--refine-iters", "10", "--steps", "10",
        "--n-references", "2", "--mix-masks", "1"]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", *FAST, "--out", str(out)]) == 0
    return out / "pretrain.ckpt.json"


def test_snr_to_stdout(capsys):
    assert main(["snr"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "t,snr" and len(lines) == 1001
    assert float(lines[-1].split(",")[1]) == pytest.approx(0.015144, abs=1e-4)


def test_world_dump(tmp_path):
    assert main(["world", "dump", "--seed", "3", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "world.json").read_text())
    assert doc["config"]["seed"] == 0 and len(doc["content_protos"]) == 4


def test_world_dump_uses_config_world(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"world": {"seed": 5, "dim": 6}}))
    assert main(["world", "dump", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "world.json").read_text())["config"] == {
        "dim": 6, "n_content": 4, "n_style": 3, "noise_sigma": 0.1, "seed": 5}


def test_invalid_arguments_exit_2(tmp_path, capsys):
    assert main(["nope"]) == 2
    assert main(["snr", "--steps", "0"]) == 2
    assert main(["sweep", "--kind", "bogus"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"unknown_field": 1}')
    assert main(["snr", "--config", str(bad)]) == 2
    assert main(["snr", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["select", "--manifest", str(tmp_path / "missing.json")]) == 2


def test_runtime_failure_exit_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["world", "dump", "--out", str(blocker / "sub")]) == 1


def test_stage_commands(ckpt, tmp_path):
    out = tmp_path
    assert main(["invert", *FAST, "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    assert len(json.loads((out / "z_T.json").read_text())["z_T"]) == 16
    assert main(["generate", *FAST, "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    manifest = out / "manifest.json"
    assert len(json.loads(manifest.read_text())["items"]) == 15
    assert main(["select", "--manifest", str(manifest), "--keep", "14", "--out", str(out)]) == 0
    sel = json.loads((out / "selected.json").read_text())["indices"]
    assert len(sel) == 5 and 14 in sel
    assert main(["refine", *FAST, "--checkpoint", str(ckpt), "--manifest", str(manifest), "--keep", "14",
                 "--out", str(out)]) == 0
    refined = out / "refined.ckpt.json"
    model, meta = checkpoint.load(refined)
    assert set(model.adapters) == {"k", "v"} and meta["selected"] == [sel]
    # the manifest belongs to the pretrained checkpoint, not the refined one
    assert main(["refine", *FAST, "--checkpoint", str(refined), "--manifest", str(manifest), "--out", str(out)]) == 2
    assert main(["generate", *FAST, "--checkpoint", str(refined), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert len(rows) == 4 and rows[0]["stage"] == "generate"


def test_mix_and_sweep(ckpt, tmp_path):
    assert main(["mix", *FAST, "--checkpoint", str(ckpt), "--alpha", "1", "--beta", "1",
                 "--style1-ref", "0", "--style2-ref", "2", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "mix.json").read_text())
    assert (doc["alpha"], doc["style1"], doc["style2"]) == (1.0, 0, 2)
    assert main(["mix", *FAST, "--checkpoint", str(ckpt), "--style1-ref", "2", "--style2-ref", "2"]) == 2
    assert main(["sweep", *FAST, "--checkpoint", str(ckpt), "--kind", "guidance", "--out", str(tmp_path)]) == 0
    assert len(list(csv.DictReader((tmp_path / "sweep_guidance.csv").open()))) == 6 * 2 * 4


def test_run_twice_same_bytes(ckpt, tmp_path):
    for d in ("a", "b"):
        assert main(["run", *FAST, "--seed", "4", "--checkpoint", str(ckpt), "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    summary = json.loads((tmp_path / "a" / "report_summary.json").read_text())
    assert summary["run_id"] == "seed4" and set(summary["stages"]) == {"stage1", "fresh", "stage2"}


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sched_T": 50}))
    assert main(["snr", "--config", str(cfg)]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 51
    assert main(["snr", "--config", str(cfg), "--sched-T", "20", "--steps", "10"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 21
