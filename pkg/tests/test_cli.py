import json

import pytest

from mucs.cli import main

TINY_INI = """
[data]
size = 40
seed = 1
[arch]
enc_channels = 4
width = 32
num_blocks = 1
embed_dim = 32
[train]
steps = 40
batch_size = 16
warmup = 5
ema = 0.9
[generate]
num_steps = 6
count = 2
[null]
batch_size = 20
num_batches = 3
[unlearn]
batch_size = 16
max_steps = 20
[score]
target_size = 8
[baselines]
forward_inf_steps = 2
forward_inf_draws = 4
[eval]
k_fraction = 0.05
m = 2
repeats = 1
metrics = ssim,cos-flat
"""


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    return root, ["--config", str(ini), "--out-dir", str(root), "--run-id", "r"]


def _errors(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_missing_subcommand_is_a_user_error(capsys):
    assert main([]) == 1
    assert _errors(capsys)["error"] == "user"


def test_unknown_flag(capsys):
    assert main(["eval", "--frobnicate"]) == 1
    _errors(capsys)


def test_missing_dataset_reported(tmp_path, capsys):
    assert main(["pretrain", "--out-dir", str(tmp_path)]) == 1
    assert "make-data" in _errors(capsys)["message"]


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nbogus = 1\n")
    assert main(["make-data", "--config", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert _errors(capsys)["type"] == "ConfigError"


def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    assert "[unlearn]" in capsys.readouterr().out


def test_pipeline_end_to_end(run_root, capsys):
    root, common = run_root
    for argv in (["make-data"], ["pretrain"], ["generate"],
                 ["attribute", "--method", "mucs,condition,random"]):
        assert main(argv + common) == 0, capsys.readouterr().err
    run = root / "r"
    man = json.loads((run / "manifest.json").read_text())
    assert [e["command"] for e in man["entries"]] == ["make-data", "pretrain", "generate", "attribute"]
    assert man["entries"][0]["config"]["data"]["size"] == "40"
    assert len(list((run / "scores" / "mucs").glob("*.jsonl"))) == 2
    assert (run / "scores" / "traces.jsonl").read_text().strip()

    assert main(["overlap", "--method", "mucs,condition", "--k-fraction", "0.1"] + common) == 0
    over = json.loads((run / "reports" / "overlap.json").read_text())
    assert set(over["across_items"]) == {"mucs", "condition"}

    assert main(["ensemble", "--weights", "mucs=2,condition=1"] + common) == 0
    assert len(list((run / "scores" / "ensemble").glob("*.jsonl"))) == 2

    assert main(["eval", "--method", "condition"] + common) == 0
    assert main(["report", "--bins", "5"] + common) == 0
    assert (run / "reports" / "plots" / "eval-ssim.png").exists()
    man = json.loads((run / "manifest.json").read_text())
    assert len(man["entries"]) == 8


def test_attribute_is_byte_reproducible(run_root, capsys):
    root, common = run_root
    path = root / "r" / "scores" / "mucs"
    first = {p.name: p.read_bytes() for p in path.glob("*.jsonl")}
    assert first
    assert main(["attribute", "--method", "mucs"] + common) == 0
    assert {p.name: p.read_bytes() for p in path.glob("*.jsonl")} == first


def test_seed_mismatch_rejected(run_root, capsys):
    _, common = run_root
    assert main(["generate", "--seed", "9"] + common) == 1
    assert "seed" in _errors(capsys)["message"]


def test_unknown_method(run_root, capsys):
    _, common = run_root
    assert main(["attribute", "--method", "tracin"] + common) == 1
    _errors(capsys)
