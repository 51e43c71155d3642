import json
import math
import subprocess
import sys

import pytest

from moextend.analysis import parse_csv
from moextend.cli import EXIT_CODES, main
from moextend.config import dump_config, load_config

from conftest import tiny_config

ARTIFACTS = ["pretrain.ckpt", "align.ckpt", "surgery.ckpt", "finetune.ckpt", "full.ckpt", "plan.json",
             "counts.json", "finetune_manifest.json", "forgetting.csv", "shift.csv", "distributions.csv",
             "pretrain_loss.csv", "finetune_loss.csv"]


def run_chain(tmp_path, name):
    out = tmp_path / name
    cfg_path = tmp_path / "cfg.json"
    if not cfg_path.exists():
        dump_config(tiny_config(), cfg_path)
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path, out = run_chain(tmp, "a")
    return tmp, cfg_path, out


def test_init_config_roundtrip(tmp_path):
    path = tmp_path / "c.json"
    assert main(["init-config", "--config", str(path), "--seed", "3"]) == 0
    cfg = load_config(path)
    assert cfg.seed == 3 and cfg.digest() == load_config(path).digest()


def test_chain_writes_artifacts(chain):
    _, cfg_path, out = chain
    for name in ARTIFACTS:
        assert (out / name).exists(), name
    plan = json.loads((out / "plan.json").read_text())
    cfg = load_config(cfg_path)
    assert len(plan["chosen_layers"]) == math.floor(cfg.extender.p * cfg.model.n_layers)
    rows = parse_csv((out / "forgetting.csv").read_text())
    assert {r["variant"] for r in rows} == {"moextend", "full"}
    assert {r["task"] for r in rows} == {"task_a", "task_b"}


def test_artifacts_are_byte_identical_across_runs(chain):
    tmp, _, out = chain
    _, again = run_chain(tmp, "b")
    for name in ARTIFACTS:
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_eval_prints_metrics(chain, capsys):
    _, cfg_path, out = chain
    assert main(["eval", "--config", str(cfg_path), "--out", str(out), "--ckpt", str(out / "finetune.ckpt")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"task_a", "task_b"}


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_provenance_mismatch(chain, capsys):
    _, cfg_path, out = chain
    code = main(["align", "--config", str(cfg_path), "--out", str(out), "--seed", "9",
                 "--ckpt", str(out / "pretrain.ckpt")])
    assert code == EXIT_CODES["state"] != 0
    err = error_of(capsys)
    assert err["error"] == "state" and "pretrain.ckpt" in err["message"]


def test_wrong_stage_checkpoint(chain, capsys):
    _, cfg_path, out = chain
    code = main(["finetune", "--config", str(cfg_path), "--out", str(out), "--ckpt", str(out / "align.ckpt")])
    assert code == EXIT_CODES["state"]
    assert error_of(capsys)["error"] == "state"


def test_missing_checkpoint(tmp_path, capsys):
    code = main(["align", "--out", str(tmp_path), "--ckpt", str(tmp_path / "none.ckpt")])
    assert code == EXIT_CODES["io"]
    err = error_of(capsys)
    assert err["error"] == "io" and "none.ckpt" in err["message"]


def test_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"model": {"depth": 3}}')
    assert main(["pretrain", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CODES["io"]
    assert "depth" in error_of(capsys)["message"]


def test_ablate_placement(chain):
    _, cfg_path, out = chain
    assert main(["ablate", "--config", str(cfg_path), "--out", str(out), "--axis", "placement"]) == 0
    rows = parse_csv((out / "ablation_placement.csv").read_text())
    assert [r["variant"] for r in rows] == ["all_layer", "first_half", "second_half", "interval",
                                             "first_quarter", "first_interval", "extender"]
    assert all(r["status"] == "ok" for r in rows)


def test_ablate_bad_axis(chain, capsys):
    _, cfg_path, out = chain
    assert main(["ablate", "--config", str(cfg_path), "--out", str(out), "--axis", "width"]) == EXIT_CODES["usage"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "moextend.cli", "init-config", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and (tmp_path / "config.json").exists()
