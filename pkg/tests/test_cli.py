import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from budgetprune.checkpoint_io import load_checkpoint, read_manifest, save_checkpoint
from budgetprune.cli import main


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_estimate_memory_prints_table_value(capsys, tmp_path):
    rc = main(["estimate-memory", "--config-preset", "llama2-7b", "--bytes", "2", "--batch", "4", "--seq", "256",
               "--manifest", str(tmp_path / "m.json")])
    out = capsys.readouterr().out
    assert rc == 0
    assert "KV cache 512.0 MiB" in out and "weights 12852.5 MiB" in out
    man = json.loads((tmp_path / "m.json").read_text())
    assert man["seed"] == 0 and man["flags"]["config_preset"] == "llama2-7b"


def test_console_script_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "budgetprune.cli", "estimate-memory", "--config-preset", "llama2-7b",
                          "--bytes", "2", "--batch", "4", "--seq", "2048", "--manifest", str(tmp_path / "m.json")],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "KV cache 4096.0 MiB" in res.stdout


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["no-such-command"]) == 1
    assert main(["estimate-memory", "--seq", "0"]) == 1
    assert main(["prune", "--checkpoint", str(tmp_path / "missing.bpck"), "--out-dir", str(tmp_path)]) == 1
    assert main(["prune", "--ratio", "1.5", "--checkpoint", "x", "--out-dir", str(tmp_path)]) == 1
    assert main(["ablate", "--checkpoint", "x", "--out-dir", str(tmp_path)]) == 1
    assert "usage" in capsys.readouterr().err


def test_prune_ratio_one_keeps_everything(backbone_path, tmp_path):
    digest = sha(backbone_path)
    out = tmp_path / "p1"
    assert main(["prune", "--ratio", "1.0", "--checkpoint", str(backbone_path), "--out-dir", str(out)]) == 0
    doc = json.loads((out / "mask.json").read_text())
    assert all(v == 1 for v in doc["mask"])
    assert sha(backbone_path) == digest
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["inputs"][str(backbone_path)] == digest
    assert man["flags"]["ratio"] == 1.0


def test_infeasible_ratio_exits_2(backbone_path, tmp_path):
    rc = main(["prune", "--ratio", "0.01", "--epochs", "1", "--calibration-windows", "2",
               "--checkpoint", str(backbone_path), "--out-dir", str(tmp_path)])
    assert rc == 2


def test_non_finite_checkpoint_exits_3(backbone, tmp_path):
    bad = backbone.copy()
    bad.tensors["lm_head"][:] = np.nan
    path = tmp_path / "nan.bpck"
    save_checkpoint(bad, path)
    assert main(["eval", "--checkpoint", str(path), "--manifest", str(tmp_path / "m.json")]) == 3


def test_full_pipeline(backbone_path, tmp_path, capsys):
    work = tmp_path / "run"
    common = ["--seed", "3", "--ratio", "0.5", "--epochs", "1", "--calibration-windows", "24"]
    assert main(["prune", *common, "--checkpoint", str(backbone_path), "--out-dir", str(work)]) == 0
    mask = work / "mask.json"
    log = json.loads((work / "gate_log.json").read_text())
    assert len(log["loss"]) == 24 and "stability" in log and "sort_time_fraction" in log

    scales = work / "scales.json"
    assert main(["calibrate", *common, "--checkpoint", str(backbone_path), "--mask", str(mask),
                 "--out", str(scales)]) == 0
    pruned = work / "pruned.bpck"
    assert main(["materialize", *common, "--checkpoint", str(backbone_path), "--mask", str(mask),
                 "--scales", str(scales), "--out", str(pruned)]) == 0
    meta = read_manifest(pruned)["meta"]["pruning"]
    assert meta["folded"] is True and meta["keep_ratio"] == "1/2" and meta["seed"] == 3
    man = json.loads((tmp_path / "run" / "pruned.bpck.manifest.json").read_text())
    assert man["results"]["equivalence"]["max_abs"] <= 1e-5

    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(pruned), "--out", str(work / "eval_pruned.json")]) == 0
    assert main(["eval", "--checkpoint", str(backbone_path), "--mask", str(mask), "--scales", str(scales),
                 "--out", str(work / "eval_masked.json")]) == 0
    a = json.loads((work / "eval_pruned.json").read_text())["loss"]
    b = json.loads((work / "eval_masked.json").read_text())["loss"]
    assert abs(a - b) < 1e-5

    assert main(["estimate-memory", "--checkpoint", str(pruned), "--seq", "128", "--batch", "2",
                 "--out", str(work / "mem.json")]) == 0
    mem = json.loads((work / "mem.json").read_text())[0]
    assert mem["params"] == load_checkpoint(pruned).num_params()

    assert main(["report", "--mask", str(mask), "--gate-log", str(work / "gate_log.json"),
                 "--out-dir", str(work / "report")]) == 0
    rep = json.loads((work / "report" / "report.json").read_text())
    assert set(rep["selection_bias"]) == {"p", "p-over-c"}
    assert (work / "report" / "retention.csv").read_text().startswith("layer,ffn,kv")


def test_prune_is_reproducible(backbone_path, tmp_path):
    args = ["--seed", "5", "--ratio", "0.6", "--epochs", "1", "--calibration-windows", "16",
            "--checkpoint", str(backbone_path)]
    assert main(["prune", *args, "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["prune", *args, "--out-dir", str(tmp_path / "b")]) == 0
    assert sha(tmp_path / "a" / "mask.json") == sha(tmp_path / "b" / "mask.json")


def test_ablate_value_per_cost_is_not_better(backbone_path, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--rank", "p-over-c", "--ratio", "0.8", "--checkpoint", str(backbone_path),
                 "--out-dir", str(out)]) == 0
    rows = json.loads((out / "ablation.json").read_text())
    base, variant = rows
    assert base["rank"] == "p" and variant["rank"] == "p-over-c"
    assert variant["held_out_loss"] >= base["held_out_loss"]
