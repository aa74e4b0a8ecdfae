"""End-to-end runs of the installed command on fixtures, checked against golden JSON.

Set PREFACT_REGEN_GOLDEN=1 to rewrite the golden files after an intended change.
"""
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from prefact.checkpoint import read_manifest, save_checkpoint
from prefact.zoo import build_model

HERE = os.path.dirname(__file__)
GOLDEN = os.path.join(HERE, "golden")
FIXTURES = os.path.join(HERE, "fixtures")
REGEN = os.environ.get("PREFACT_REGEN_GOLDEN") == "1"


def run(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "prefact", *args], capture_output=True, text=True,
                          cwd=cwd, timeout=600)


def same(a, b, path="$"):
    """Structural equality; floats to 1e-9 relative (BLAS summation order may vary)."""
    if isinstance(a, dict):
        assert isinstance(b, dict) and sorted(a) == sorted(b), f"{path}: keys {sorted(a)} != {sorted(b)}"
        for k in a:
            same(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert isinstance(b, list) and len(a) == len(b), f"{path}: length"
        for i, (x, y) in enumerate(zip(a, b)):
            same(x, y, f"{path}[{i}]")
    elif isinstance(a, float) and not isinstance(b, bool):
        assert isinstance(b, (int, float)), f"{path}: {b!r} is not a number"
        assert abs(a - b) <= 1e-9 * max(1.0, abs(a)), f"{path}: {a} != {b}"
    else:
        assert a == b and type(a) is type(b), f"{path}: {a!r} != {b!r}"


def check_golden(name, obj):
    path = os.path.join(GOLDEN, name)
    if REGEN:
        os.makedirs(GOLDEN, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    with open(path) as fh:
        same(json.load(fh), obj)


def schema_of(obj):
    if isinstance(obj, dict):
        return {k: schema_of(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [schema_of(obj[0])] if obj else []
    return type(obj).__name__


# --- count -------------------------------------------------------------------------------------

def test_count_vgg_hybrid():
    r = run("count", "--arch", "vgg19_cifar10", "--mode", "hybrid", "--json")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert out["params"] == 8_370_634
    check_golden("count_vgg19_hybrid.json", out)


def test_count_lstm_hybrid():
    r = run("count", "--arch", "lstm_wikitext2", "--mode", "hybrid", "--json")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert out["params"] == 67_962_278
    check_golden("count_lstm_hybrid.json", out)


def test_count_layers_and_options():
    r = run("count", "--arch", "toy_cnn", "--mode", "hybrid", "--rank-ratio", "1/2", "--k", "3",
            "--layers", "--json")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert sum(l["params"] for l in out["layers"]) == out["params"]
    assert out["plan"]["K"] == 3 and out["plan"]["ratio"] == "1/2"
    check_golden("count_toy_cnn_layers.json", out)


def test_count_human_table():
    r = run("count", "--arch", "resnet18_cifar10", "--mode", "hybrid", "--layers")
    assert r.returncode == 0
    assert "3,336,138" in r.stdout and "layer4.1.conv2" in r.stdout


# --- simulate-comm -------------------------------------------------------------------------------

def test_simulate_comm_projection(tmp_path):
    r = run("simulate-comm", "--arch", "vgg19_cifar10", "--nodes", "2,4,8,16", "--alpha", "50e-6",
            "--beta", "1.25e9", "--iters", "196", "--json", "--csv", str(tmp_path / "c.csv"))
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert all(row["hybrid"]["seconds_per_epoch"] < row["vanilla"]["seconds_per_epoch"]
               for row in out["rows"])
    assert (tmp_path / "c.csv").read_text().count("\n") == 5
    check_golden("simulate_comm_vgg19.json", out)


def test_simulate_comm_two_nodes_no_latency():
    r = run("simulate-comm", "--arch", "toy_mlp", "--nodes", "2", "--alpha", "0", "--beta", "1e6",
            "--iters", "5", "--per-layer", "--json")
    out = json.loads(r.stdout)
    row = out["rows"][0]
    for mode in ("vanilla", "hybrid"):
        assert row[mode]["seconds_per_iter"] == row[mode]["bytes"] / 1e6
    assert out["mode"] == "per_layer"


# --- gradcheck ------------------------------------------------------------------------------------

def test_gradcheck_command():
    r = run("gradcheck", "--json")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert out["failed"] == 0 and out["checked"] == len(out["results"]) > 100
    check_golden("gradcheck_schema.json", schema_of(out))


# --- train / factorize / sweeps --------------------------------------------------------------

def test_train_writes_outputs(tmp_path):
    shutil.copy(os.path.join(FIXTURES, "toy_mlp.json"), tmp_path / "cfg.json")
    r = run("train", "--config", "cfg.json", "--out", "run", "--json", cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    csv_lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert csv_lines[0].startswith("epoch,phase,lr,loss")
    assert len(csv_lines) == 5
    assert json.loads((tmp_path / "run" / "summary.json").read_text()) == out
    man, _ = read_manifest((tmp_path / "run" / "model.puff").read_bytes())
    assert man["mode"] == "hybrid" and man["epoch"] == 4
    check_golden("train_toy_mlp.json", out)


def test_train_human_output(tmp_path):
    r = run("train", "--config", os.path.join(FIXTURES, "toy_mlp.json"), "--out", str(tmp_path))
    assert r.returncode == 0
    assert "vanilla" in r.stdout and "hybrid" in r.stdout


def test_factorize_command(tmp_path):
    save_checkpoint(build_model("toy_cnn", seed=3), tmp_path / "v.puff")
    (tmp_path / "plan.json").write_text(json.dumps({"K": 2, "ratio": "1/4"}))
    r = run("factorize", "--ckpt", "v.puff", "--plan", "plan.json", "--out", "h.puff", "--json",
            cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    man, _ = read_manifest((tmp_path / "h.puff").read_bytes())
    assert man["mode"] == "hybrid"
    assert {t["name"] for t in man["tensors"]} >= {"conv2.weight_u", "conv2.weight_v"}
    check_golden("factorize_toy_cnn.json", out)


def test_sweep_k_counts():
    r = run("sweep-k", "--arch", "vgg19_cifar10", "--k-list", "2,6,10,14", "--json")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    params = [row["params"] for row in out["rows"]]
    assert params == sorted(params) and params[2] == 8_370_634
    check_golden("sweep_k_vgg19.json", out)


def test_sweep_k_with_training():
    r = run("sweep-k", "--arch", "toy_mlp", "--k-list", "1,2", "--config",
            os.path.join(FIXTURES, "toy_mlp.json"), "--json")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert all(np.isfinite(row["final_loss"]) for row in out["rows"])
    check_golden("sweep_k_toy_mlp_train.json", out)


def test_sweep_warmup():
    r = run("sweep-warmup", "--config", os.path.join(FIXTURES, "toy_mlp.json"), "--ewu-list", "0,2,4",
            "--json")
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert [row["warmup_epochs"] for row in out["rows"]] == [0, 2, 4]
    check_golden("sweep_warmup_toy_mlp.json", out)


# --- errors and exit codes ---------------------------------------------------------------------

@pytest.mark.parametrize("args", [
    [],
    ["count"],
    ["count", "--arch", "alexnet"],
    ["count", "--arch", "toy_mlp", "--mode", "hybrid", "--rank-ratio", "3/2"],
    ["count", "--arch", "toy_mlp", "--mode", "hybrid", "--k", "0"],
    ["simulate-comm", "--arch", "toy_mlp", "--nodes", "1", "--alpha", "0", "--beta", "1", "--iters", "1"],
    ["simulate-comm", "--arch", "toy_mlp", "--nodes", "2", "--alpha", "0", "--beta", "1", "--iters", "1",
     "--flat", "--per-layer"],
    ["sweep-k", "--arch", "toy_mlp", "--k-list", "one"],
])
def test_argument_errors_exit_2(args):
    r = run(*args)
    assert r.returncode == 2
    assert r.stderr.strip() and not r.stdout.strip()


def test_bad_config_exit_2(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"arch_id": "toy_mlp", "train": {"epochs": 1}}))
    r = run("train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o"))
    assert r.returncode == 2 and "dataset" in r.stderr


def test_runtime_errors_exit_1(tmp_path):
    (tmp_path / "junk.puff").write_bytes(b"NOTACHECKPOINT" * 4)
    (tmp_path / "plan.json").write_text("{}")
    r = run("factorize", "--ckpt", str(tmp_path / "junk.puff"), "--plan", str(tmp_path / "plan.json"),
            "--out", str(tmp_path / "o.puff"))
    assert r.returncode == 1 and "bad magic" in r.stderr
    r = run("factorize", "--ckpt", str(tmp_path / "missing.puff"), "--plan", str(tmp_path / "plan.json"),
            "--out", str(tmp_path / "o.puff"))
    assert r.returncode == 1 and r.stderr


def test_console_script_installed():
    exe = shutil.which("prefact")
    if exe is None:
        pytest.skip("console script not on PATH")
    r = subprocess.run([exe, "count", "--arch", "toy_mlp", "--json"], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["arch_id"] == "toy_mlp"
