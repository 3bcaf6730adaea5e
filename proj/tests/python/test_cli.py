import csv
import json
import os
import pathlib
import subprocess

import jsonschema
import pytest

CLI = os.environ.get("BALR_CLI")
SCHEMAS = pathlib.Path(os.environ.get("BALR_SCHEMAS", pathlib.Path(__file__).parents[2] / "schemas"))

pytestmark = pytest.mark.skipif(not CLI, reason="BALR_CLI not set")

TINY_MODEL = """[model]
image_size = 32
patch_size = 8
embed_dim = 16
depth = 1
heads = 2
mlp_ratio = 2
adapter_rank = 4
attn_ranks = 4, 4, 4
head_channels = 4
"""


def run(*args, cwd=None, env=None):
    return subprocess.run([CLI, *map(str, args)], capture_output=True, text=True, cwd=cwd, env=env)


def validator(name):
    store = {}
    for path in SCHEMAS.glob("*.schema.json"):
        schema = json.loads(path.read_text())
        store[schema["$id"]] = schema
    registry_schema = store[name]
    resolver = jsonschema.RefResolver.from_schema(registry_schema, store=store)
    return jsonschema.Draft202012Validator(registry_schema, resolver=resolver)


def validate(path, schema):
    validator(schema).validate(json.loads(pathlib.Path(path).read_text()))


def test_bench_attention_sweep(tmp_path):
    r = run("bench-attention", "--n-sweep", "32,64,128", "--seed", "4", "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    assert "bench-attention" not in r.stdout
    for mech in ("baseline", "lr-tensor"):
        for n in (32, 64, 128):
            validate(tmp_path / f"bench_{mech}_n{n}.json", "bench_report.schema.json")
    rows = list(csv.DictReader((tmp_path / "bench_summary.csv").open()))
    assert [int(r["n"]) for r in rows] == [32, 64, 128]
    assert float(rows[-1]["score_slope_baseline"]) == pytest.approx(2.0)
    assert abs(float(rows[-1]["flop_slope_lr"]) - 1.0) < 0.1
    assert 0 < float(rows[-1]["memory_ratio"]) < 1
    plot = (tmp_path / "plot_n_peak_bytes.csv").read_text().splitlines()
    assert plot[0] == "mechanism,n,peak_bytes" and len(plot) == 7


def test_bench_smallest_case(tmp_path):
    r = run("bench-attention", "--mechanism", "baseline", "--n", "1", "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    report = json.loads((tmp_path / "bench_baseline_n1.json").read_text())
    assert report["flops_measured"] > 0


def test_bench_is_reproducible(tmp_path):
    for sub in ("a", "b"):
        assert run("bench-attention", "--n", "48", "--seed", "9", "--out", tmp_path / sub).returncode == 0
    for mech in ("baseline", "lr-tensor"):
        a = json.loads((tmp_path / "a" / f"bench_{mech}_n48.json").read_text())
        b = json.loads((tmp_path / "b" / f"bench_{mech}_n48.json").read_text())
        assert (a["flops_analytic"], a["flops_measured"]) == (b["flops_analytic"], b["flops_measured"])


def test_instrumentation_switch(tmp_path):
    env = dict(os.environ, BALR_NO_INSTRUMENT="1")
    r = run("bench-attention", "--n", "16", "--out", tmp_path, env=env)
    assert r.returncode == 0, r.stderr
    report = json.loads((tmp_path / "bench_lr-tensor_n16.json").read_text())
    assert report["flops_measured"] is None and report["instrumented"] is False
    validate(tmp_path / "bench_lr-tensor_n16.json", "bench_report.schema.json")


def test_bench_adapter(tmp_path):
    r = run("bench-adapter", "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    validate(tmp_path / "adapter.json", "adapter_report.schema.json")
    report = json.loads((tmp_path / "adapter.json").read_text())
    assert report["adapter"]["fullrank"] == 589824 and report["adapter"]["lowrank"] == 24576


def test_config_error_exit_code(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[bench]\nd = 64\n  bogus = 3\n")
    r = run("bench-attention", "--config", cfg, "--out", tmp_path)
    assert r.returncode == 2
    assert "line 3, column 3" in r.stderr
    assert r.stdout == ""
    cfg.write_text("[mystery]\n")
    assert run("train", "--config", cfg, "--out", tmp_path).returncode == 2


def test_train_vacuous_run(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(TINY_MODEL + "[train]\nepochs = 0\ndataset_size = 20\n")
    r = run("train", "--config", cfg, "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    validate(tmp_path / "history.json", "train_history.schema.json")
    history = json.loads((tmp_path / "history.json").read_text())
    assert history["epochs"] == [] and history["best_epoch"] is None
    assert (tmp_path / "history.csv").read_text().splitlines() == [
        "epoch,lr,train_loss,val_dice,val_miou,val_recall,val_precision,val_accuracy"]


def test_train_writes_history(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(TINY_MODEL + "[train]\nepochs = 2\nlr0 = 1e-3\ndataset_size = 20\n")
    r = run("train", "--config", cfg, "--seed", "2", "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    validate(tmp_path / "history.json", "train_history.schema.json")
    plot = (tmp_path / "plot_epoch_dice.csv").read_text().splitlines()
    assert plot[0] == "epoch,val_dice" and len(plot) == 3


def test_train_divergence_exit_code(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(TINY_MODEL + "[train]\nepochs = 2\nlr0 = 1e300\ndataset_size = 20\n")
    r = run("train", "--config", cfg, "--out", tmp_path)
    assert r.returncode == 4
    assert "diverged" in r.stderr


def test_ablate_three_seeds(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(TINY_MODEL.replace("patch_size = 8", "patch_size = 16")
                   + "[train]\nepochs = 1\n[ablate]\nseeds = 1, 2, 3\ndataset_size = 10\n")
    r = run("ablate", "--config", cfg, "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    validate(tmp_path / "ablation.json", "ablation_table.schema.json")
    table = json.loads((tmp_path / "ablation.json").read_text())
    flags = [(row["lr_tensor"], row["adapters"], row["cden"]) for row in table["rows"]]
    assert flags == [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]
    assert all(len(row["per_seed"]) == 3 for row in table["rows"])
    header = (tmp_path / "ablation.csv").read_text().splitlines()[0]
    assert header == "arm,lr_tensor,adapters,cden,seeds,mdsc_mean,mdsc_sd,miou_mean,miou_sd"


def test_verify_filter_and_fault(tmp_path):
    r = run("verify", "--filter", "rope", "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    validate(tmp_path / "verify.json", "verify_report.schema.json")
    names = [c["name"] for c in json.loads((tmp_path / "verify.json").read_text())["checks"]]
    assert names and all("rope" in n for n in names)

    r = run("verify", "--filter", "oracle", "--inject-prefactor-fault", "--out", tmp_path)
    assert r.returncode == 1
    assert "first failing check: reconstruction-oracle" in r.stderr
