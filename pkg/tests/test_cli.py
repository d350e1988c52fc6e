import csv
import io
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from hyperaug.cli import cmd_export_policy, cmd_sweep, cmd_train, cmd_verify, main
from hyperaug.config import ConfigError, load_run_config, parse_override

ROOT = Path(__file__).resolve().parents[1]
SYNTH = ROOT / "configs" / "synth.toml"


def _records(run_dir):
    return [json.loads(line) for line in (Path(run_dir) / "metrics.jsonl").read_text().splitlines()]


# ---------------------------------------------------------------- config
def test_overrides_parse_as_toml_literals():
    assert parse_override("train.epochs=3") == ("train.epochs", 3)
    assert parse_override("hypergrad.alpha=1e-2") == ("hypergrad.alpha", 0.01)
    assert parse_override("model.hidden=[8, 4]") == ("model.hidden", [8, 4])
    assert parse_override("method=fixed-policy") == ("method", "fixed-policy")
    with pytest.raises(ConfigError):
        parse_override("train.epochs")


@pytest.mark.parametrize(
    "override,key",
    [
        ("train.epochz=3", "train.epochz"),
        ("bogus.key=1", "bogus"),
        ("train.epochs=\"many\"", "train.epochs"),
        ("train.inner_steps=0", "train.inner_steps"),
        ("hypergrad.alpha=-1.0", "hypergrad.alpha"),
        ("hypergrad.neumann_terms=0", "hypergrad.neumann_terms"),
        ("method=rl", "method"),
        ("precision=float16", "precision"),
        ("data.kind=svhn", "data.kind"),
        ("data.validation_fraction=1.0", "data.validation_fraction"),
        ("model.kind=resnet", "model.kind"),
    ],
)
def test_bad_config_names_the_key(override, key):
    with pytest.raises(ConfigError) as info:
        load_run_config(SYNTH, [override], env={})
    assert info.value.key == key


def test_seed_environment_variable_overrides_config():
    assert load_run_config(SYNTH, env={"RA_SEED": "7"}).seed == 7
    assert load_run_config(SYNTH, ["seed=3"], env={}).seed == 3
    with pytest.raises(ConfigError):
        load_run_config(SYNTH, env={"RA_SEED": "x"})


def test_config_round_trips_through_dict():
    from hyperaug.config import build_run_config

    cfg = load_run_config(SYNTH, env={})
    assert build_run_config(cfg.to_dict(), env={}) == cfg


# ---------------------------------------------------------------- train
def test_missing_config_exits_two(tmp_path):
    assert cmd_train(tmp_path / "nope.toml") == 2


def test_malformed_toml_exits_two(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\nepochs = ")
    assert cmd_train(bad) == 2


def test_missing_dataset_exits_two(tmp_path):
    assert cmd_train(SYNTH, ["data.kind=mnist", f"data.path={json.dumps(str(tmp_path))}"], tmp_path / "out") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_failure_exits_one(tmp_path):
    # a huge step size makes the loss overflow to a non-finite value
    code = cmd_train(SYNTH, ["train.inner_lr=1e30", "train.warmup_epochs=6"], tmp_path / "out")
    assert code == 1
    for line in (tmp_path / "out" / "metrics.jsonl").read_text().splitlines():
        json.loads(line)


def test_synth_train_writes_outputs_quickly(tmp_path):
    t0 = time.perf_counter()
    assert cmd_train(SYNTH, [], tmp_path / "run") == 0
    assert time.perf_counter() - t0 < 60
    recs = _records(tmp_path / "run")
    assert [r["epoch"] for r in recs] == list(range(7))
    for name in ("policy.json", "model.bin", "model.json", "config.json"):
        assert (tmp_path / "run" / name).exists()
    policy = json.loads((tmp_path / "run" / "policy.json").read_text())
    assert policy["pi"] == recs[-1]["policy_snapshot"]["pi"]
    assert recs[-1]["test_error"] < recs[0]["test_error"]


def test_rerun_reproduces_metrics(tmp_path):
    assert cmd_train(SYNTH, [], tmp_path / "a") == 0
    assert cmd_train(SYNTH, [], tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_main_dispatch_and_usage_errors(tmp_path):
    assert main(["train", str(SYNTH), "--output-dir", str(tmp_path / "m"), "--set", "train.epochs=1"]) == 0
    assert len(_records(tmp_path / "m")) == 2
    assert main(["frobnicate"]) == 2
    assert main(["sweep", str(SYNTH), "--param", "train.inner_steps", "--values", "1", "--seeds", "a"]) == 2


def test_module_entry_point(tmp_path):
    env = {**os.environ, "RA_SEED": "4"}
    proc = subprocess.run(
        [sys.executable, "-m", "hyperaug", "train", str(SYNTH), "--output-dir", str(tmp_path), "--set", "train.epochs=1"],
        capture_output=True, text=True, env=env, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 4


# ---------------------------------------------------------------- verify
def test_verify_passes_on_a_fresh_build():
    out = io.StringIO()
    assert cmd_verify(stream=out) == 0
    lines = out.getvalue().splitlines()
    assert lines[-1].endswith("oracles passed")
    assert all(line.startswith("PASS") for line in lines[:-1])


@pytest.mark.parametrize("kwargs", [{"alpha": -0.1}, {"neumann_terms": 0}])
def test_verify_rejects_bad_values(kwargs):
    out = io.StringIO()
    assert cmd_verify(stream=out, **kwargs) == 2
    assert "config error" in out.getvalue()


def test_verify_reports_failure_when_series_is_too_short():
    # five terms cannot reach the dense inverse on the quadratic oracles
    assert cmd_verify(neumann_terms=5, stream=io.StringIO()) == 1


# ---------------------------------------------------------------- sweep
SWEEP_SET = ["train.epochs=4", "train.warmup_epochs=0", "train.drop_last=true"]


def _sweep_rows(out):
    with open(out / "sweep.csv", newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("method", ["neumann_implicit", "unrolled"])
def test_sweep_rows_and_memory_proxy(tmp_path, method):
    code = cmd_sweep("train.inner_steps", ["1", "5", "30", "5"], SYNTH, seeds=[0, 1, 2, 1],
                     overrides=SWEEP_SET + [f"hypergrad.method={method}"], output_dir=tmp_path)
    assert code == 0
    rows = _sweep_rows(tmp_path)
    assert len(rows) == 9
    assert list(rows[0]) == ["param", "param_value", "seed", "final_test_error", "peak_memory_proxy", "status"]
    assert all(r["status"] == "ok" and 0.0 <= float(r["final_test_error"]) <= 1.0 for r in rows)
    proxy = {}
    for r in rows:
        proxy.setdefault(int(r["param_value"]), set()).add(int(r["peak_memory_proxy"]))
    by_s = [max(proxy[s]) for s in (1, 5, 30)]
    if method == "unrolled":
        assert by_s[0] < by_s[1] < by_s[2]
        assert min(proxy[5]) > max(proxy[1]) and min(proxy[30]) > max(proxy[5])
    else:
        assert max(by_s) - min(by_s) < 0.1 * min(by_s)


def test_sweep_keeps_going_after_a_failed_run(tmp_path):
    code = cmd_sweep("train.inner_lr", ["0.05", "1e30"], SYNTH, seeds=[0],
                     overrides=["train.epochs=1", "train.warmup_epochs=1"], output_dir=tmp_path)
    assert code == 1
    rows = _sweep_rows(tmp_path)
    assert [r["status"] == "ok" for r in rows] == [True, False]


def test_sweep_rejects_unknown_parameter(tmp_path):
    assert cmd_sweep("train.nope", ["1"], SYNTH, output_dir=tmp_path) == 2


# ---------------------------------------------------------------- export-policy
@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cmd_train(SYNTH, [], out) == 0
    return out


def test_export_policy_row_counts(trained_run):
    assert cmd_export_policy(trained_run) == 0
    with open(trained_run / "policy_evolution.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 * 2 * 14
    assert list(rows[0]) == ["epoch", "stage", "op", "pi", "p", "mu"]
    out = trained_run / "with_initial.csv"
    assert cmd_export_policy(trained_run, include_initial=True, output=out) == 0
    with open(out, newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 7 * 2 * 14


def test_export_policy_round_trip_is_bit_exact(trained_run):
    from hyperaug.augment import MAGNITUDE_OPS, OpKind

    out = trained_run / "rt.csv"
    cmd_export_policy(trained_run, output=out)
    snaps = {r["epoch"]: r["policy_snapshot"] for r in _records(trained_run)}
    with open(out, newline="") as fh:
        for row in csv.DictReader(fh):
            snap, stage, op = snaps[int(row["epoch"])], int(row["stage"]), OpKind.parse(row["op"])
            i = list(OpKind).index(op)
            assert float(row["pi"]) == snap["pi"][stage][i]
            assert float(row["p"]) == snap["p"][stage][i]
            if op.has_magnitude:
                assert float(row["mu"]) == snap["mu"][stage][MAGNITUDE_OPS.index(op)]
            else:
                assert row["mu"] == ""


def test_export_policy_warmup_rows_are_constant(trained_run):
    out = trained_run / "warm.csv"
    cmd_export_policy(trained_run, include_initial=True, output=out)
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    # warmup_epochs = 2 in the synth config: epochs 0..2 share one policy
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append((r["stage"], r["op"], r["pi"], r["p"], r["mu"]))
    assert by_epoch[0] == by_epoch[1] == by_epoch[2]
    assert by_epoch[3] != by_epoch[2]


def test_export_policy_missing_metrics_exits_two(tmp_path):
    assert cmd_export_policy(tmp_path) == 2
