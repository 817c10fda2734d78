import json
import math
import os

import numpy as np
import pytest

from bayesncl import cli, datagen
from bayesncl import theoryverify as tv
from bayesncl.trainer import GradStatsLog, NumericalError

FAST = {"data": {"eval_size": 200}, "model": {"K": 8, "hidden": [16]},
        "train": {"epochs": 3, "steps_per_epoch": 4, "batch_size": 32, "stats_every": 1},
        "eval": {"probe": {"epochs": 20, "n_train": 300, "n_test": 100}}}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write(root / "cfg.json", FAST)
    out = root / "out"
    assert cli.main(["train", cfg, "--out", str(out)]) == 0
    return root, out


def test_train_outputs(trained):
    _, out = trained
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,align,sparsity,total,act_ratio"
    assert len(rows) == 1 + FAST["train"]["epochs"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and "metrics.csv" in manifest["files"]
    assert sorted(os.listdir(out / "snapshots")) == ["epoch_0001.ngcl", "epoch_0002.ngcl", "epoch_0003.ngcl"]


def test_train_is_byte_identical(trained, tmp_path):
    root, out = trained
    again = tmp_path / "again"
    assert cli.main(["train", str(root / "cfg.json"), "--out", str(again)]) == 0
    for name in ("metrics.csv", "checkpoint.ngcl"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_config_hash_tracks_bytes(tmp_path):
    a = _write(tmp_path / "a.json", FAST)
    b = tmp_path / "b.json"
    b.write_text(json.dumps(FAST) + " ")
    for p, d in ((a, "ra"), (str(b), "rb")):
        assert cli.main(["train", p, "--out", str(tmp_path / d)]) == 0
    ha = json.loads((tmp_path / "ra" / "manifest.json").read_text())["config_sha256"]
    hb = json.loads((tmp_path / "rb" / "manifest.json").read_text())["config_sha256"]
    assert ha != hb


def test_missing_config_names_path(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert cli.main(["train", missing]) == cli.EXIT_USAGE
    assert missing in capsys.readouterr().err


@pytest.mark.parametrize("doc, path", [
    ({"train": {"epochz": 1}}, "train.epochz"),
    ({"objective": {"rho": 1.5}}, "objective.rho"),
    ({"data": {"synthetic": {"B": 1}}}, "data.synthetic"),
    ({"model": {"strategy": {"kind": "hard"}}}, "model.strategy.kind"),
    ({"data": {"source": "cifar10"}}, "data.cifar10_dir"),
])
def test_invalid_config_names_field(tmp_path, capsys, doc, path):
    assert cli.main(["train", _write(tmp_path / "c.json", doc)]) == cli.EXIT_USAGE
    assert path in capsys.readouterr().err


def test_lambda_alias():
    cfg = cli.parse_config({"objective": {"lambda": 0.5}})
    assert cfg.train_config().lam == 0.5
    assert cfg.canonical()["objective"]["lambda"] == 0.5


def test_defaults_mirror_reference_settings():
    t = cli.RunConfig().train_config()
    assert (t.rho, t.lam, t.gate_lr_scale) == (0.8, 3e-5, 0.25)


def test_numerical_failure_exit_code(tmp_path, monkeypatch, capsys):
    def diverge(*a, **kw):
        raise NumericalError("non-finite loss; first non-finite tensor: node 7 (exp)")

    monkeypatch.setattr(cli, "train", diverge)
    assert cli.main(["train", _write(tmp_path / "c.json", FAST), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERIC
    assert "node 7" in capsys.readouterr().err


def test_eval_tables(trained, tmp_path):
    _, out = trained
    dest = tmp_path / "ev"
    assert cli.main(["eval", str(out / "checkpoint.ngcl"), "--probe", "--retrieval", "--ks", "1", "5",
                     "--out", str(dest)]) == 0
    interp = (dest / "interp.csv").read_text().splitlines()
    assert interp[0] == "method,cons,h_sum,h_mean,h_freq,act" and interp[1].startswith("bayesncl_ste,")
    assert (dest / "probe.csv").read_text().splitlines()[0] == "method,top1,top5"
    assert (dest / "retrieval.csv").read_text().splitlines()[0] == "method,k,dims,precision"


def test_eval_with_all_dims_matches_full_retrieval(trained, tmp_path):
    _, out = trained
    ck = str(out / "checkpoint.ngcl")
    cli.main(["eval", ck, "--retrieval", "--out", str(tmp_path / "a")])
    cli.main(["eval", ck, "--retrieval", "--retrieval-dims", "8", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "retrieval.csv").read_text() == (tmp_path / "b" / "retrieval.csv").read_text()


def test_dense_model_on_ten_classes_is_chance_level(tmp_path):
    doc = {"data": {"synthetic": {"B": 0, "prevalence": [], "noise_sigma": 1.0}},
           "model": {"K": 64, "hidden": [64], "nonneg": False, "strategy": {"kind": "none"}},
           "train": {"epochs": 0}, "eval": {"probe": {"n_train": 5000}}}
    assert cli.main(["train", _write(tmp_path / "c.json", doc), "--out", str(tmp_path / "o")]) == 0
    # a dense untrained encoder fires every unit on every class
    assert cli.main(["eval", str(tmp_path / "o" / "checkpoint.ngcl")]) == 0
    header, row = (tmp_path / "o" / "interp.csv").read_text().splitlines()
    vals = dict(zip(header.split(","), row.split(",")))
    assert vals["method"] == "cl"
    assert abs(float(vals["cons"]) - 10.0) < 1.0
    assert abs(float(vals["h_freq"]) - math.log(10)) < 0.02


def test_corrupt_checkpoint_exit_code(tmp_path):
    bad = tmp_path / "bad.ngcl"
    bad.write_bytes(b"NGCL\x01\x00garbage")
    assert cli.main(["eval", str(bad)]) == cli.EXIT_ARTIFACT
    assert cli.main(["eval", str(tmp_path / "absent.ngcl")]) == cli.EXIT_ARTIFACT


def test_width_mismatch_exit_code(trained, tmp_path):
    _, out = trained
    csv = tmp_path / "w.csv"
    datagen.write_csv(csv, np.random.default_rng(0).random((20, 5)), np.arange(20) % 2)
    assert cli.main(["eval", str(out / "checkpoint.ngcl"), "--data", str(csv)]) == cli.EXIT_ARTIFACT


def test_diagnose_writes_dynamics(trained):
    _, out = trained
    assert cli.main(["diagnose", str(out / "snapshots")]) == 0
    lines = (out / "dynamics.csv").read_text().splitlines()
    assert lines[0] == "epoch,af_gv,af_sc,gv_sc" and len(lines) == 4


def test_diagnose_needs_three_snapshots(tmp_path):
    (tmp_path / "s").mkdir()
    assert cli.main(["diagnose", str(tmp_path / "s")]) == cli.EXIT_USAGE


def test_unknown_suite_lists_choices(capsys):
    assert cli.main(["verify", "nope"]) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert all(name in err for name in ("prop1", "thm1", "thm2", "thm3", "ipw", "all"))


def test_verify_all_aggregates(monkeypatch, capsys):
    def ok(**kw):
        return tv.SuiteResult("a", [("fine", True, "")], {})

    def bad(**kw):
        return tv.SuiteResult("b", [("broken", False, "")], {})

    monkeypatch.setattr(tv, "SUITES", {"a": ok, "b": bad})
    assert cli.main(["verify", "all"]) == cli.EXIT_FAIL
    assert "FAIL: broken" in capsys.readouterr().out
    monkeypatch.setattr(tv, "SUITES", {"a": ok})
    assert cli.main(["verify", "all"]) == cli.EXIT_OK


def test_thread_variable_validation(monkeypatch, tmp_path):
    monkeypatch.setenv("NGCL_THREADS", "zero")
    assert cli.main(["schema"]) == cli.EXIT_USAGE
    monkeypatch.setenv("NGCL_THREADS", "2")
    assert cli.main(["schema", "--out", str(tmp_path / "s.json")]) == 0


def test_shipped_schema_is_current():
    here = os.path.dirname(__file__)
    shipped = json.load(open(os.path.join(here, "..", "docs", "runconfig.schema.json")))
    assert shipped == cli.config_schema()


def test_constant_activation_gives_na_row():
    log = GradStatsLog()
    log.append(1, np.full(4, 0.5), np.arange(4.0), np.arange(4.0))
    assert math.isnan(tv.dynamics_rows(log)[0]["af_gv"])
