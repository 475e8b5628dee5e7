import json
from dataclasses import replace

import numpy as np
import pytest
import yaml

from tabperceiver import cli, harness
from tabperceiver.data import SyntheticConfig
from tabperceiver.errors import FormatError, SchemaError, UsageError
from tabperceiver.metrics import MetricsReport

TINY = {"embed_dim": 8, "n_bins": 8, "batch_size": 64, "epochs": 2, "patience": 5,
        "latent": {"num_latents": 2, "latent_channels": 4, "self_layers": 1,
                   "heads_cross": 2, "heads_self": 2, "num_blocks": 1}}


def tiny_exp(**kw):
    base = dict(variant="ml-tabperceiver-decoder", model=TINY, bootstrap_resamples=50,
                data={"seed": 0, "synthetic": {"n_rows": 200}})
    base.update(kw)
    return harness.ExperimentConfig(**base)


# -- config --------------------------------------------------------------------

def test_bundled_default_config_loads():
    exp = harness.load_experiment(harness.bundled_config("default"))
    cfg = exp.model_config(0)
    assert exp.variant == "ml-tabperceiver-decoder"
    assert cfg.batch_size == 16 and cfg.embed_dim == 128 and cfg.n_bins == 150
    assert cfg.tasks == (("risk", 3), ("downstream", 2))


def test_bundled_reference_feature_list_has_51_entries():
    path = harness.bundled_config("reference_features")
    groups = yaml.safe_load(path.read_text())
    assert sum(len(v) for v in groups.values()) == 51


def test_variant_task_compatibility():
    with pytest.raises(UsageError):
        harness.ExperimentConfig(variant="tabperceiver-decoder", tasks=["risk", "downstream"])
    with pytest.raises(UsageError):
        harness.ExperimentConfig(variant="no-such-model")
    exp = harness.ExperimentConfig(variant="mlp-baseline")
    assert exp.tasks == ["risk"]
    assert exp.model_config(0).architecture == "mlp"


def test_unknown_settings_rejected():
    with pytest.raises(UsageError):
        harness.ExperimentConfig.from_dict({"varient": "x"})
    with pytest.raises(UsageError):
        harness.ExperimentConfig(model={"hidden_units": 4})


# -- generate ------------------------------------------------------------------

def test_generate_rows_and_identical_bytes(tmp_path):
    cfg = SyntheticConfig(n_rows=1000)
    a = harness.cmd_generate(cfg, 5, tmp_path / "a")
    b = harness.cmd_generate(cfg, 5, tmp_path / "b")
    lines = a.read_text().splitlines()
    assert len(lines) == 1001
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "cohort.truth.csv").exists()
    assert (tmp_path / "a" / "cohort.schema.json").exists()


def test_generate_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(UsageError):
        harness.cmd_generate(SyntheticConfig(n_rows=10), 0, blocker / "sub")


# -- train / eval --------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = harness.cmd_train(tiny_exp(), out)
    return out, report


def test_train_report_has_table_rows(trained):
    out, report = trained
    assert [r.target for r in report.rows] == ["low", "medium", "high", "invasive"]
    for r in report.rows:
        assert r.ci_low <= r.auc <= r.ci_high
        assert r.sensitivity is not None or r.specificity is not None
    text = (out / "report.txt").read_text()
    assert "AUC (95% CI)" in text and "invasive" in text
    assert (out / "checkpoint.tabp").read_bytes()[:4] == b"TABP"


def test_train_rerun_byte_identical(trained, tmp_path):
    out, _ = trained
    harness.cmd_train(tiny_exp(), tmp_path)
    for name in ("checkpoint.tabp", "report.json", "report.txt", "history.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_eval_reproduces_train_report(trained):
    out, report = trained
    again = harness.cmd_eval(out / "checkpoint.tabp")
    assert [r.__dict__ for r in again.rows] == [r.__dict__ for r in report.rows]


def test_eval_corrupted_magic(trained, tmp_path):
    out, _ = trained
    blob = bytearray((out / "checkpoint.tabp").read_bytes())
    blob[:4] = b"ABCD"
    (tmp_path / "bad.tabp").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        harness.cmd_eval(tmp_path / "bad.tabp")


def test_eval_schema_mismatch_names_feature(trained, tmp_path):
    out, _ = trained
    csv = harness.cmd_generate(SyntheticConfig(n_rows=100), 1, tmp_path)
    lines = csv.read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("age")
    rows = [",".join(c for i, c in enumerate(line.split(",")) if i != col) for line in lines]
    csv.write_text("\n".join(rows) + "\n")
    schema = json.loads((tmp_path / "cohort.schema.json").read_text())
    schema["continuous"].remove("age")
    schema["groups"].pop("age")
    (tmp_path / "cohort.schema.json").write_text(json.dumps(schema))
    with pytest.raises(SchemaError, match="age"):
        harness.cmd_eval(out / "checkpoint.tabp", csv, split="all")


def test_predict_writes_probabilities(trained, tmp_path):
    out, _ = trained
    csv = harness.cmd_generate(SyntheticConfig(n_rows=30), 2, tmp_path)
    probs = harness.cmd_predict(out / "checkpoint.tabp", csv, tmp_path / "pred.csv")
    lines = (tmp_path / "pred.csv").read_text().splitlines()
    assert len(lines) == 31
    assert lines[0].startswith("row_id,risk_low,risk_medium,risk_high,risk_assigned")
    np.testing.assert_allclose(probs["risk"].sum(axis=1), 1.0)


def test_multi_seed_report_carries_per_seed_aucs(tmp_path):
    report = harness.cmd_train(tiny_exp(seeds=[0, 1]), tmp_path)
    assert report.meta["seeds"] == [0, 1]
    assert all(len(v) == 2 for v in report.meta["per_seed_auc"].values())
    assert (tmp_path / "seed_1" / "checkpoint.tabp").exists()


# -- tune ----------------------------------------------------------------------

SMALL_SPACE = harness.SearchSpace({"learning_rate": ["loguniform", 1e-3, 1e-2],
                                   "batch_size": [32, 64]})


def test_tune_budget_one_returns_sampled_config(tmp_path):
    best, trials = harness.cmd_tune(tiny_exp(), 1, tmp_path, SMALL_SPACE)
    assert len(trials) == 1
    assert best.model["batch_size"] == trials[0]["overrides"]["batch_size"]
    assert (tmp_path / "trials.jsonl").read_text().count("\n") == 1
    assert yaml.safe_load((tmp_path / "best_config.yaml").read_text())["variant"] == best.variant


def test_tune_nested_budgets_monotone():
    _, t2 = harness.cmd_tune(tiny_exp(), 2, space=SMALL_SPACE)
    _, t3 = harness.cmd_tune(tiny_exp(), 3, space=SMALL_SPACE)
    assert t3[:2] == t2
    assert max(t["val_auc"] for t in t3) >= max(t["val_auc"] for t in t2)


def test_tune_trial_replays_exactly():
    exp = tiny_exp()
    _, trials = harness.cmd_tune(exp, 1, space=SMALL_SPACE)
    replay = replace(exp, model=harness.apply_overrides(exp.model, trials[0]["overrides"]))
    _, again = harness.cmd_tune(replay, 1, space=harness.SearchSpace({"epochs": [TINY["epochs"]]}))
    assert again[0]["val_auc"] == trials[0]["val_auc"]


def test_search_space_validation():
    with pytest.raises(UsageError):
        harness.SearchSpace({})
    with pytest.raises(UsageError):
        harness.cmd_tune(tiny_exp(), 0)


# -- ablate --------------------------------------------------------------------

def test_ablate_runs_one_per_group_plus_baseline(tmp_path):
    rows = harness.cmd_ablate(tiny_exp(), ["decoy", "medications"], tmp_path)
    assert [r.excluded for r in rows] == ["(none)", "decoy", "medications"]
    assert rows[0].mean_delta == 0.0
    assert "Excluded group" in (tmp_path / "ablation.txt").read_text()


def test_ablate_empty_exclusion_equals_baseline():
    exp = tiny_exp()
    table = harness.load_dataset(exp)
    base = harness.run_once(exp, table, 0).report
    rows = harness.cmd_ablate(exp, [])
    assert rows[0].aucs == {r.target: r.auc for r in base.rows}


def test_ablate_unknown_group():
    with pytest.raises(UsageError, match="astrology"):
        harness.cmd_ablate(tiny_exp(), ["astrology"])


# -- compare -------------------------------------------------------------------

def _report(aucs_by_seed, ci):
    from tabperceiver.metrics import TargetRow
    rows = [TargetRow("downstream", "invasive", float(np.mean(aucs_by_seed)), ci[0], ci[1],
                      0.5, 0.5, 0.5, 0.5, 0.3, 100, 70)]
    return MetricsReport(rows=rows, meta={"seeds": list(range(len(aucs_by_seed))),
                                          "per_seed_auc": {"invasive": list(aucs_by_seed)}})


def test_compare_identical_not_significant():
    a = _report([0.7, 0.72, 0.71], (0.65, 0.77))
    rows = harness.cmd_compare(a, a)
    assert rows[0].verdict == "not significant"
    assert rows[0].notice


def test_compare_strong_vs_weak_significant(tmp_path):
    rng = np.random.default_rng(0)
    strong = 0.85 + 0.01 * rng.standard_normal(10)
    weak = 0.65 + 0.01 * rng.standard_normal(10)
    rows = harness.cmd_compare(_report(strong, (0.82, 0.88)), _report(weak, (0.61, 0.69)), tmp_path)
    assert rows[0].verdict == "significant" and rows[0].p_value < 0.05 and not rows[0].ci_overlap
    text = (tmp_path / "comparison.txt").read_text()
    assert "p-value" in text and "CI overlap" in text


def test_compare_overlapping_cis_not_significant():
    rng = np.random.default_rng(1)
    a = 0.80 + 0.01 * rng.standard_normal(10)
    b = 0.75 + 0.01 * rng.standard_normal(10)
    rows = harness.cmd_compare(_report(a, (0.70, 0.85)), _report(b, (0.68, 0.82)))
    assert rows[0].p_value < 0.05 and rows[0].ci_overlap
    assert rows[0].verdict == "not significant"


def test_compare_mismatched_targets():
    a = _report([0.7, 0.72], (0.6, 0.8))
    b = _report([0.7, 0.72], (0.6, 0.8))
    b.rows[0].target = "high"
    with pytest.raises(UsageError):
        harness.cmd_compare(a, b)


# -- CLI -----------------------------------------------------------------------

def test_cli_generate_train_eval(tmp_path, capsys):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump(tiny_exp().to_dict()))
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d"),
                     "--n-rows", "150", "--seed", "3"]) == 0
    data = tmp_path / "d" / "cohort.csv"
    assert capsys.readouterr().out.strip() == str(data)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"),
                     "--data", str(data), "--variant", "mlp-baseline", "--seed", "2"]) == 0
    out = capsys.readouterr().out
    assert "AUC (95% CI)" in out and "low" in out
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.tabp")]) == 0
    assert capsys.readouterr().out == out


def test_cli_reports_errors(tmp_path, capsys):
    bad = tmp_path / "bad.tabp"
    bad.write_bytes(b"nope")
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err
