"""Experiment protocol: preprocessing, training runs, tuning, ablation,
evaluation and model comparison. Every command is a pure function of its
config, data and seed; outputs carry no timestamps so reruns are byte-identical.
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from .blocks import LatentConfig
from .data import (DOWNSTREAM, RISK, ROW_ID, TARGET_CLASSES, SplitSpec, SyntheticConfig,
                   drop_sparse_features, generate_synthetic_cohort, impute_round_robin,
                   load_csv, split_indices, synthetic_schema, write_csv)
from .encoding import FeatureSchema
from .errors import DegenerateTestError, SchemaError, UsageError
from .metrics import MetricsReport, brier, format_table, paired_t_test, target_rows
from .model import ModelConfig, build_model, fit, predict_proba, round_to_float32, table_inputs
from .seeding import derive_rng

# variant -> (architecture, head type, multitask)
VARIANTS = {
    "tabperceiver-decoder": ("tabperceiver", "decoder", False),
    "tabperceiver-mlp": ("tabperceiver", "mlp", False),
    "ml-tabperceiver-decoder": ("tabperceiver", "decoder", True),
    "ml-tabperceiver-mlp": ("tabperceiver", "mlp", True),
    "mlp-baseline": ("mlp", "decoder", False),
}


@dataclass
class ExperimentConfig:
    """One experiment: which model, which data, which features, which seeds.

    ``model`` holds :class:`ModelConfig` overrides; ``data`` is either
    ``{"path": csv}`` or ``{"synthetic": {...}, "seed": int}``.
    """

    variant: str = "ml-tabperceiver-decoder"
    tasks: list = None
    model: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    features: list = None
    exclude_groups: list = field(default_factory=list)
    data: dict = field(default_factory=lambda: {"synthetic": {}, "seed": 0})
    sparse_threshold: float = 0.5
    impute_max_iters: int = 10
    bootstrap_resamples: int = 2000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        multitask = VARIANTS[self.variant][2]
        if self.tasks is None:
            self.tasks = [RISK, DOWNSTREAM] if multitask else [RISK]
        self.tasks = list(self.tasks)
        for t in self.tasks:
            if t not in TARGET_CLASSES:
                raise UsageError(f"unknown task {t!r}")
        if not multitask and len(self.tasks) != 1:
            raise UsageError(f"single-task variant {self.variant!r} needs exactly one task, got {self.tasks}")
        if multitask and len(self.tasks) < 2:
            raise UsageError(f"multitask variant {self.variant!r} needs at least two tasks")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise UsageError("seeds list is empty")
        self.exclude_groups = list(self.exclude_groups)
        unknown = set(self.model) - set(ModelConfig.__dataclass_fields__) - {"latent"}
        if unknown:
            raise UsageError(f"unknown model settings: {sorted(unknown)}")

    def model_config(self, seed):
        arch, head, _ = VARIANTS[self.variant]
        over = dict(self.model)
        latent = LatentConfig(**over.pop("latent", {}))
        over.update(architecture=arch, head_type=head, seed=seed, latent=latent,
                    tasks=[(t, len(TARGET_CLASSES[t])) for t in self.tasks])
        return ModelConfig(**over)

    def split_spec(self, seed):
        return SplitSpec(**{**self.split, "seed": seed})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown experiment settings: {sorted(unknown)}")
        return cls(**d)


def load_experiment(path):
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh))


def bundled_config(name="default"):
    return Path(__file__).parent / "configs" / f"{name}.yaml"


# -- data --------------------------------------------------------------------

def schema_path(csv_path):
    p = Path(csv_path)
    return p.with_name(p.stem + ".schema.json")


def load_dataset(exp, data_path=None):
    """The cohort named by ``data_path``, the config's path, or the config's
    synthetic generator settings."""
    path = data_path or exp.data.get("path")
    if path:
        sp = schema_path(path)
        schema = (FeatureSchema.from_dict(json.loads(sp.read_text(encoding="utf-8")))
                  if sp.exists() else synthetic_schema())
        return load_csv(path, schema)
    cfg = SyntheticConfig(**exp.data.get("synthetic", {}))
    table, _ = generate_synthetic_cohort(cfg, int(exp.data.get("seed", 0)))
    return table


@dataclass
class Prepared:
    table: object
    splits: tuple
    dropped: list
    imputation: dict


def select_columns(table, exp):
    """Apply the include-list and the excluded modality groups."""
    schema = table.schema
    if exp.features is not None:
        unknown = [f for f in exp.features if f not in schema.names]
        if unknown:
            raise UsageError(f"unknown features in include-list: {unknown}")
        table = table.select_features(exp.features)
    groups = set(table.schema.group_names())
    for g in exp.exclude_groups:
        if g not in groups:
            raise UsageError(f"unknown feature group {g!r}; available: {sorted(groups)}")
    drop = [n for g in exp.exclude_groups for n in table.schema.features_in_group(g)]
    return table.drop_features(drop)


def preprocess(table, exp, seed, split=True):
    """Feature selection, sparse-feature removal, imputation, then the split."""
    table = select_columns(table, exp)
    table, sparse = drop_sparse_features(table, exp.sparse_threshold)
    return _finish(table, exp, seed, list(sparse.dropped), split)


def _finish(table, exp, seed, dropped, split):
    table, rep = impute_round_robin(table, max_iters=exp.impute_max_iters, seed=seed)
    parts = ()
    if split:
        idx = split_indices(table, exp.split_spec(seed))
        parts = tuple(table.take(i) for i in idx)
    return Prepared(table, parts, dropped, {"iterations": rep.iterations, "converged": rep.converged})


def conform(table, schema):
    """Restrict ``table`` to ``schema``'s features; a missing one is an error naming it."""
    for name in schema.names:
        if name not in table.schema.names:
            raise SchemaError(f"dataset lacks feature {name!r} required by the checkpoint")
        if table.schema.is_categorical(name) != schema.is_categorical(name):
            raise SchemaError(f"feature {name!r} has a different type than in the checkpoint")
        if schema.is_categorical(name) and table.schema.categorical[name] != schema.categorical[name]:
            raise SchemaError(f"feature {name!r} has a different cardinality than in the checkpoint")
    return table.select_features(schema.names)


# -- evaluation ----------------------------------------------------------------

def evaluate(model, table, seed, resamples=2000, meta=None):
    """Table-style report for every task the model predicts."""
    inputs = table_inputs(table)
    probs = predict_proba(model, inputs.codes, inputs.values)
    report = MetricsReport(ci_method=f"stratified percentile bootstrap, {resamples} resamples",
                           meta=dict(meta or {}))
    for name in model.cfg.task_names:
        labels = inputs.targets[name]
        report.rows.extend(target_rows(name, probs[name], labels, TARGET_CLASSES[name],
                                       seed=seed, resamples=resamples))
        report.task_brier[name] = brier(probs[name], labels)
    return report


@dataclass
class RunResult:
    model: object
    report: MetricsReport
    history: list
    prepared: Prepared


def run_once(exp, table, seed, log=None):
    """Preprocess, fit, round to checkpoint precision, evaluate on the test split."""
    prep = preprocess(table, exp, seed)
    train, val, test = prep.splits
    cfg = exp.model_config(seed)
    tr, va = table_inputs(train), table_inputs(val)
    model = build_model(cfg, prep.table.schema, tr)
    state = fit(model, tr, va, log=log)
    round_to_float32(model)
    meta = {"variant": exp.variant, "seed": seed, "best_epoch": state.best_epoch,
            "best_validation_auc": state.best_score, "epochs_run": state.epoch,
            "n_parameters": model.num_parameters(), "dropped_features": prep.dropped,
            "imputation": prep.imputation, "n_train": len(train), "n_validation": len(val),
            "n_test": len(test)}
    report = evaluate(model, test, seed, exp.bootstrap_resamples, meta)
    return RunResult(model, report, state.history, prep)


# -- file output -------------------------------------------------------------

def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_report(report, out, stem="report"):
    _write(Path(out) / f"{stem}.json", report.to_json())
    _write(Path(out) / f"{stem}.txt", report.to_text())


def read_report(path):
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- commands ----------------------------------------------------------------

def cmd_generate(cfg, seed, out, name="cohort"):
    """Write ``<name>.csv``, its schema, and the ground-truth files under ``out``."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    table, truth = generate_synthetic_cohort(cfg, seed)
    csv_path = out / f"{name}.csv"
    write_csv(table, csv_path)
    _write(schema_path(csv_path), _dump_json(table.schema.to_dict()))
    truth.write(out / name)
    return csv_path


def cmd_train(exp, out, data_path=None, log=None):
    """Train once per seed. The first seed's checkpoint and report sit at the
    top of ``out``; with several seeds each also gets ``seed_<s>/``, and the
    top-level report's meta carries every seed's AUCs for comparisons."""
    out = Path(out)
    table = load_dataset(exp, data_path)
    extra = {"experiment": exp.to_dict(), "data_path": str(data_path) if data_path else None}
    per_seed = {}
    first = None
    for seed in exp.seeds:
        res = run_once(exp, table, seed, log)
        dest = out if first is None else out / f"seed_{seed}"
        dest.mkdir(parents=True, exist_ok=True)
        ckpt.save_checkpoint(dest / "checkpoint.tabp", res.model,
                             {**extra, "seed": seed, "dropped": res.prepared.dropped})
        _write(dest / "history.json", _dump_json(res.history))
        for r in res.report.rows:
            per_seed.setdefault(r.target, []).append(r.auc)
        if first is None:
            first = res
        else:
            write_report(res.report, dest)
    first.report.meta["seeds"] = list(exp.seeds)
    first.report.meta["per_seed_auc"] = per_seed
    write_report(first.report, out)
    return first.report


def cmd_eval(checkpoint_path, data_path=None, split="test", resamples=None):
    """Metrics for a checkpoint on its own test split (``split="test"``) or on
    every row of ``data_path`` (``split="all"``). No parameters change."""
    model, header = ckpt.load_checkpoint(checkpoint_path)
    extra = header.get("extra", {})
    exp = ExperimentConfig.from_dict(extra.get("experiment", {}))
    seed = int(extra.get("seed", model.cfg.seed))
    table = load_dataset(exp, data_path or extra.get("data_path"))
    table = conform(table, model.schema)
    prep = _finish(table, exp, seed, extra.get("dropped", []), split == "test")
    if split == "test":
        target = prep.splits[2]
    elif split == "all":
        target = prep.table
    else:
        raise UsageError(f"split must be 'test' or 'all', got {split!r}")
    resamples = exp.bootstrap_resamples if resamples is None else resamples
    return evaluate(model, target, seed, resamples)


def cmd_predict(checkpoint_path, data_path, out_path):
    """Per-row class probabilities and assigned classes as CSV."""
    model, header = ckpt.load_checkpoint(checkpoint_path)
    extra = header.get("extra", {})
    exp = ExperimentConfig.from_dict(extra.get("experiment", {}))
    seed = int(extra.get("seed", model.cfg.seed))
    table = conform(load_dataset(exp, data_path), model.schema)
    prep = _finish(table, exp, seed, [], split=False)
    inputs = table_inputs(prep.table)
    probs = predict_proba(model, inputs.codes, inputs.values)
    cols = [ROW_ID]
    for name in model.cfg.task_names:
        cols += [f"{name}_{c}" for c in TARGET_CLASSES[name]] + [f"{name}_assigned"]
    lines = [",".join(cols)]
    for i in range(len(prep.table)):
        cells = [str(int(prep.table.row_ids[i]))]
        for name in model.cfg.task_names:
            p = probs[name][i]
            cells += [repr(float(v)) for v in p] + [TARGET_CLASSES[name][int(np.argmax(p))]]
        lines.append(",".join(cells))
    _write(out_path, "\n".join(lines) + "\n")
    return probs


# -- tuning ------------------------------------------------------------------

@dataclass
class SearchSpace:
    """Knob -> list of choices, or ``["loguniform", low, high]``."""

    knobs: dict = field(default_factory=lambda: {
        "learning_rate": ["loguniform", 1e-4, 3e-3],
        "batch_size": [16, 32, 64],
        "n_bins": [16, 32, 64, 150],
        "latent.heads_cross": [1, 2, 4],
        "latent.num_blocks": [1, 2, 3],
        "latent.latent_channels": [16, 32, 64],
        "latent.num_latents": [4, 8, 16],
        "latent.self_layers": [1, 2, 4],
        "weight_decay": [0.0, 0.01, 0.1],
        "label_smoothing": [0.0, 0.1, 0.3],
    })

    def __post_init__(self):
        if not self.knobs:
            raise UsageError("search space is empty")
        for k, v in self.knobs.items():
            if not v:
                raise UsageError(f"search knob {k!r} has no choices")
            if v[0] == "loguniform" and not (len(v) == 3 and 0 < v[1] <= v[2]):
                raise UsageError(f"bad loguniform range for {k!r}: {v}")

    def sample(self, rng):
        out = {}
        for k in sorted(self.knobs):
            v = self.knobs[k]
            if v[0] == "loguniform":
                out[k] = float(math.exp(rng.uniform(math.log(v[1]), math.log(v[2]))))
            else:
                out[k] = v[int(rng.integers(len(v)))]
        return out


def apply_overrides(model, overrides):
    """Merge dotted ``latent.x`` / flat knobs into a model-override dict."""
    model = json.loads(json.dumps(model))
    for k, v in overrides.items():
        if k.startswith("latent."):
            model.setdefault("latent", {})[k.split(".", 1)[1]] = v
        else:
            model[k] = v
    return model


def cmd_tune(exp, budget, out=None, space=None, data_path=None, log=None):
    """Seeded random search scored by validation primary-task macro-AUC.

    Trial ``t`` draws from its own stream, so a larger budget extends the
    same sequence of trials. Returns (best experiment config, trial log).
    """
    if budget < 1:
        raise UsageError("budget must be >= 1")
    space = space or SearchSpace()
    seed = exp.seeds[0]
    table = load_dataset(exp, data_path)
    prep = preprocess(table, exp, seed)
    train, val, _ = prep.splits
    tr, va = table_inputs(train), table_inputs(val)
    trials = []
    best = None
    for t in range(budget):
        overrides = space.sample(derive_rng(seed, f"search/{t}"))
        trial_exp = replace(exp, model=apply_overrides(exp.model, overrides))
        cfg = trial_exp.model_config(seed)
        model = build_model(cfg, prep.table.schema, tr)
        state = fit(model, tr, va)
        rec = {"trial": t, "overrides": overrides, "model": cfg.to_dict(),
               "val_auc": state.best_score, "best_epoch": state.best_epoch}
        trials.append(rec)
        if log is not None:
            log(rec)
        if best is None or rec["val_auc"] > best[0]["val_auc"]:
            best = (rec, trial_exp)
    if out is not None:
        out = Path(out)
        _write(out / "trials.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in trials))
        _write(out / "best_config.yaml", yaml.safe_dump(best[1].to_dict(), sort_keys=True))
    return best[1], trials


# -- ablation ------------------------------------------------------------------

@dataclass
class AblationRow:
    excluded: str
    aucs: dict
    deltas: dict
    mean_delta: float


def cmd_ablate(exp, groups=None, out=None, data_path=None, log=None):
    """One run with all features plus one run per excluded group, on identical
    splits. Deltas are (ablated AUC - baseline AUC) per report target."""
    table = load_dataset(exp, data_path)
    available = select_columns(table, exp).schema.group_names()
    if groups is None:
        # groups emptied by the sparse-feature filter would be no-op runs
        kept = drop_sparse_features(select_columns(table, exp), exp.sparse_threshold)[0]
        groups = [g for g in available if g in kept.schema.group_names()]
    groups = list(groups)
    for g in groups:
        if g not in available:
            raise UsageError(f"unknown feature group {g!r}; available: {sorted(available)}")
    seed = exp.seeds[0]
    base = run_once(exp, table, seed, log).report
    base_auc = {r.target: r.auc for r in base.rows}
    rows = [AblationRow("(none)", base_auc, {k: 0.0 for k in base_auc}, 0.0)]
    for g in groups:
        rep = run_once(replace(exp, exclude_groups=[*exp.exclude_groups, g]), table, seed, log).report
        aucs = {r.target: r.auc for r in rep.rows}
        deltas = {k: aucs[k] - base_auc[k] for k in base_auc}
        rows.append(AblationRow(g, aucs, deltas, float(np.mean(list(deltas.values())))))
    if out is not None:
        targets = list(base_auc)
        body = [[r.excluded, *[f"{r.aucs[t]:.3f} ({r.deltas[t]:+.3f})" for t in targets],
                 f"{r.mean_delta:+.4f}"] for r in rows]
        _write(Path(out) / "ablation.txt", format_table(["Excluded group", *targets, "Mean delta"], body))
        _write(Path(out) / "ablation.json", _dump_json([asdict(r) for r in rows]))
    return rows


# -- comparison ----------------------------------------------------------------

@dataclass
class ComparisonRow:
    target: str
    mean_a: float
    mean_b: float
    statistic: float
    p_value: float
    ci_overlap: bool
    verdict: str
    notice: str = ""


def _overlap(a, b):
    return not (a.ci_high < b.ci_low or b.ci_high < a.ci_low)


def cmd_compare(report_a, report_b, out=None):
    """Paired t-test over per-seed AUCs per target plus the CI-overlap check.

    A difference is significant only when the 95% CIs do not overlap and
    p < 0.05.
    """
    seeds_a = report_a.meta.get("per_seed_auc")
    seeds_b = report_b.meta.get("per_seed_auc")
    targets_a = [r.target for r in report_a.rows]
    if targets_a != [r.target for r in report_b.rows]:
        raise UsageError("reports cover different targets")
    if seeds_a is None or seeds_b is None or report_a.meta.get("seeds") != report_b.meta.get("seeds"):
        raise UsageError("reports need per-seed AUCs over the same seed list")
    rows = []
    for t in targets_a:
        a, b = np.asarray(seeds_a[t], float), np.asarray(seeds_b[t], float)
        overlap = _overlap(report_a.row(t), report_b.row(t))
        notice = ""
        try:
            res = paired_t_test(a, b)
            stat, p = res.statistic, res.p_value
        except DegenerateTestError as exc:
            stat, p, notice = float("nan"), 1.0, str(exc)
        verdict = "significant" if (not overlap and p < 0.05) else "not significant"
        rows.append(ComparisonRow(t, float(a.mean()), float(b.mean()), stat, p, overlap, verdict, notice))
    if out is not None:
        body = [[r.target, f"{r.mean_a:.3f}", f"{r.mean_b:.3f}", f"{r.statistic:.3f}",
                 f"{r.p_value:.3g}", "yes" if r.ci_overlap else "no", r.verdict] for r in rows]
        _write(Path(out) / "comparison.txt", format_table(
            ["Target", "Mean AUC A", "Mean AUC B", "t", "p-value", "CI overlap", "Verdict"], body))
        _write(Path(out) / "comparison.json", _dump_json([asdict(r) for r in rows]))
    return rows
