"""Discrimination, calibration, operating-point metrics and comparison tests."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from . import kernels
from .errors import DegenerateTestError, PreconditionError, UndefinedMetricError, ValidationError
from .seeding import derive_rng


def _binary_labels(labels):
    y = np.asarray(labels)
    if y.dtype == bool:
        return y
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValidationError(f"binary labels must be 0/1, got {uniq.tolist()}")
    return y.astype(bool)


def roc_auc(scores, labels):
    """P(random positive outscores random negative), ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if scores.shape != y.shape:
        raise ValidationError(f"scores {scores.shape} and labels {y.shape} differ in shape")
    if y.all() or not y.any():
        raise UndefinedMetricError("AUC undefined: labels contain a single class")
    return float(kernels.auc_mann_whitney(scores, y))


def auc_bootstrap_ci(scores, labels, resamples=2000, level=0.95, seed=0):
    """Stratified percentile bootstrap interval for :func:`roc_auc`.

    Positives and negatives are resampled separately, so no resample can lose
    a class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    roc_auc(scores, y)
    pos, neg = scores[y], scores[~y]
    rng = derive_rng(seed, "bootstrap")
    pos_idx = rng.integers(0, pos.shape[0], size=(resamples, pos.shape[0]))
    neg_idx = rng.integers(0, neg.shape[0], size=(resamples, neg.shape[0]))
    aucs = kernels.bootstrap_aucs(pos, neg, pos_idx, neg_idx)
    alpha = 1.0 - level
    lo, hi = np.quantile(aucs, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi)


def macro_auc(probs, labels, n_classes):
    """Mean one-vs-rest AUC over classes present in ``labels``."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if n_classes == 2:
        return roc_auc(probs[:, 1], labels == 1)
    aucs = []
    for c in range(n_classes):
        y = labels == c
        if y.any() and not y.all():
            aucs.append(roc_auc(probs[:, c], y))
    if not aucs:
        raise UndefinedMetricError("no class has both positives and negatives")
    return float(np.mean(aucs))


def multiclass_report(probs, labels, class_names):
    """One-vs-rest AUC per class (None when the class is absent) and argmax assignment."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    aucs = {}
    for c, name in enumerate(class_names):
        y = labels == c
        aucs[name] = roc_auc(probs[:, c], y) if (y.any() and not y.all()) else None
    return aucs, np.argmax(probs, axis=1)


def _ratio(num, den):
    return num / den if den else None


def confusion_metrics(assigned, labels, positive):
    """Sensitivity, specificity, precision, NPV for class ``positive``.

    Ratios with a zero denominator are None (undefined), not 0.
    """
    a = np.asarray(assigned) == positive
    y = np.asarray(labels) == positive
    if a.size == 0:
        raise ValidationError("confusion metrics need at least one row")
    tp = int(np.sum(a & y))
    fp = int(np.sum(a & ~y))
    fn = int(np.sum(~a & y))
    tn = int(np.sum(~a & ~y))
    return {
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "precision": _ratio(tp, tp + fp),
        "npv": _ratio(tn, tn + fn),
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
    }


def brier(probs, labels):
    """Mean over rows of sum_c (p_c - 1[y = c])^2 (multi-category sum form)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


@dataclass
class ComparisonResult:
    test: str
    statistic: float
    p_value: float
    df: tuple = ()


def paired_t_test(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise PreconditionError("paired t-test needs two equal-length samples of at least 2")
    d = a - b
    n = d.shape[0]
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateTestError("differences have zero variance")
    t = d.mean() / (sd / np.sqrt(n))
    p = 2.0 * special.stdtr(n - 1, -abs(t))
    return ComparisonResult("paired t-test", float(t), float(min(1.0, p)), (n - 1,))


def chi_square(table):
    """Pearson chi-square test of independence for an r x c contingency table."""
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or min(obs.shape) < 2:
        raise PreconditionError("contingency table must be at least 2 x 2")
    expected = obs.sum(axis=1, keepdims=True) * obs.sum(axis=0, keepdims=True) / obs.sum()
    if np.any(expected <= 0):
        raise PreconditionError("contingency table has a zero expected count")
    stat = float(np.sum((obs - expected) ** 2 / expected))
    dof = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return ComparisonResult("chi-square", stat, float(special.chdtrc(dof, stat)), (dof,))


def one_way_anova(groups):
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2 or any(g.shape[0] < 2 for g in groups):
        raise PreconditionError("ANOVA needs at least two groups of at least two values")
    n = sum(g.shape[0] for g in groups)
    k = len(groups)
    grand = np.concatenate(groups).mean()
    ss_between = sum(g.shape[0] * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(np.sum((g - g.mean()) ** 2) for g in groups)
    if ss_within == 0.0:
        raise DegenerateTestError("within-group variance is zero")
    df1, df2 = k - 1, n - k
    f = (ss_between / df1) / (ss_within / df2)
    return ComparisonResult("one-way ANOVA", float(f), float(special.fdtrc(df1, df2, f)), (df1, df2))


# -- reports -----------------------------------------------------------------

@dataclass
class TargetRow:
    task: str
    target: str
    auc: float
    ci_low: float
    ci_high: float
    sensitivity: float
    specificity: float
    precision: float
    npv: float
    brier: float
    n: int
    n_positive: int


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    task_brier: dict = field(default_factory=dict)
    ci_method: str = "stratified percentile bootstrap, 2000 resamples"
    meta: dict = field(default_factory=dict)

    def row(self, target):
        for r in self.rows:
            if r.target == target:
                return r
        raise KeyError(target)

    def to_dict(self):
        return {"rows": [asdict(r) for r in self.rows], "task_brier": dict(self.task_brier),
                "ci_method": self.ci_method, "meta": dict(self.meta)}

    @classmethod
    def from_dict(cls, d):
        return cls(rows=[TargetRow(**r) for r in d["rows"]], task_brier=d.get("task_brier", {}),
                   ci_method=d.get("ci_method", ""), meta=d.get("meta", {}))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        headers = ["Target", "AUC (95% CI)", "Sensitivity", "Specificity",
                   "Precision", "NPV", "Brier Score", "n"]

        def f2(v):
            return "undef" if v is None else f"{v:.2f}"
        body = []
        for r in self.rows:
            auc = "undef" if r.auc is None else f"{r.auc:.3f} ({r.ci_low:.3f}, {r.ci_high:.3f})"
            body.append([r.target, auc, f2(r.sensitivity), f2(r.specificity), f2(r.precision),
                         f2(r.npv), f2(r.brier), str(r.n)])
        return format_table(headers, body)


def format_table(headers, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *rows)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(x).ljust(w) for x, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def target_rows(task, probs, labels, class_names, seed=0, resamples=2000):
    """Table-style rows for one task: one per class for multiclass tasks,
    a single row for the positive class of a binary task."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    assigned = np.argmax(probs, axis=1)
    classes = range(len(class_names)) if len(class_names) > 2 else [1]
    rows = []
    for c in classes:
        y = labels == c
        name = class_names[c]
        if y.any() and not y.all():
            auc = roc_auc(probs[:, c], y)
            lo, hi = auc_bootstrap_ci(probs[:, c], y, resamples=resamples,
                                      seed=seed + 7919 * c)
        else:
            auc = lo = hi = None
        cm = confusion_metrics(assigned, labels, c)
        pc = probs[:, c]
        rows.append(TargetRow(
            task=task, target=name, auc=auc, ci_low=lo, ci_high=hi,
            sensitivity=cm["sensitivity"], specificity=cm["specificity"],
            precision=cm["precision"], npv=cm["npv"],
            brier=brier(np.column_stack([1.0 - pc, pc]), y.astype(np.int64)),
            n=int(labels.shape[0]), n_positive=int(y.sum())))
    return rows
