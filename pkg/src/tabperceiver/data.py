"""Cohort tables: CSV ingestion, preprocessing, splitting, and a synthetic
clinical-style cohort with known generative structure."""
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import ndtr, ndtri

from .encoding import FeatureSchema
from .errors import LoadError, PreconditionError, SchemaError, SplitError, ValidationError
from .seeding import derive_rng

RISK = "risk"
DOWNSTREAM = "downstream"
TARGET_CLASSES = {
    RISK: ("low", "medium", "high"),
    DOWNSTREAM: ("functional", "invasive"),
}
ROW_ID = "row_id"
MISSING_TOKENS = {"", "NA", "na", "NaN", "nan"}


@dataclass
class CohortTable:
    """Rows x features (schema order) with a missing mask and both targets.

    Categorical cells hold integer codes stored as floats; missing cells are NaN
    in ``values`` and True in ``missing``.
    """

    schema: FeatureSchema
    values: np.ndarray
    missing: np.ndarray
    targets: dict
    row_ids: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, f = self.values.shape
        if f != len(self.schema.names):
            raise SchemaError(f"table has {f} columns, schema declares {len(self.schema.names)}")
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.row_ids is None:
            self.row_ids = np.arange(n)
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        self.targets = {k: np.asarray(v, dtype=np.int64) for k, v in self.targets.items()}
        for name, y in self.targets.items():
            if y.shape != (n,):
                raise ValidationError(f"target {name!r} has shape {y.shape}, expected ({n},)")
            k = len(TARGET_CLASSES.get(name, ())) or int(y.max()) + 1
            if n and (y.min() < 0 or y.max() >= k):
                raise ValidationError(f"target {name!r} outside 0..{k - 1}")

    def __len__(self):
        return self.values.shape[0]

    def column(self, name):
        return self.values[:, self.schema.names.index(name)]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return CohortTable(self.schema, self.values[idx], self.missing[idx],
                           {k: v[idx] for k, v in self.targets.items()}, self.row_ids[idx])

    def select_features(self, names):
        names = [n for n in self.schema.names if n in set(names)]
        cols = [self.schema.names.index(n) for n in names]
        return CohortTable(self.schema.select(names), self.values[:, cols],
                           self.missing[:, cols], dict(self.targets), self.row_ids)

    def drop_features(self, names):
        names = set(names)
        return self.select_features([n for n in self.schema.names if n not in names])

    def categorical_codes(self):
        cols = [self.schema.names.index(n) for n in self.schema.categorical]
        block = self.values[:, cols]
        if np.isnan(block).any():
            raise ValidationError("categorical cells still missing; impute first")
        return block.astype(np.int64)

    def continuous_values(self):
        cols = [self.schema.names.index(n) for n in self.schema.continuous]
        block = self.values[:, cols]
        if np.isnan(block).any():
            raise ValidationError("continuous cells still missing; impute first")
        return block

    def validate(self):
        for j, name in enumerate(self.schema.names):
            if self.schema.is_categorical(name):
                col = self.values[~self.missing[:, j], j]
                k = self.schema.categorical[name]
                if col.size and (np.any(col != np.round(col)) or col.min() < 0 or col.max() >= k):
                    raise ValidationError(f"categorical feature {name!r} outside 0..{k - 1}")
        if not np.array_equal(self.missing, np.isnan(self.values)):
            raise ValidationError("missing mask disagrees with NaN cells")


# -- CSV ---------------------------------------------------------------------

def load_csv(path, schema):
    """Read a comma-separated file with a header row into a :class:`CohortTable`.

    ``NA`` or empty cells are missing. Allowed columns are the schema's
    features, the two targets, and an optional ``row_id``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path} is empty") from None
        allowed = set(schema.names) | set(TARGET_CLASSES) | {ROW_ID}
        for col in header:
            if col not in allowed:
                raise LoadError(f"undeclared column {col!r} in {path}", row=1, column=col)
        for name in list(schema.names) + list(TARGET_CLASSES):
            if name not in header:
                raise LoadError(f"column {name!r} missing from {path}", row=1, column=name)
        pos = {c: i for i, c in enumerate(header)}
        values, targets, row_ids = [], {k: [] for k in TARGET_CLASSES}, []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise LoadError(f"expected {len(header)} cells, got {len(rec)}", row=lineno)
            row = []
            for name in schema.names:
                cell = rec[pos[name]].strip()
                if cell in MISSING_TOKENS:
                    row.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise LoadError(f"unparseable cell {cell!r}", row=lineno, column=name) from None
                if schema.is_categorical(name):
                    k = schema.categorical[name]
                    if v != int(v) or not 0 <= v < k:
                        raise LoadError(f"category {cell!r} outside 0..{k - 1}", row=lineno, column=name)
                elif not math.isfinite(v):
                    raise LoadError(f"non-finite value {cell!r}", row=lineno, column=name)
                row.append(v)
            values.append(row)
            for tname, classes in TARGET_CLASSES.items():
                cell = rec[pos[tname]].strip()
                if cell in classes:
                    targets[tname].append(classes.index(cell))
                elif cell.isdigit() and int(cell) < len(classes):
                    targets[tname].append(int(cell))
                else:
                    raise LoadError(f"unknown {tname} label {cell!r}", row=lineno, column=tname)
            if ROW_ID in pos:
                try:
                    row_ids.append(int(rec[pos[ROW_ID]]))
                except ValueError:
                    raise LoadError("row_id must be an integer", row=lineno, column=ROW_ID) from None
    vals = np.array(values, dtype=np.float64).reshape(-1, len(schema.names))
    return CohortTable(schema, vals, np.isnan(vals), targets,
                       np.array(row_ids) if row_ids else None)


def _fmt(v, categorical):
    if np.isnan(v):
        return "NA"
    return str(int(v)) if categorical else repr(float(v))


def write_csv(table, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cats = [table.schema.is_categorical(n) for n in table.schema.names]
    lines = [",".join([ROW_ID, *table.schema.names, *TARGET_CLASSES])]
    for i in range(len(table)):
        cells = [str(int(table.row_ids[i]))]
        cells += [_fmt(v, c) for v, c in zip(table.values[i], cats)]
        cells += [TARGET_CLASSES[t][table.targets[t][i]] for t in TARGET_CLASSES]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- preprocessing -----------------------------------------------------------

@dataclass
class SparseReport:
    threshold: float
    dropped: list
    missing_fraction: dict


def drop_sparse_features(table, threshold=0.5):
    """Remove features whose missing fraction is strictly above ``threshold``.

    Features with a ``drop`` missingness policy are removed if they have any
    missing cell.
    """
    frac = table.missing.mean(axis=0) if len(table) else np.zeros(len(table.schema.names))
    fractions = {n: float(f) for n, f in zip(table.schema.names, frac)}
    dropped = [n for n, f in fractions.items()
               if f > threshold or (table.schema.missing_policy.get(n) == "drop" and f > 0)]
    out = table.drop_features(dropped) if dropped else table
    return out, SparseReport(threshold, dropped, fractions)


@dataclass
class ImputationReport:
    iterations: int
    max_deltas: list = field(default_factory=list)
    converged: bool = True


def _design_matrix(values, schema, exclude):
    cols = [np.ones(values.shape[0])]
    for j, name in enumerate(schema.names):
        if j == exclude:
            continue
        col = values[:, j]
        if schema.is_categorical(name):
            k = schema.categorical[name]
            codes = col.astype(np.int64)
            for c in range(1, k):
                cols.append((codes == c).astype(np.float64))
        else:
            sd = col.std()
            cols.append((col - col.mean()) / sd if sd > 0 else np.zeros_like(col))
    return np.column_stack(cols)


def _ridge_fit(x, y, alpha):
    # intercept (column 0) left unpenalized
    pen = np.full(x.shape[1], alpha)
    pen[0] = 0.0
    gram = x.T @ x + np.diag(pen)
    return np.linalg.lstsq(gram, x.T @ y, rcond=None)[0]


def impute_round_robin(table, max_iters=10, tol=1e-3, ridge=1e-8, seed=0):
    """Chained-equations imputation; observed cells are never changed.

    Missing cells start at the column mean (continuous) or mode (categorical).
    Each sweep visits the incomplete features in schema order and refits a
    ridge regression on all other columns: continuous features take the
    prediction, categorical ones the highest-scoring class of a one-vs-rest
    linear scorer. Stops after ``max_iters`` sweeps or once no cell moves by
    ``tol`` or more. ``seed`` is accepted for interface stability; the
    procedure itself is deterministic.
    """
    del seed
    values = table.values.copy()
    miss = table.missing
    schema = table.schema
    incomplete = [j for j in range(values.shape[1]) if miss[:, j].any()]
    if not incomplete:
        return table, ImputationReport(iterations=0)
    for j in incomplete:
        name = schema.names[j]
        obs = values[~miss[:, j], j]
        if obs.size == 0:
            raise PreconditionError(f"feature {name!r} has no observed values")
        if schema.is_categorical(name):
            counts = np.bincount(obs.astype(np.int64), minlength=schema.categorical[name])
            values[miss[:, j], j] = float(np.argmax(counts))
        else:
            values[miss[:, j], j] = obs.mean()
    report = ImputationReport(iterations=0, converged=False)
    for _ in range(max_iters):
        max_delta = 0.0
        for j in incomplete:
            name = schema.names[j]
            rows_obs, rows_mis = ~miss[:, j], miss[:, j]
            x = _design_matrix(values, schema, j)
            if schema.is_categorical(name):
                k = schema.categorical[name]
                onehot = np.eye(k)[values[rows_obs, j].astype(np.int64)]
                beta = _ridge_fit(x[rows_obs], onehot, ridge)
                new = np.argmax(x[rows_mis] @ beta, axis=1).astype(np.float64)
            else:
                beta = _ridge_fit(x[rows_obs], values[rows_obs, j], ridge)
                new = x[rows_mis] @ beta
            delta = float(np.max(np.abs(new - values[rows_mis, j])))
            max_delta = max(max_delta, delta)
            values[rows_mis, j] = new
        report.iterations += 1
        report.max_deltas.append(max_delta)
        if max_delta < tol:
            report.converged = True
            break
    out = CohortTable(schema, values, np.zeros_like(miss), dict(table.targets), table.row_ids)
    return out, report


# -- splitting ---------------------------------------------------------------

@dataclass
class SplitSpec:
    train: float = 0.6
    validation: float = 0.2
    test: float = 0.2
    seed: int = 0
    stratify: str = RISK

    def __post_init__(self):
        fr = (self.train, self.validation, self.test)
        if min(fr) <= 0 or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValidationError(f"split fractions must be positive and sum to 1, got {fr}")


def _apportion(target_total, quotas, capacity):
    """Integer allocation near ``quotas`` summing to ``target_total``
    (largest remainder; ties to the lower stratum index)."""
    base = np.minimum(np.floor(quotas).astype(np.int64), capacity)
    short = target_total - int(base.sum())
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
    while short > 0:
        progressed = False
        for i in order:
            if short == 0:
                break
            if base[i] < capacity[i]:
                base[i] += 1
                short -= 1
                progressed = True
        if not progressed:
            break
    return base


def split_indices(table, spec):
    y = table.targets[spec.stratify]
    classes = np.unique(y)
    strata = [np.flatnonzero(y == c) for c in classes]
    for c, idx in zip(classes, strata):
        if idx.size < 3:
            raise SplitError(f"stratum {spec.stratify}={c} has {idx.size} rows; need at least 3")
    rng = derive_rng(spec.seed, "split")
    strata = [rng.permutation(idx) for idx in strata]
    sizes = np.array([idx.size for idx in strata])
    n = int(sizes.sum())
    n_train = round(spec.train * n)
    n_val = round(spec.validation * n)
    train_k = _apportion(n_train, spec.train * sizes, sizes)
    val_k = _apportion(n_val, spec.validation * sizes, sizes - train_k)
    parts = ([], [], [])
    for idx, a, b in zip(strata, train_k, val_k):
        parts[0].append(idx[:a])
        parts[1].append(idx[a:a + b])
        parts[2].append(idx[a + b:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def split(table, spec):
    """Stratified train / validation / test tables, deterministic per seed."""
    return tuple(table.take(idx) for idx in split_indices(table, spec))


# -- synthetic cohort --------------------------------------------------------

RISK_PRIORS = (0.255, 0.208, 0.537)
INVASIVE_PRIOR = 0.73


@dataclass
class SyntheticConfig:
    """Generator settings.

    ``rho`` mixes the risk latent into the downstream score. ``layout``
    ``"shared"`` fills the remainder with independent noise; ``"separate"``
    fills it with a nuisance factor that the features also observe.
    """

    n_rows: int = 1000
    n_factors: int = 3
    rho: float = 0.8
    risk_label_noise: float = 0.0
    downstream_label_noise: float = 0.0
    feature_noise: float = 1.0
    missing_rate: float = 0.02
    sparse_missing_rate: float = 0.6
    layout: str = "shared"
    segment_loading: float = 1.0
    other_loading: float = 0.35
    nuisance_loading: float = 0.6
    risk_priors: tuple = RISK_PRIORS
    invasive_prior: float = INVASIVE_PRIOR

    def __post_init__(self):
        self.risk_priors = tuple(float(p) for p in self.risk_priors)
        for name in ("rho", "risk_label_noise", "downstream_label_noise", "missing_rate",
                     "sparse_missing_rate", "invasive_prior"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.layout not in ("shared", "separate"):
            raise ValidationError(f"layout must be 'shared' or 'separate', got {self.layout!r}")
        if self.n_factors < 2:
            raise ValidationError("need at least two latent factors")
        if self.n_rows < 1:
            raise ValidationError("n_rows must be positive")
        if not math.isclose(sum(self.risk_priors), 1.0, abs_tol=1e-9):
            raise ValidationError("risk priors must sum to 1")

    def to_dict(self):
        d = asdict(self)
        d["risk_priors"] = list(self.risk_priors)
        return d


# (name, kind, cardinality or (mean, sd), group, prevalence / level cut points)
_FEATURES = [
    ("age", "cont", (59.0, 10.8), "demographics", None),
    ("weight", "cont", (85.3, 18.4), "demographics", None),
    ("male", "cat", 2, "demographics", (0.656,)),
    ("smoking", "cat", 3, "demographics", (0.6, 0.231, 0.169)),
    ("pretest_probability", "cont", (35.6, 31.2), "demographics", None),
    ("baseline_hr", "cont", (67.0, 11.9), "vital_signs", None),
    ("baseline_sbp", "cont", (137.0, 19.7), "vital_signs", None),
    ("baseline_dbp", "cont", (79.0, 10.4), "vital_signs", None),
    ("aspirin", "cat", 2, "medications", (0.581,)),
    ("beta_blockers", "cat", 2, "medications", (0.441,)),
    ("statins", "cat", 2, "medications", (0.518,)),
    ("calcium_channel_blockers", "cat", 2, "medications", (0.149,)),
    ("ace_inhibitors", "cat", 2, "medications", (0.271,)),
    ("hypertension", "cat", 2, "comorbidity", (0.563,)),
    ("hyperlipidemia", "cat", 2, "comorbidity", (0.618,)),
    ("diabetes", "cat", 2, "comorbidity", (0.162,)),
    ("family_history", "cat", 2, "comorbidity", (0.509,)),
    ("prior_catheterisation", "cat", 2, "comorbidity", (0.12,)),
    *[(f"stenosis_s{i}", "cat", 5, "segment_readings", (0.45, 0.2, 0.15, 0.12, 0.08))
      for i in range(1, 9)],
    *[(f"calcified_p{i}", "cat", 4, "segment_readings", (0.5, 0.25, 0.15, 0.1))
      for i in range(1, 5)],
    ("agatston", "cont", (361.3, 551.4), "segment_readings", None),
    ("lv_ejection_fraction", "cont", (60.0, 8.0), "imaging", None),
    ("decoy_1", "cont", (0.0, 1.0), "decoy", None),
    ("decoy_2", "cont", (10.0, 3.0), "decoy", None),
    ("decoy_3", "cat", 3, "decoy", (0.4, 0.35, 0.25)),
    ("decoy_4", "cat", 2, "decoy", (0.5,)),
]
SPARSE_FEATURES = ("lv_ejection_fraction",)


def synthetic_schema():
    return FeatureSchema(
        categorical={n: k for n, kind, k, _, _ in _FEATURES if kind == "cat"},
        continuous=[n for n, kind, *_ in _FEATURES if kind == "cont"],
        groups={n: g for n, _, _, g, _ in _FEATURES},
    )


def _level_cuts(probs):
    """Normal-quantile cut points giving level frequencies ``probs`` (lowest first)."""
    if len(probs) == 1:  # binary: prevalence of level 1
        return np.array([ndtri(1.0 - probs[0])])
    return ndtri(np.cumsum(probs)[:-1])


@dataclass
class GroundTruth:
    """Per-row latents and labels, plus the Bayes-optimal AUC of each task."""

    row_ids: np.ndarray
    latents: np.ndarray
    risk: np.ndarray
    downstream: np.ndarray
    risk_clean: np.ndarray
    downstream_clean: np.ndarray
    downstream_score: np.ndarray
    bayes_auc: dict
    config: dict

    def write(self, stem):
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        k = self.latents.shape[1]
        lines = [",".join([ROW_ID, *[f"z{i}" for i in range(k)], RISK, DOWNSTREAM])]
        for i in range(self.row_ids.shape[0]):
            lines.append(",".join([str(int(self.row_ids[i])),
                                   *[repr(float(v)) for v in self.latents[i]],
                                   TARGET_CLASSES[RISK][self.risk[i]],
                                   TARGET_CLASSES[DOWNSTREAM][self.downstream[i]]]))
        Path(f"{stem}.truth.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta = {"bayes_auc": self.bayes_auc, "config": self.config}
        Path(f"{stem}.truth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


def _two_level_auc(noise, prior):
    """AUC of the Bayes score when the clean label is a deterministic function
    of the latents and a fraction ``noise`` of labels is redrawn from the prior."""
    a = (1.0 - noise) + noise * prior   # P(clean positive | observed positive)
    b = noise * prior                   # P(clean positive | observed negative)
    return a * (1.0 - b) + 0.5 * (a * b + (1.0 - a) * (1.0 - b))


def _downstream_bayes_auc(cfg, threshold):
    rho, eta, p = cfg.rho, cfg.downstream_label_noise, cfg.invasive_prior
    if cfg.layout == "separate" or rho == 1.0:
        return _two_level_auc(eta, p)
    z = np.linspace(-10.0, 10.0, 400001)
    dens = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    clean = ndtr((rho * z - threshold) / (1.0 - rho))
    post = (1.0 - eta) * clean + eta * p
    f1 = dens * post
    f0 = dens * (1.0 - post)
    f1 /= trapezoid(f1, z)
    f0 /= trapezoid(f0, z)
    cdf0 = np.concatenate([[0.0], np.cumsum(0.5 * (f0[1:] + f0[:-1]) * np.diff(z))])
    return float(trapezoid(f1 * cdf0, z))


def generate_synthetic_cohort(cfg, seed):
    """Draw a cohort and its ground truth; pure in ``(cfg, seed)``.

    Latent factor ``z0`` is the disease burden: the risk label is an ordinal
    cut of it matching the class priors, and the downstream score is
    ``rho * z0 + (1 - rho) * other``. Segment readings load heavily on ``z0``,
    the other clinical groups weakly, the decoy group not at all.
    """
    rng = derive_rng(seed, "synthetic")
    n, k = cfg.n_rows, cfg.n_factors
    z = rng.standard_normal((n, k))
    schema = synthetic_schema()

    values = np.empty((n, len(_FEATURES)))
    nuisance_w = rng.normal(0.0, cfg.nuisance_loading, size=(len(_FEATURES), k - 1))
    noise = rng.standard_normal((n, len(_FEATURES)))
    for j, (name, kind, spec, group, cuts) in enumerate(_FEATURES):
        if group == "decoy":
            score, sd = noise[:, j], 1.0
        else:
            lead = cfg.segment_loading if group == "segment_readings" else cfg.other_loading
            w = nuisance_w[j] * (0.5 if group == "segment_readings" else 1.0)
            score = lead * z[:, 0] + z[:, 1:] @ w + cfg.feature_noise * noise[:, j]
            sd = math.sqrt(lead ** 2 + float(w @ w) + cfg.feature_noise ** 2)
        std_score = score / sd
        if kind == "cont":
            mean, scale = spec
            if name == "agatston":
                values[:, j] = mean * np.exp(0.9 * std_score) / math.exp(0.405)
            else:
                values[:, j] = mean + scale * std_score
        else:
            values[:, j] = np.searchsorted(_level_cuts(cuts), std_score, side="right")

    cuts = ndtri(np.cumsum(cfg.risk_priors)[:-1])
    risk_clean = np.searchsorted(cuts, z[:, 0], side="right")
    other = rng.standard_normal(n) if cfg.layout == "shared" else z[:, 1]
    d_score = cfg.rho * z[:, 0] + (1.0 - cfg.rho) * other
    d_sd = math.hypot(cfg.rho, 1.0 - cfg.rho)
    threshold = float(ndtri(1.0 - cfg.invasive_prior) * d_sd)
    downstream_clean = (d_score > threshold).astype(np.int64)

    def relabel(clean, eta, priors):
        flip = rng.random(n) < eta
        redraw = rng.choice(len(priors), size=n, p=priors)
        return np.where(flip, redraw, clean)

    risk = relabel(risk_clean, cfg.risk_label_noise, cfg.risk_priors)
    downstream = relabel(downstream_clean, cfg.downstream_label_noise,
                         (1.0 - cfg.invasive_prior, cfg.invasive_prior))

    missing = rng.random(values.shape) < cfg.missing_rate
    for j, (name, *_rest) in enumerate(_FEATURES):
        if name in SPARSE_FEATURES:
            missing[:, j] = rng.random(n) < cfg.sparse_missing_rate
    for j in range(values.shape[1]):  # keep at least one observed value per column
        if missing[:, j].all():
            missing[0, j] = False
    values[missing] = np.nan

    order = [schema.names.index(f[0]) for f in _FEATURES]
    table_values = np.empty_like(values)
    table_values[:, order] = values
    table_missing = np.empty_like(missing)
    table_missing[:, order] = missing
    table = CohortTable(schema, table_values, table_missing,
                        {RISK: risk, DOWNSTREAM: downstream})

    bayes = {
        RISK: {c: _two_level_auc(cfg.risk_label_noise, p)
               for c, p in zip(TARGET_CLASSES[RISK], cfg.risk_priors)},
        DOWNSTREAM: _downstream_bayes_auc(cfg, threshold),
    }
    truth = GroundTruth(table.row_ids.copy(), z, risk, downstream, risk_clean,
                        downstream_clean, d_score, bayes, cfg.to_dict())
    return table, truth
