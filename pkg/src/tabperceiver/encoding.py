"""Feature schema and the categorical / piecewise-linear embeddings."""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import SchemaError, ValidationError
from .layers import Module, uniform

UNKNOWN = -1
DEFAULT_BINS = 150


@dataclass
class FeatureSchema:
    """Declared columns of a cohort table.

    ``categorical`` maps name to cardinality (codes are ``0..k-1``);
    ``continuous`` lists numeric columns. ``groups`` assigns each feature a
    modality name used by the ablation study.
    """

    categorical: dict = field(default_factory=dict)
    continuous: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)
    missing_policy: dict = field(default_factory=dict)

    def __post_init__(self):
        self.categorical = {str(k): int(v) for k, v in dict(self.categorical).items()}
        self.continuous = [str(c) for c in self.continuous]
        names = list(self.categorical) + self.continuous
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate feature names: {dupes}")
        if not names:
            raise SchemaError("schema declares no features")
        for name, k in self.categorical.items():
            if k < 1:
                raise SchemaError(f"categorical feature {name!r} has cardinality {k}")
        unknown = set(self.groups) - set(names)
        if unknown:
            raise SchemaError(f"groups mention undeclared features: {sorted(unknown)}")
        for name, policy in self.missing_policy.items():
            if policy not in ("impute", "drop"):
                raise SchemaError(f"unknown missingness policy {policy!r} for {name!r}")

    @property
    def names(self):
        return list(self.categorical) + list(self.continuous)

    @property
    def n_categorical(self):
        return len(self.categorical)

    @property
    def n_continuous(self):
        return len(self.continuous)

    def is_categorical(self, name):
        return name in self.categorical

    def group_of(self, name):
        return self.groups.get(name, "ungrouped")

    def group_names(self):
        seen = []
        for name in self.names:
            g = self.group_of(name)
            if g not in seen:
                seen.append(g)
        return seen

    def features_in_group(self, group):
        return [n for n in self.names if self.group_of(n) == group]

    def select(self, keep):
        keep = set(keep)
        return FeatureSchema(
            categorical={k: v for k, v in self.categorical.items() if k in keep},
            continuous=[c for c in self.continuous if c in keep],
            groups={k: v for k, v in self.groups.items() if k in keep},
            missing_policy={k: v for k, v in self.missing_policy.items() if k in keep},
        )

    def drop(self, names):
        names = set(names)
        return self.select([n for n in self.names if n not in names])

    def to_dict(self):
        # categorical as ordered pairs: column order must survive key-sorted JSON
        return {
            "categorical": [[n, k] for n, k in self.categorical.items()],
            "continuous": list(self.continuous),
            "groups": dict(self.groups),
            "missing_policy": dict(self.missing_policy),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            categorical=dict(d.get("categorical") or {}),
            continuous=d.get("continuous", []) or [],
            groups=d.get("groups", {}) or {},
            missing_policy=d.get("missing_policy", {}) or {},
        )


@dataclass
class BinSpec:
    """Quantile bin boundaries ``b_0 < ... < b_T`` plus optional trainable
    per-bin weights (T x D) and bias (D)."""

    boundaries: np.ndarray
    weights: Tensor = None
    bias: Tensor = None

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
        b = self.boundaries
        if b.ndim != 1 or b.shape[0] < 2:
            raise ValidationError("a bin spec needs at least two boundaries")
        if not np.all(np.diff(b) > 0):
            raise ValidationError("bin boundaries must be strictly ascending")

    @property
    def n_bins(self):
        return self.boundaries.shape[0] - 1


def fit_bins(values, n_bins=DEFAULT_BINS):
    """Quantile boundaries at levels ``t / n_bins`` with zero-width bins merged.

    Quantiles use linear interpolation between order statistics. The bin
    count is capped at (number of distinct values - 1).
    """
    x = np.asarray(values, dtype=np.float64)
    x = x[np.isfinite(x)]
    distinct = np.unique(x)
    if distinct.shape[0] < 2:
        raise SchemaError(
            "cannot bin a feature with fewer than two distinct values; "
            "declare it categorical or drop it")
    if n_bins < 1:
        raise ValidationError(f"bin count must be >= 1, got {n_bins}")
    n_bins = min(int(n_bins), distinct.shape[0] - 1)
    levels = np.arange(n_bins + 1) / n_bins
    b = np.quantile(x, levels, method="linear")
    return BinSpec(np.unique(b))


def ple_encode(x, spec):
    """Piecewise-linear encoding of a single value.

    Components of bins entirely below ``x`` are 1, above ``x`` are 0, and the
    bin containing ``x`` gets its fractional position. The first and last
    components extrapolate linearly outside ``[b_0, b_T]``.
    """
    if not np.isfinite(x):
        raise ValidationError(f"cannot encode non-finite value {x!r}")
    return kernels.ple_encode_batch(np.array([float(x)]), spec.boundaries)[0]


def ple_encode_batch(values, spec):
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValidationError("cannot encode non-finite values")
    return kernels.ple_encode_batch(values, spec.boundaries)


def ple_embed(e, spec):
    """``v_0 + sum_t e_t v_t`` for one encoded value."""
    e = e if isinstance(e, Tensor) else Tensor(e)
    if e.shape[-1] != spec.n_bins:
        raise ValidationError(f"encoding has length {e.shape[-1]}, spec has {spec.n_bins} bins")
    return ad.add(ad.matmul(ad.reshape(e, (1, spec.n_bins)), spec.weights)[0], spec.bias)


class CategoricalEmbedding(Module):
    """One ``(cardinality + 1) x D`` table per categorical feature; the last
    row of each table is the unknown-category row.

    Tables are stored stacked in one parameter with per-feature row offsets.
    """

    def __init__(self, cardinalities, dim, rng):
        self.cardinalities = [int(c) for c in cardinalities]
        self.dim = dim
        sizes = np.array([c + 1 for c in self.cardinalities], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.table = uniform(rng, (int(sizes.sum()), dim), 1.0 / np.sqrt(dim))

    def row_indices(self, codes):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != len(self.cardinalities):
            raise ValidationError(
                f"expected codes of shape (batch, {len(self.cardinalities)}), got {codes.shape}")
        card = np.asarray(self.cardinalities, dtype=np.int64)
        bad = (codes != UNKNOWN) & ((codes < 0) | (codes >= card))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValidationError(
                f"category code {codes[r, c]} out of range for feature {c} "
                f"with cardinality {card[c]}")
        local = np.where(codes == UNKNOWN, card, codes)
        return local + self.offsets

    def __call__(self, codes):
        """(batch, M) codes -> (batch, M, D) embeddings; no positional term."""
        return ad.embedding(self.table, self.row_indices(codes))

    def feature_table(self, i):
        start = self.offsets[i]
        return self.table.data[start:start + self.cardinalities[i] + 1]


class ContinuousEmbedding(Module):
    """Piecewise-linear embeddings for C continuous features.

    Per feature: its :class:`BinSpec` weights (T_j x D) and bias (D). Bin counts
    differ between features, so encodings are zero-padded to the largest T.
    """

    def __init__(self, bin_specs, dim, rng):
        self.specs = list(bin_specs)
        self.dim = dim
        self.max_bins = max(s.n_bins for s in self.specs)
        c = len(self.specs)
        bound = 1.0 / np.sqrt(dim)
        w = rng.uniform(-bound, bound, size=(c, self.max_bins, dim))
        for j, s in enumerate(self.specs):
            w[j, s.n_bins:] = 0.0
        self.weights = Tensor(w, requires_grad=True)
        self.bias = uniform(rng, (c, dim), bound)

    def bin_spec(self, j):
        """Feature ``j``'s spec carrying a copy of its current weights."""
        s = self.specs[j]
        return BinSpec(s.boundaries, Tensor(self.weights.data[j, :s.n_bins]),
                       Tensor(self.bias.data[j]))

    def encode(self, values):
        """(batch, C) raw values -> (batch, C, T_max) encodings."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(self.specs):
            raise ValidationError(
                f"expected values of shape (batch, {len(self.specs)}), got {values.shape}")
        out = np.zeros((values.shape[0], len(self.specs), self.max_bins))
        for j, s in enumerate(self.specs):
            out[:, j, :s.n_bins] = ple_encode_batch(values[:, j], s)
        return out

    def __call__(self, values):
        enc = self.encode(values)
        per_feature = ad.matmul(Tensor(np.ascontiguousarray(enc.transpose(1, 0, 2))), self.weights)
        return ad.add(ad.swapaxes(per_feature, 0, 1), self.bias)
