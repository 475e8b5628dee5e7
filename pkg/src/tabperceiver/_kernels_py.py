"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels`` must agree with them exactly
(same tie handling, same branch order).
"""
import numpy as np

BACKEND = "python"


def scatter_add_rows(out, idx, src):
    """Accumulate ``src[i]`` into ``out[idx[i]]`` in place."""
    np.add.at(out, idx, src)


def ple_encode_batch(x, boundaries):
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(boundaries, dtype=np.float64)
    n_bins = b.shape[0] - 1
    lo = b[:-1]
    hi = b[1:]
    frac = (x[:, None] - lo) / (hi - lo)
    out = frac.copy()
    t = np.arange(n_bins)
    below = (x[:, None] < lo) & (t > 0)
    above = (x[:, None] >= hi) & (t < n_bins - 1)
    out[above] = 1.0
    out[below] = 0.0
    return out


def _pair_count2(pos, neg):
    """Twice the Mann-Whitney U of ``pos`` over ``neg`` (ties count one)."""
    neg_sorted = np.sort(neg)
    less = np.searchsorted(neg_sorted, pos, side="left")
    less_eq = np.searchsorted(neg_sorted, pos, side="right")
    return int(2 * less.sum() + (less_eq - less).sum())


def auc_mann_whitney(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    n_pos, n_neg = pos.shape[0], neg.shape[0]
    return _pair_count2(pos, neg) / (2 * n_pos * n_neg)


def bootstrap_aucs(pos, neg, pos_idx, neg_idx):
    """AUC for each resample given per-row index draws into ``pos``/``neg``."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    n_res = pos_idx.shape[0]
    denom = 2 * pos_idx.shape[1] * neg_idx.shape[1]
    out = np.empty(n_res)
    for r in range(n_res):
        out[r] = _pair_count2(pos[pos_idx[r]], neg[neg_idx[r]]) / denom
    return out
