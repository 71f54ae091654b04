"""Per-modality filtering, imputation, normalization and training-set
balancing.

Everything here is fit on training rows only and then applied to held-out
rows, so repeated use inside cross-validation folds cannot leak test
statistics. Operations are pure functions of (inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ModalityTable

STANDARDIZE = "standardize"
CPM_LOG = "cpm_log"


class PreprocessError(Exception):
    """Invalid preprocessing input or configuration."""


@dataclass(frozen=True)
class PreprocessConfig:
    max_missing_fraction: float = 0.5
    max_zero_fraction: float = 0.9
    correlation_threshold: float = 0.9
    variance_cap: int = 500
    dimensionality_ratio_trigger: float = 10.0
    knn_k: int = 5
    smote_k: int = 5
    smote_enabled: bool = True
    normalization: dict = field(default_factory=dict)  # modality name -> kind
    default_normalization: str = STANDARDIZE

    def __post_init__(self) -> None:
        for name in ("max_missing_fraction", "max_zero_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PreprocessError(f"{name} must be in [0,1]")
        if not 0.0 < self.correlation_threshold <= 1.0:
            raise PreprocessError("correlation_threshold must be in (0,1]")
        if self.variance_cap < 1 or self.knn_k < 1 or self.smote_k < 1:
            raise PreprocessError("counts must be >= 1")
        kinds = set(self.normalization.values()) | {self.default_normalization}
        unknown = kinds - {STANDARDIZE, CPM_LOG}
        if unknown:
            raise PreprocessError(f"unknown normalization kind(s): {sorted(unknown)}")

    def normalization_for(self, modality_name: str) -> str:
        return self.normalization.get(modality_name, self.default_normalization)


# ---------------------------------------------------------------------------
# column filters (fit on training data; they only choose columns)
# ---------------------------------------------------------------------------


def filter_sparse(table: ModalityTable, cfg: PreprocessConfig) -> ModalityTable:
    """Drop features with too many missing cells or too many observed zeros.

    A feature is dropped when its missing fraction exceeds max_missing_fraction
    or when the zero fraction among its observed cells exceeds
    max_zero_fraction (both strictly greater-than).
    """
    values = table.values
    n = len(values)
    missing = np.isnan(values)
    missing_frac = missing.mean(axis=0)
    observed = n - missing.sum(axis=0)
    zeros = ((values == 0) & ~missing).sum(axis=0)
    with np.errstate(invalid="ignore"):
        zero_frac = np.where(observed > 0, zeros / np.maximum(observed, 1), 1.0)
    keep = (missing_frac <= cfg.max_missing_fraction) & (zero_frac <= cfg.max_zero_fraction)
    if not keep.any():
        raise PreprocessError(
            f"empty modality after sparsity filter: {table.modality_name!r}"
        )
    return table.take_columns(np.flatnonzero(keep))


def _pairwise_complete_correlation(values: np.ndarray) -> np.ndarray:
    """Pearson correlation matrix over pairwise-complete observations.

    Pairs with fewer than 3 shared observations or zero variance get r = 0.
    """
    mask = (~np.isnan(values)).astype(np.float64)
    x = np.where(np.isnan(values), 0.0, values)
    n = mask.T @ mask
    sx = x.T @ mask
    sxx = (x * x).T @ mask
    sxy = x.T @ x
    with np.errstate(divide="ignore", invalid="ignore"):
        cov = sxy - sx * sx.T / n
        var_i = sxx - sx * sx / n
        var_j = var_i.T
        r = cov / np.sqrt(var_i * var_j)
    r[~np.isfinite(r)] = 0.0
    r[n < 3] = 0.0
    np.clip(r, -1.0, 1.0, out=r)
    return r


def prune_correlated(table: ModalityTable, cfg: PreprocessConfig) -> ModalityTable:
    """Greedy pass in column order: drop the later column of each highly
    correlated pair (|pairwise-complete Pearson r| > threshold)."""
    f = table.n_features
    if f < 2:
        return table
    r = np.abs(_pairwise_complete_correlation(table.values))
    high = r > cfg.correlation_threshold
    keep = np.ones(f, dtype=bool)
    for j in range(1, f):
        if high[j, :j][keep[:j]].any():
            keep[j] = False
    return table.take_columns(np.flatnonzero(keep))


def variance_topk(table: ModalityTable, n_samples: int, cfg: PreprocessConfig) -> ModalityTable:
    """Keep the variance_cap highest-variance features, but only when the
    feature-to-sample ratio exceeds the trigger. Ties keep earlier columns."""
    f = table.n_features
    if n_samples <= 0 or f / n_samples <= cfg.dimensionality_ratio_trigger:
        return table
    if f <= cfg.variance_cap:
        return table
    values = table.values
    observed = (~np.isnan(values)).sum(axis=0)
    with np.errstate(invalid="ignore"):
        var = np.nanvar(values, axis=0)
    var = np.where(observed >= 2, var, 0.0)
    order = np.argsort(-var, kind="stable")[: cfg.variance_cap]
    return table.take_columns(np.sort(order))


# ---------------------------------------------------------------------------
# kNN imputation
# ---------------------------------------------------------------------------


def _train_scale(train_values: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.nanvar(train_values, axis=0))
    sd[~np.isfinite(sd)] = 0.0
    return np.where(sd > 0, sd, 1.0)


def impute_knn(
    train: ModalityTable,
    apply_to: ModalityTable,
    cfg: PreprocessConfig,
) -> ModalityTable:
    """Fill missing cells from the k nearest training rows.

    Distance is Euclidean over mutually observed features, each feature
    scaled by its training standard deviation. A cell's donors are the nearest
    training rows where that feature is observed; with no usable donor the
    training feature mean is used.
    """
    if train.feature_names != apply_to.feature_names:
        raise PreprocessError("train/apply feature mismatch")
    if train.n_samples < cfg.knn_k + 1:
        raise PreprocessError(f"kNN imputation needs >= {cfg.knn_k + 1} training samples")
    tv = train.values
    train_observed = ~np.isnan(tv)
    if not train_observed.any(axis=0).all():
        bad = [train.feature_names[j] for j in np.flatnonzero(~train_observed.any(axis=0))]
        raise PreprocessError(f"feature(s) missing in every training row: {bad}")

    out = apply_to.values.copy()
    rows_with_missing = np.flatnonzero(np.isnan(out).any(axis=1))
    if len(rows_with_missing) == 0:
        return ModalityTable(
            apply_to.modality_name, list(apply_to.sample_ids), list(apply_to.feature_names), out
        )

    scale = _train_scale(tv)
    t_scaled = np.where(train_observed, tv / scale, 0.0)
    train_mean = np.nanmean(tv, axis=0)

    for i in rows_with_missing:
        row = out[i]
        row_observed = ~np.isnan(row)
        r_scaled = np.where(row_observed, row / scale, 0.0)
        shared = train_observed & row_observed
        n_shared = shared.sum(axis=1)
        diff = (t_scaled - r_scaled) * shared
        dist = np.sqrt((diff * diff).sum(axis=1))
        dist[n_shared == 0] = np.inf
        order = np.argsort(dist, kind="stable")
        for j in np.flatnonzero(~row_observed):
            donors = order[train_observed[order, j] & np.isfinite(dist[order])]
            if len(donors) == 0:
                out[i, j] = train_mean[j]
            else:
                picked = donors[: cfg.knn_k]
                out[i, j] = tv[picked, j].mean()
    return ModalityTable(
        apply_to.modality_name, list(apply_to.sample_ids), list(apply_to.feature_names), out
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize(train: ModalityTable, apply_to: ModalityTable, kind: str) -> ModalityTable:
    """Standardize with training statistics, or row-wise counts-per-million
    followed by log2(x+1). Standard deviation zero maps the column to zero."""
    values = apply_to.values
    if kind == STANDARDIZE:
        mean = np.nanmean(train.values, axis=0)
        sd = np.sqrt(np.nanvar(train.values, axis=0))
        out = np.where(sd > 0, (values - mean) / np.where(sd > 0, sd, 1.0), 0.0)
    elif kind == CPM_LOG:
        if np.nanmin(values) < 0 or np.nanmin(train.values) < 0:
            raise PreprocessError("cpm_log requires nonnegative values")
        row_sum = np.nansum(values, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log2(1e6 * values / row_sum + 1.0)
        out = np.where(row_sum > 0, out, 0.0)
    else:
        raise PreprocessError(f"unknown normalization kind {kind!r}")
    return ModalityTable(
        apply_to.modality_name, list(apply_to.sample_ids), list(apply_to.feature_names), out
    )


# ---------------------------------------------------------------------------
# fitted per-modality pipeline
# ---------------------------------------------------------------------------


@dataclass
class FittedPreprocessor:
    """Column choice + imputation donors + normalization statistics for one
    modality, all fit on a training split."""

    modality_name: str
    kept_feature_names: list[str]
    kept_indices: np.ndarray
    normalization_kind: str
    train_filtered: ModalityTable  # training rows restricted to kept columns
    cfg: PreprocessConfig
    train_imputed: ModalityTable = field(init=False)

    def __post_init__(self) -> None:
        self.train_imputed = impute_knn(self.train_filtered, self.train_filtered, self.cfg)

    def transform(self, table: ModalityTable) -> ModalityTable:
        if table.feature_names == self.kept_feature_names:
            selected = table
        else:
            name_to_idx = {n: i for i, n in enumerate(table.feature_names)}
            try:
                idx = [name_to_idx[n] for n in self.kept_feature_names]
            except KeyError as e:
                raise PreprocessError(f"table lacks fitted feature {e.args[0]!r}") from None
            selected = table.take_columns(idx)
        imputed = impute_knn(self.train_filtered, selected, self.cfg)
        return normalize(self.train_imputed, imputed, self.normalization_kind)


def fit_preprocessor(
    train: ModalityTable,
    cfg: PreprocessConfig,
) -> FittedPreprocessor:
    """Run the column filters on the training rows and freeze the statistics
    needed to transform any aligned table: sparsity filter, correlation
    pruning, variance cap, then imputation donors and normalization."""
    filtered = filter_sparse(train, cfg)
    filtered = prune_correlated(filtered, cfg)
    filtered = variance_topk(filtered, train.n_samples, cfg)
    name_to_idx = {n: i for i, n in enumerate(train.feature_names)}
    kept = np.array([name_to_idx[n] for n in filtered.feature_names], dtype=np.intp)
    return FittedPreprocessor(
        modality_name=train.modality_name,
        kept_feature_names=list(filtered.feature_names),
        kept_indices=kept,
        normalization_kind=cfg.normalization_for(train.modality_name),
        train_filtered=filtered,
        cfg=cfg,
    )


# ---------------------------------------------------------------------------
# SMOTE balancing
# ---------------------------------------------------------------------------


def _smote_plan(
    y: np.ndarray,
    reference: np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> list[tuple[int, int, float, int]]:
    """Choose (base row, neighbor row, interpolation coefficient, class) for
    every synthetic sample, one minority class at a time against the majority.

    Neighbors are same-class nearest rows in the reference feature space.
    """
    classes, counts = np.unique(y, return_counts=True)
    majority = int(counts.max())
    plan: list[tuple[int, int, float, int]] = []
    for cls in classes:
        members = np.flatnonzero(y == cls)
        deficit = majority - len(members)
        if deficit == 0:
            continue
        if len(members) < 2:
            raise PreprocessError("SMOTE requires >=2 samples per class")
        pts = reference[members]
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        kk = min(k, len(members) - 1)
        neighbor_lists = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        for _ in range(deficit):
            b = int(rng.integers(len(members)))
            nb = int(neighbor_lists[b, int(rng.integers(kk))])
            u = float(rng.uniform())
            plan.append((int(members[b]), int(members[nb]), u, int(cls)))
    return plan


def smote_balance(
    X: np.ndarray,
    y: np.ndarray,
    k: int = 5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Oversample each minority class up to the majority count.

    Synthetic rows are x + u * (x_nn - x) with u uniform in [0,1] and x_nn one
    of x's k same-class nearest neighbors. Original rows come first.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if np.isnan(X).any():
        raise PreprocessError("SMOTE requires imputed (non-missing) data")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(202,)))
    plan = _smote_plan(y, X, k, rng)
    if not plan:
        return X.copy(), y.copy()
    synth = np.empty((len(plan), X.shape[1]), dtype=np.float64)
    labels = np.empty(len(plan), dtype=np.intp)
    for i, (b, nb, u, cls) in enumerate(plan):
        synth[i] = X[b] + u * (X[nb] - X[b])
        labels[i] = cls
    return np.vstack([X, synth]), np.concatenate([y, labels])


def smote_balance_tables(
    tables: Sequence[ModalityTable],
    y: np.ndarray,
    k: int = 5,
    seed: int = 0,
) -> tuple[list[ModalityTable], np.ndarray]:
    """Balance aligned modality tables with one shared interpolation plan.

    Neighbor structure is computed on the column-wise concatenation so each
    synthetic sample is the same convex combination in every modality, keeping
    the tables aligned for downstream shared-weight boosting.
    """
    y = np.asarray(y, dtype=np.intp)
    concat = np.hstack([t.values for t in tables])
    if np.isnan(concat).any():
        raise PreprocessError("SMOTE requires imputed (non-missing) data")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(202,)))
    plan = _smote_plan(y, concat, k, rng)
    if not plan:
        return [t for t in tables], y.copy()
    synth_ids = [f"synthetic_{i}" for i in range(len(plan))]
    out_tables = []
    for t in tables:
        synth = np.empty((len(plan), t.n_features), dtype=np.float64)
        for i, (b, nb, u, _) in enumerate(plan):
            synth[i] = t.values[b] + u * (t.values[nb] - t.values[b])
        out_tables.append(
            ModalityTable(
                t.modality_name,
                list(t.sample_ids) + synth_ids,
                list(t.feature_names),
                np.vstack([t.values, synth]),
            )
        )
    labels = np.concatenate([y, np.array([cls for *_, cls in plan], dtype=np.intp)])
    return out_tables, labels
