"""Late-integration strategies over aligned per-modality tables.

Nine strategies share one surface: fit on preprocessed training tables plus
labels, predict a PredictionSet on aligned test tables, and expose raw
per-(modality, feature) importance scores for downstream signature selection.
The incremental modality-subset selector lives here too.

Method kinds (config vocabulary):

    CONCAT     single model on column-wise concatenation
    ENS-H      per-modality models, hard (majority) vote
    ENS-S      per-modality models, soft (mean-probability) vote
    ML         per-modality models, random-forest meta learner on their outputs
    ADA-H/S/M  multi-modal boosting; per-round aggregation by hard vote,
               soft vote, or a per-round meta learner
    PBMV       boosting with learned per-classifier and per-view weights
    MOE-COMBN  one-vs-rest expert ensembles combined by a gating rule
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import ModalityTable, MultiModalDataset, make_fold_plan
from .learners import (
    GbmModel,
    GbmParams,
    PredictionSet,
    RandomForestParams,
    fit_gbm,
    fit_random_forest,
)
from .preprocess import PreprocessConfig, fit_preprocessor, smote_balance_tables

INTEGRATOR_KINDS = (
    "CONCAT",
    "ENS-H",
    "ENS-S",
    "ML",
    "ADA-H",
    "ADA-S",
    "ADA-M",
    "PBMV",
    "MOE-COMBN",
)

UNKNOWN = -1  # gate abstention label

_ALPHA_CAP = math.log(1e10)  # round weight when the weighted error hits zero


class IntegrationError(Exception):
    pass


@dataclass(frozen=True)
class IntegratorSpec:
    """Configuration of one integration method."""

    kind: str
    name: Optional[str] = None  # report label; defaults to kind (+ modality subset)
    modalities: Optional[tuple[str, ...]] = None  # None = all modalities
    base: GbmParams = GbmParams()
    boosting_rounds: int = 20
    soft_confidence_ratio: float = 2.0
    inner_folds: int = 5  # out-of-fold meta features for ML
    ada_inner_folds: int = 3  # per-round meta features for ADA-M
    meta_forest: RandomForestParams = RandomForestParams()
    expert_smote: bool = True  # MOE: balance each one-vs-rest problem
    smote_k: int = 5

    def __post_init__(self) -> None:
        if self.kind not in INTEGRATOR_KINDS:
            raise IntegrationError(f"unknown integrator kind {self.kind!r}")
        if self.boosting_rounds < 1:
            raise IntegrationError("boosting_rounds must be >= 1")
        if self.soft_confidence_ratio <= 1.0:
            raise IntegrationError("soft_confidence_ratio must exceed 1")
        if self.modalities is not None and len(self.modalities) == 0:
            raise IntegrationError("empty modality subset")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.modalities is not None:
            return f"{self.kind}[{'+'.join(self.modalities)}]"
        return self.kind


def _select_tables(
    tables: Sequence[ModalityTable], names: Sequence[str]
) -> list[ModalityTable]:
    by_name = {t.modality_name: t for t in tables}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise IntegrationError(f"missing modalities at predict time: {missing}")
    return [by_name[n] for n in names]


def _uniform_weights(n: int) -> np.ndarray:
    return np.ones(n, dtype=np.float64)


# ---------------------------------------------------------------------------
# voting rules
# ---------------------------------------------------------------------------


def vote_hard(per_modality: Sequence[PredictionSet]) -> PredictionSet:
    """Majority vote over per-modality predicted labels.

    Ties go to the vote of the earliest modality (configuration order) among
    the tied classes. Output probabilities are vote fractions.
    """
    if not per_modality:
        raise IntegrationError("empty prediction list")
    n = per_modality[0].n_samples
    n_classes = per_modality[0].n_classes
    for p in per_modality:
        if p.n_samples != n or p.n_classes != n_classes:
            raise IntegrationError("prediction sets disagree on shape")
    votes = np.stack([p.labels for p in per_modality], axis=1)  # (n, M)
    counts = np.zeros((n, n_classes), dtype=np.float64)
    rows = np.repeat(np.arange(n), votes.shape[1])
    np.add.at(counts, (rows, votes.ravel()), 1.0)

    max_count = counts.max(axis=1)
    labels = np.argmax(counts, axis=1)
    tied = (counts == max_count[:, None]).sum(axis=1) > 1
    for i in np.flatnonzero(tied):
        for vote in votes[i]:
            if counts[i, vote] == max_count[i]:
                labels[i] = vote
                break
    return PredictionSet(labels=labels, probabilities=counts / votes.shape[1])


def vote_soft(per_modality: Sequence[PredictionSet]) -> PredictionSet:
    """Arithmetic mean of per-modality probability rows, argmax prediction."""
    if not per_modality:
        raise IntegrationError("empty prediction list")
    n = per_modality[0].n_samples
    n_classes = per_modality[0].n_classes
    for p in per_modality:
        if p.n_samples != n or p.n_classes != n_classes:
            raise IntegrationError("prediction sets disagree on shape")
        row_sums = p.probabilities.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-6:
            raise IntegrationError("probability row not summing to 1")
    mean = np.mean([p.probabilities for p in per_modality], axis=0)
    return PredictionSet.from_probabilities(mean)


def adaboost_high_confidence(
    per_modality: Sequence[PredictionSet],
    truth: np.ndarray,
    aggregator_kind: str,
    soft_confidence_ratio: float = 2.0,
    aggregated: Optional[PredictionSet] = None,
) -> np.ndarray:
    """Per-sample correctness under the high-confidence boosting rule.

    hard/meta: a sample is confidently classified when at least half of the
    modalities (ceil(M/2)) agree on one class. soft: when the top aggregated
    probability is at least soft_confidence_ratio times the second. A sample
    counts as correct only if it is confident AND the aggregated prediction
    matches the truth; everything else is treated as misclassified.
    """
    truth = np.asarray(truth, dtype=np.intp)
    if aggregator_kind not in ("hard", "soft", "meta"):
        raise IntegrationError(f"unknown aggregator {aggregator_kind!r}")
    if aggregated is None:
        if aggregator_kind == "hard":
            aggregated = vote_hard(per_modality)
        elif aggregator_kind == "soft":
            aggregated = vote_soft(per_modality)
        else:
            raise IntegrationError("meta aggregation requires the aggregated predictions")

    if aggregator_kind == "soft":
        top2 = np.sort(aggregated.probabilities, axis=1)[:, -2:]
        high_conf = top2[:, 1] >= soft_confidence_ratio * top2[:, 0]
    else:
        m = len(per_modality)
        votes = np.stack([p.labels for p in per_modality], axis=1)
        n_classes = per_modality[0].n_classes
        counts = np.zeros((len(truth), n_classes), dtype=np.intp)
        rows = np.repeat(np.arange(len(truth)), m)
        np.add.at(counts, (rows, votes.ravel()), 1)
        high_conf = counts.max(axis=1) >= math.ceil(m / 2)
    return high_conf & (aggregated.labels == truth)


# ---------------------------------------------------------------------------
# concatenation
# ---------------------------------------------------------------------------


class ConcatIntegrator:
    kind = "CONCAT"

    def __init__(self, spec, modality_names, provenance, model):
        self.spec = spec
        self.modality_names = modality_names
        self.provenance = provenance  # column -> (modality, feature)
        self.model = model
        self.n_classes = model.n_classes

    def predict(self, tables: Sequence[ModalityTable]) -> PredictionSet:
        used = _select_tables(tables, self.modality_names)
        return self.model.predict_proba(np.hstack([t.values for t in used]))

    def feature_scores(self) -> dict:
        imp = self.model.feature_importances_
        return {key: float(imp[i]) for i, key in enumerate(self.provenance)}

    def report_extras(self) -> dict:
        return {}


def fit_concat(
    tables: Sequence[ModalityTable],
    labels: np.ndarray,
    spec: IntegratorSpec,
    n_classes: int,
    seed: int = 0,
) -> ConcatIntegrator:
    """Single model over the column-wise concatenation of all modalities."""
    provenance = [(t.modality_name, f) for t in tables for f in t.feature_names]
    if len(set(provenance)) != len(provenance):
        raise IntegrationError("duplicate (modality, feature) pair in concatenation")
    X = np.hstack([t.values for t in tables])
    model = fit_gbm(
        X, labels, _uniform_weights(len(labels)), spec.base, seed=seed, n_classes=n_classes
    )
    return ConcatIntegrator(spec, [t.modality_name for t in tables], provenance, model)


# ---------------------------------------------------------------------------
# voting ensembles
# ---------------------------------------------------------------------------


class VoteIntegrator:
    def __init__(self, spec, kind, modality_names, models):
        self.spec = spec
        self.kind = kind
        self.modality_names = modality_names
        self.models = models  # one GbmModel per modality
        self.n_classes = models[0].n_classes

    def _per_modality(self, tables) -> list[PredictionSet]:
        used = _select_tables(tables, self.modality_names)
        return [m.predict_proba(t.values) for m, t in zip(self.models, used)]

    def predict(self, tables: Sequence[ModalityTable]) -> PredictionSet:
        parts = self._per_modality(tables)
        return vote_hard(parts) if self.kind == "ENS-H" else vote_soft(parts)

    def feature_scores(self) -> dict:
        scores = {}
        for name, model, table_features in zip(
            self.modality_names, self.models, self._feature_names
        ):
            for i, feat in enumerate(table_features):
                scores[(name, feat)] = float(model.feature_importances_[i])
        return scores

    def report_extras(self) -> dict:
        return {}


def fit_vote(
    tables: Sequence[ModalityTable],
    labels: np.ndarray,
    spec: IntegratorSpec,
    n_classes: int,
    seed: int = 0,
    kind: Optional[str] = None,
) -> VoteIntegrator:
    """One model per modality; predictions combined by hard or soft vote."""
    kind = kind or spec.kind
    w = _uniform_weights(len(labels))
    models = [
        fit_gbm(t.values, labels, w, spec.base, seed=seed + 17 * i, n_classes=n_classes)
        for i, t in enumerate(tables)
    ]
    out = VoteIntegrator(spec, kind, [t.modality_name for t in tables], models)
    out._feature_names = [list(t.feature_names) for t in tables]
    return out


# ---------------------------------------------------------------------------
# meta learner
# ---------------------------------------------------------------------------


def _oof_meta_features(
    tables: Sequence[ModalityTable],
    labels: np.ndarray,
    base: GbmParams,
    n_classes: int,
    inner_folds: int,
    seed: int,
    sample_weight: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Out-of-fold class probabilities per modality (K columns per modality).

    Keeps the meta model from learning base-model overfit: each row's meta
    features come from base models that never saw that row.
    """
    try:
        plan = make_fold_plan(labels, repeats=1, folds=inner_folds, seed=seed)
    except Exception as e:
        raise IntegrationError(f"inner fold infeasible: {e}") from None
    n = len(labels)
    meta = np.zeros((n, len(tables) * n_classes), dtype=np.float64)
    w = sample_weight if sample_weight is not None else _uniform_weights(n)
    for _, f in plan.cells():
        test_idx = plan.test_indices(0, f)
        train_idx = plan.train_indices(0, f, n)
        for m, table in enumerate(tables):
            model = fit_gbm(
                table.values[train_idx],
                labels[train_idx],
                w[train_idx],
                base,
                seed=seed + 31 * m + 7 * f,
                n_classes=n_classes,
            )
            probs = model.predict_proba(table.values[test_idx]).probabilities
            meta[test_idx, m * n_classes : (m + 1) * n_classes] = probs
    return meta


class MetaLearnerIntegrator:
    kind = "ML"

    def __init__(self, spec, modality_names, base_models, forest, n_classes, class_names=None):
        self.spec = spec
        self.modality_names = modality_names
        self.base_models = base_models
        self.forest = forest
        self.n_classes = n_classes
        self.meta_feature_keys = [
            (name, f"meta_proba_{k}") for name in modality_names for k in range(n_classes)
        ]

    def _meta_features(self, tables) -> np.ndarray:
        used = _select_tables(tables, self.modality_names)
        parts = [m.predict_proba(t.values).probabilities for m, t in zip(self.base_models, used)]
        return np.hstack(parts)

    def predict(self, tables: Sequence[ModalityTable]) -> PredictionSet:
        return self.forest.predict_proba(self._meta_features(tables))

    def feature_scores(self) -> dict:
        imp = self.forest.feature_importances_
        return {key: float(imp[i]) for i, key in enumerate(self.meta_feature_keys)}

    def modality_relevance(self) -> dict:
        imp = self.forest.feature_importances_
        out = {}
        for i, (name, _) in enumerate(self.meta_feature_keys):
            out[name] = out.get(name, 0.0) + float(imp[i])
        return out

    def report_extras(self) -> dict:
        return {"modality_relevance": self.modality_relevance()}


def fit_meta_learner(
    tables: Sequence[ModalityTable],
    labels: np.ndarray,
    spec: IntegratorSpec,
    n_classes: int,
    seed: int = 0,
) -> MetaLearnerIntegrator:
    """Random-forest meta model on out-of-fold base-model probabilities."""
    w = _uniform_weights(len(labels))
    base_models = [
        fit_gbm(t.values, labels, w, spec.base, seed=seed + 17 * i, n_classes=n_classes)
        for i, t in enumerate(tables)
    ]
    meta = _oof_meta_features(
        tables, labels, spec.base, n_classes, spec.inner_folds, seed=seed + 811
    )
    forest = fit_random_forest(meta, labels, spec.meta_forest, seed=seed + 977, n_classes=n_classes)
    return MetaLearnerIntegrator(
        spec, [t.modality_name for t in tables], base_models, forest, n_classes
    )


# ---------------------------------------------------------------------------
# multi-modal Adaboost (SAMME-style round weights)
# ---------------------------------------------------------------------------


@dataclass
class _AdaRound:
    models: list  # one GbmModel per modality
    alpha: float
    meta_forest: Optional[object] = None  # per-round aggregator for ADA-M


class AdaboostIntegrator:
    def __init__(self, spec, kind, modality_names, rounds, n_classes, soft_confidence_ratio):
        self.spec = spec
        self.kind = kind  # ADA-H | ADA-S | ADA-M
        self.aggregator = {"ADA-H": "hard", "ADA-S": "soft", "ADA-M": "meta"}[kind]
        self.modality_names = modality_names
        self.rounds = rounds
        self.n_classes = n_classes
        self.soft_confidence_ratio = soft_confidence_ratio

    def _round_aggregate(self, rnd: _AdaRound, tables) -> PredictionSet:
        parts = [m.predict_proba(t.values) for m, t in zip(rnd.models, tables)]
        if self.aggregator == "hard":
            return vote_hard(parts)
        if self.aggregator == "soft":
            return vote_soft(parts)
        meta = np.hstack([p.probabilities for p in parts])
        return rnd.meta_forest.predict_proba(meta)

    def predict(self, tables: Sequence[ModalityTable]) -> PredictionSet:
        used = _select_tables(tables, self.modality_names)
        n = used[0].n_samples
        scores = np.zeros((n, self.n_classes), dtype=np.float64)
        for rnd in self.rounds:
            agg = self._round_aggregate(rnd, used)
            if self.aggregator == "soft":
                scores += rnd.alpha * agg.probabilities
            else:
                scores[np.arange(n), agg.labels] += rnd.alpha
        total = scores.sum(axis=1, keepdims=True)
        probs = np.where(total > 0, scores / np.where(total > 0, total, 1.0), 1.0 / self.n_classes)
        return PredictionSet.from_probabilities(probs)

    def feature_scores(self) -> dict:
        from .feature_selection import aggregate_boosted_importance

        scores = {}
        for m, name in enumerate(self.modality_names):
            per_round = [
                (rnd.alpha, rnd.models[m].feature_importances_) for rnd in self.rounds
            ]
            if sum(wt for wt, _ in per_round) <= 0:
                agg = np.zeros_like(per_round[0][1])
            else:
                agg = aggregate_boosted_importance(per_round)
            for i, feat in enumerate(self._feature_names[m]):
                scores[(name, feat)] = float(agg[i])
        return scores

    def report_extras(self) -> dict:
        return {"round_weights": [rnd.alpha for rnd in self.rounds]}


def fit_adaboost_mm(
    tables: Sequence[ModalityTable],
    labels: np.ndarray,
    spec: IntegratorSpec,
    n_classes: int,
    seed: int = 0,
    kind: Optional[str] = None,
) -> AdaboostIntegrator:
    """Boost per-modality models under one shared sample-weight vector.

    Each round fits one model per modality on the weighted data, aggregates
    them (hard/soft/meta), and scores samples with the high-confidence rule;
    the weighted error drives the multiclass round weight
    alpha = ln((1-e)/e) + ln(K-1). Misclassified samples are up-weighted by
    exp(alpha). A round with error >= 1 - 1/K is discarded and the weights
    reset to uniform; error zero caps alpha and stops early.
    """
    kind = kind or spec.kind
    aggregator = {"ADA-H": "hard", "ADA-S": "soft", "ADA-M": "meta"}[kind]
    n = len(labels)
    K = n_classes
    w = _uniform_weights(n)  # kept normalized to sum n
    rounds: list[_AdaRound] = []

    for t in range(spec.boosting_rounds):
        models = [
            fit_gbm(
                tbl.values, labels, w, spec.base, seed=seed + 1009 * t + 17 * m, n_classes=K
            )
            for m, tbl in enumerate(tables)
        ]
        parts = [m.predict_proba(tbl.values) for m, tbl in zip(models, tables)]

        meta_forest = None
        if aggregator == "meta":
            meta_oof = _oof_meta_features(
                tables,
                labels,
                spec.base,
                K,
                spec.ada_inner_folds,
                seed=seed + 1013 * t,
                sample_weight=w,
            )
            meta_forest = _fit_weighted_forest(
                meta_oof, labels, spec.meta_forest, w, seed + 1019 * t, K
            )
            meta_now = np.hstack([p.probabilities for p in parts])
            aggregated = meta_forest.predict_proba(meta_now)
        elif aggregator == "hard":
            aggregated = vote_hard(parts)
        else:
            aggregated = vote_soft(parts)

        correct = adaboost_high_confidence(
            parts, labels, aggregator, spec.soft_confidence_ratio, aggregated
        )
        eps = float(w[~correct].sum() / w.sum())

        if eps <= 0.0:
            rounds.append(_AdaRound(models, _ALPHA_CAP + math.log(K - 1), meta_forest))
            break
        if eps >= 1.0 - 1.0 / K:
            w = _uniform_weights(n)  # discard round, restart from uniform weights
            continue
        alpha = math.log((1.0 - eps) / eps) + math.log(K - 1)
        rounds.append(_AdaRound(models, alpha, meta_forest))
        w = w * np.where(correct, 1.0, math.exp(alpha))
        w = w * (n / w.sum())

    if not rounds:
        raise IntegrationError("no usable boosting round (all rounds were discarded)")
    out = AdaboostIntegrator(
        spec, kind, [t.modality_name for t in tables], rounds, K, spec.soft_confidence_ratio
    )
    out._feature_names = [list(t.feature_names) for t in tables]
    return out


def _fit_weighted_forest(X, y, params, sample_weight, seed, n_classes):
    """Random forest honoring sample weights through weighted bootstrap."""
    p = sample_weight / sample_weight.sum()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(404,)))
    n = len(y)
    rows = rng.choice(n, size=n, replace=True, p=p)
    return fit_random_forest(
        X[rows], y[rows], replace(params, bootstrap=True), seed=seed, n_classes=n_classes
    )


# ---------------------------------------------------------------------------
# PB-MVBoost
# ---------------------------------------------------------------------------


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.flatnonzero(u * np.arange(1, len(v) + 1) > (css - 1.0))
    if len(rho) == 0:
        out = np.zeros_like(v)
        out[int(np.argmax(v))] = 1.0
        return out
    r = rho[-1]
    theta = (css[r] - 1.0) / (r + 1.0)
    return np.maximum(v - theta, 0.0)


def _minimize_view_bound(
    risks: np.ndarray,
    disagreements: np.ndarray,
    max_steps: int = 200,
    tol: float = 1e-6,
    step_size: float = 0.05,
) -> tuple[np.ndarray, bool]:
    """Minimize the majority-vote error bound 1 - (1-2r)^2 / (1-2d) over the
    view-weight simplex by projected gradient descent.

    r and d are the rho-weighted view risks and within-view disagreements.
    Returns (rho, converged); callers fall back to uniform on failure.
    """
    v = len(risks)
    rho = np.full(v, 1.0 / v)

    def _grad(r_bar: float, d_bar: float) -> np.ndarray:
        a = 1.0 - 2.0 * r_bar
        b = max(1.0 - 2.0 * d_bar, 1e-6)
        return (4.0 * a * risks * b - 2.0 * a * a * disagreements) / (b * b)

    for _ in range(max_steps):
        r_bar = float(rho @ risks)
        d_bar = float(rho @ disagreements)
        g = _grad(r_bar, d_bar)
        if not np.isfinite(g).all():
            return np.full(v, 1.0 / v), False
        new_rho = _project_simplex(rho - step_size * g)
        if np.abs(new_rho - rho).max() < tol:
            return new_rho, True
        rho = new_rho
    return rho, True  # hit the step cap; current point is still on the simplex


class PbmvBoostIntegrator:
    kind = "PBMV"

    def __init__(self, spec, modality_names, per_view_models, per_view_q, rho, n_classes,
                 uniform_fallback):
        self.spec = spec
        self.modality_names = modality_names
        self.per_view_models = per_view_models  # [view][round] -> GbmModel
        self.per_view_q = per_view_q  # [view] -> np.ndarray of round weights
        self.view_weights = rho
        self.n_classes = n_classes
        self.uniform_fallback = uniform_fallback

    def predict(self, tables: Sequence[ModalityTable]) -> PredictionSet:
        used = _select_tables(tables, self.modality_names)
        n = used[0].n_samples
        scores = np.zeros((n, self.n_classes), dtype=np.float64)
        for v, (models, q, table) in enumerate(
            zip(self.per_view_models, self.per_view_q, used)
        ):
            for t, model in enumerate(models):
                if q[t] <= 0:
                    continue
                labels = model.predict_proba(table.values).labels
                scores[np.arange(n), labels] += self.view_weights[v] * q[t]
        total = scores.sum(axis=1, keepdims=True)
        probs = np.where(total > 0, scores / np.where(total > 0, total, 1.0), 1.0 / self.n_classes)
        return PredictionSet.from_probabilities(probs)

    def feature_scores(self) -> dict:
        from .feature_selection import aggregate_boosted_importance

        scores = {}
        for v, name in enumerate(self.modality_names):
            q = self.per_view_q[v]
            if q.sum() <= 0:
                agg = np.zeros(len(self._feature_names[v]))
            else:
                agg = aggregate_boosted_importance(
                    [(float(q[t]), m.feature_importances_) for t, m in
                     enumerate(self.per_view_models[v])]
                )
            for i, feat in enumerate(self._feature_names[v]):
                scores[(name, feat)] = float(agg[i])
        return scores

    def report_extras(self) -> dict:
        return {
            "view_weights": {n: float(w) for n, w in zip(self.modality_names, self.view_weights)},
            "uniform_fallback": self.uniform_fallback,
        }


def fit_pbmvboost(
    tables: Sequence[ModalityTable],
    labels: np.ndarray,
    spec: IntegratorSpec,
    n_classes: int,
    seed: int = 0,
) -> PbmvBoostIntegrator:
    """Two-level boosting: per-view classifier weights from the weighted edge,
    plus view weights on the simplex from bound minimization.

    Each view keeps its own Adaboost-style example weights. After every
    iteration the view weights rho are refit by minimizing the majority-vote
    error bound from the views' current risks and pairwise within-view
    disagreements.
    """
    if len(tables) < 2:
        raise IntegrationError("PBMV needs at least 2 modalities")
    n = len(labels)
    K = n_classes
    V = len(tables)
    d_v = [_uniform_weights(n) for _ in range(V)]  # per-view example weights
    per_view_models: list[list[GbmModel]] = [[] for _ in range(V)]
    per_view_q: list[list[float]] = [[] for _ in range(V)]
    per_view_eps: list[list[float]] = [[] for _ in range(V)]
    train_labels: list[list[np.ndarray]] = [[] for _ in range(V)]
    rho = np.full(V, 1.0 / V)
    fallback = False

    for t in range(spec.boosting_rounds):
        for v, table in enumerate(tables):
            model = fit_gbm(
                table.values, labels, d_v[v], spec.base,
                seed=seed + 2003 * t + 29 * v, n_classes=K,
            )
            pred = model.predict_proba(table.values).labels
            mis = pred != labels
            eps = float(d_v[v][mis].sum() / d_v[v].sum())
            eps = min(max(eps, 1e-10), 1.0 - 1e-10)
            q = 0.5 * (math.log((1.0 - eps) / eps) + math.log(K - 1))
            q = max(q, 0.0)  # a worse-than-chance voter gets no say
            per_view_models[v].append(model)
            per_view_q[v].append(q)
            per_view_eps[v].append(eps)
            train_labels[v].append(pred)
            d_v[v] = d_v[v] * np.where(mis, math.exp(q), 1.0)
            d_v[v] = d_v[v] * (n / d_v[v].sum())

        # Gibbs risk per view under the Q-posterior, from the boosting-weighted
        # errors: an uninformative view stays near chance under reweighting
        # even when its classifiers memorize the raw training set.
        risks = np.empty(V)
        disagreements = np.empty(V)
        for v in range(V):
            q = np.array(per_view_q[v])
            preds = np.stack(train_labels[v], axis=0)  # (T, n)
            if q.sum() <= 0:
                risks[v] = 0.5
                disagreements[v] = 0.0
                continue
            qn = q / q.sum()
            risks[v] = float(np.dot(qn, per_view_eps[v]))
            dis = 0.0
            for a in range(len(q)):
                for b in range(len(q)):
                    if a == b:
                        continue
                    dis += qn[a] * qn[b] * float(np.mean(preds[a] != preds[b]))
            disagreements[v] = dis
        rho, converged = _minimize_view_bound(risks, disagreements)
        if not converged:
            rho = np.full(V, 1.0 / V)
            fallback = True

    out = PbmvBoostIntegrator(
        spec,
        [t.modality_name for t in tables],
        per_view_models,
        [np.array(q) for q in per_view_q],
        rho,
        K,
        fallback,
    )
    out._feature_names = [list(t.feature_names) for t in tables]
    return out


# ---------------------------------------------------------------------------
# mixture of experts
# ---------------------------------------------------------------------------


@dataclass
class GateDecision:
    """Gate outcome per sample: a class index or UNKNOWN (-1), plus the
    winning expert's own-class probability (0 when unknown)."""

    chosen: np.ndarray
    confidence: np.ndarray

    @property
    def unknown_mask(self) -> np.ndarray:
        return self.chosen == UNKNOWN


def moe_gate(per_expert: Sequence[tuple[np.ndarray, np.ndarray]]) -> GateDecision:
    """Combine one-vs-rest experts, one per class in class order.

    Each entry is (own-class probability, claims-own-class flag). A sole
    claimant wins; multiple claimants resolve to the highest own-class
    probability (ties to the lower class index); no claimant means UNKNOWN.
    """
    probs = np.stack([p for p, _ in per_expert], axis=1)  # (n, K)
    claims = np.stack([c for _, c in per_expert], axis=1)  # (n, K) bool
    n = probs.shape[0]
    chosen = np.full(n, UNKNOWN, dtype=np.intp)
    confidence = np.zeros(n, dtype=np.float64)
    any_claim = claims.any(axis=1)
    masked = np.where(claims, probs, -np.inf)
    winners = np.argmax(masked, axis=1)  # first max -> lower class index on ties
    chosen[any_claim] = winners[any_claim]
    confidence[any_claim] = probs[any_claim, winners[any_claim]]
    return GateDecision(chosen=chosen, confidence=confidence)


class MoeIntegrator:
    kind = "MOE-COMBN"

    def __init__(self, spec, modality_names, experts, n_classes):
        self.spec = spec
        self.modality_names = modality_names
        self.experts = experts  # experts[class] -> list of per-modality binary GbmModels
        self.n_classes = n_classes

    def _expert_outputs(self, tables) -> list[tuple[np.ndarray, np.ndarray]]:
        used = _select_tables(tables, self.modality_names)
        outputs = []
        for models in self.experts:
            parts = [m.predict_proba(t.values) for m, t in zip(models, used)]
            combined = vote_soft(parts)
            own_prob = combined.probabilities[:, 1]
            claims = combined.labels == 1
            outputs.append((own_prob, claims))
        return outputs

    def gate(self, tables: Sequence[ModalityTable]) -> GateDecision:
        return moe_gate(self._expert_outputs(tables))

    def predict(self, tables: Sequence[ModalityTable]) -> PredictionSet:
        outputs = self._expert_outputs(tables)
        decision = moe_gate(outputs)
        own = np.stack([p for p, _ in outputs], axis=1)
        total = own.sum(axis=1, keepdims=True)
        probs = np.where(total > 0, own / np.where(total > 0, total, 1.0), 1.0 / self.n_classes)
        return PredictionSet(labels=decision.chosen, probabilities=probs)

    def feature_scores(self) -> dict:
        scores: dict = {}
        for models in self.experts:
            for name, model, feats in zip(self.modality_names, models, self._feature_names):
                for i, feat in enumerate(feats):
                    key = (name, feat)
                    scores[key] = scores.get(key, 0.0) + float(model.feature_importances_[i])
        return {k: v / self.n_classes for k, v in scores.items()}

    def report_extras(self) -> dict:
        return {}


def fit_moe(
    tables: Sequence[ModalityTable],
    labels: np.ndarray,
    spec: IntegratorSpec,
    n_classes: int,
    seed: int = 0,
) -> MoeIntegrator:
    """One binary one-vs-rest expert per class, each a soft-voting ensemble.

    Each expert's training split is rebalanced (its own class vs REST) before
    fitting, so minority classes get a fair specialist.
    """
    present = set(np.unique(labels).tolist())
    missing = [k for k in range(n_classes) if k not in present]
    if missing:
        raise IntegrationError(f"class(es) absent from the training split: {missing}")
    experts = []
    for cls in range(n_classes):
        y_bin = (labels == cls).astype(np.intp)
        expert_tables = list(tables)
        y_fit = y_bin
        if spec.expert_smote:
            expert_tables, y_fit = smote_balance_tables(
                expert_tables, y_bin, k=spec.smote_k, seed=seed + 3001 * cls
            )
        w = _uniform_weights(len(y_fit))
        models = [
            fit_gbm(
                t.values, y_fit, w, spec.base,
                seed=seed + 3001 * cls + 17 * i, n_classes=2,
            )
            for i, t in enumerate(expert_tables)
        ]
        experts.append(models)
    out = MoeIntegrator(spec, [t.modality_name for t in tables], experts, n_classes)
    out._feature_names = [list(t.feature_names) for t in tables]
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def fit_integrator(
    tables: Sequence[ModalityTable],
    labels: np.ndarray,
    spec: IntegratorSpec,
    n_classes: int,
    seed: int = 0,
):
    """Fit the strategy named by spec.kind on the given modality subset."""
    if spec.modalities is not None:
        tables = _select_tables(tables, spec.modalities)
    labels = np.asarray(labels, dtype=np.intp)
    if spec.kind == "CONCAT":
        return fit_concat(tables, labels, spec, n_classes, seed)
    if spec.kind in ("ENS-H", "ENS-S"):
        return fit_vote(tables, labels, spec, n_classes, seed)
    if spec.kind == "ML":
        return fit_meta_learner(tables, labels, spec, n_classes, seed)
    if spec.kind in ("ADA-H", "ADA-S", "ADA-M"):
        return fit_adaboost_mm(tables, labels, spec, n_classes, seed)
    if spec.kind == "PBMV":
        return fit_pbmvboost(tables, labels, spec, n_classes, seed)
    if spec.kind == "MOE-COMBN":
        return fit_moe(tables, labels, spec, n_classes, seed)
    raise IntegrationError(f"unknown integrator kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# incremental modality-subset selection
# ---------------------------------------------------------------------------


@dataclass
class RemovalStep:
    step: int
    removed: Optional[str]  # None marks the all-modalities baseline row
    f1_after_removal: float


@dataclass
class IncrementalResult:
    trace: list[RemovalStep]
    best_subset: list[str]
    subset_scores: dict = field(default_factory=dict)  # frozenset(names) -> F1


def score_modality_subset(
    dataset: MultiModalDataset,
    subset: Sequence[str],
    preprocess_cfg: PreprocessConfig,
    base: GbmParams,
    inner_folds: int = 3,
    seed: int = 0,
) -> float:
    """Mean macro-F1 of the soft-voting ensemble over an inner stratified CV,
    with preprocessing and balancing fit per fold."""
    from .evaluation import macro_f1  # deferred: evaluation sits above this module

    sub = dataset.subset_modalities(subset)
    plan = make_fold_plan(sub.labels, repeats=1, folds=inner_folds, seed=seed)
    spec = IntegratorSpec(kind="ENS-S", base=base)
    scores = []
    for r, f in plan.cells():
        test_idx = plan.test_indices(r, f)
        train_idx = plan.train_indices(r, f, sub.n_samples)
        train_tables, y_train = sub.take_rows(train_idx)
        test_tables, y_test = sub.take_rows(test_idx)
        pres = [fit_preprocessor(t, preprocess_cfg) for t in train_tables]
        train_p = [p.transform(t) for p, t in zip(pres, train_tables)]
        test_p = [p.transform(t) for p, t in zip(pres, test_tables)]
        if preprocess_cfg.smote_enabled:
            train_p, y_fit = smote_balance_tables(
                train_p, y_train, k=preprocess_cfg.smote_k, seed=seed + 13 * f
            )
        else:
            y_fit = y_train
        model = fit_vote(train_p, y_fit, spec, sub.n_classes, seed=seed + 7 * f)
        pred = model.predict(test_p)
        scores.append(macro_f1(pred.labels, y_test, sub.n_classes))
    return float(np.mean(scores))


def incremental_select(
    dataset: MultiModalDataset,
    preprocess_cfg: PreprocessConfig,
    base: GbmParams = GbmParams(),
    margin: float = 0.01,
    inner_folds: int = 3,
    seed: int = 0,
) -> IncrementalResult:
    """Greedy backward elimination of modalities by leave-one-out F1.

    Starting from all modalities, each iteration drops the modality whose
    exclusion gives the highest soft-vote F1, as long as that score stays
    within `margin` of the best seen so far. Ties remove the earliest modality
    in configuration order.
    """
    names = list(dataset.modality_names)
    if len(names) < 2:
        raise IntegrationError("incremental selection needs at least 2 modalities")

    cache: dict[frozenset, float] = {}

    def _score(subset: Sequence[str]) -> float:
        key = frozenset(subset)
        if key not in cache:
            cache[key] = score_modality_subset(
                dataset, subset, preprocess_cfg, base, inner_folds, seed
            )
        return cache[key]

    remaining = list(names)
    best = _score(remaining)
    trace = [RemovalStep(step=0, removed=None, f1_after_removal=best)]
    step = 1
    while len(remaining) > 1:
        candidates = []
        for m in remaining:
            reduced = [x for x in remaining if x != m]
            candidates.append((_score(reduced), m))
        best_f1 = max(f1 for f1, _ in candidates)
        best_m = next(m for f1, m in candidates if f1 == best_f1)
        if best_f1 >= best - margin:
            remaining = [x for x in remaining if x != best_m]
            trace.append(RemovalStep(step=step, removed=best_m, f1_after_removal=best_f1))
            best = max(best, best_f1)
            step += 1
        else:
            break
    return IncrementalResult(
        trace=trace,
        best_subset=remaining,
        subset_scores={tuple(sorted(k)): v for k, v in cache.items()},
    )
