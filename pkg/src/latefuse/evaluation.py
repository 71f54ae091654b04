"""Confusion-matrix metrics, one-vs-rest AUC, the corrected resampled paired
t-test, and the repeated-CV benchmark driver.

Zero-division cells (e.g. no predicted positives) score 0 and are flagged
rather than propagating NaN, so aggregates stay defined on tiny folds.
An abstention label (-1) never matches any class: it counts against every
metric and is additionally reported as unknown_rate.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .data import FoldPlan, MultiModalDataset
from .feature_selection import (
    FeatureSignature,
    StabilityReport,
    select_signature,
    stability_cwrel,
)
from .integrators import IntegratorSpec, MetaLearnerIntegrator, fit_integrator
from .learners import PredictionSet
from .preprocess import PreprocessConfig, fit_preprocessor, smote_balance_tables

REPORT_VERSION = 1

META_STABILITY_CAVEAT = (
    "meta-learner scores every meta-feature on every fold, so its "
    "modality-level stability is 1.0 by construction"
)


class EvaluationError(Exception):
    pass


# ---------------------------------------------------------------------------
# confusion metrics
# ---------------------------------------------------------------------------


def confusion_counts(pred_labels: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """One-vs-rest (tp, fp, tn, fn) per class. Abstentions (label -1) predict
    no class, so they land in fn/tn columns only."""
    pred_labels = np.asarray(pred_labels, dtype=np.intp)
    truth = np.asarray(truth, dtype=np.intp)
    if len(pred_labels) != len(truth):
        raise EvaluationError("prediction/truth length mismatch")
    n = len(truth)
    counts = np.zeros((n_classes, 4), dtype=np.intp)
    for k in range(n_classes):
        pred_pos = pred_labels == k
        true_pos = truth == k
        tp = int(np.sum(pred_pos & true_pos))
        fp = int(np.sum(pred_pos & ~true_pos))
        fn = int(np.sum(~pred_pos & true_pos))
        counts[k] = (tp, fp, n - tp - fp - fn, fn)
    return counts


def _safe_div(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def macro_f1(pred_labels: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class one-vs-rest F1 scores."""
    f1s = []
    for tp, fp, _, fn in confusion_counts(pred_labels, truth, n_classes):
        p, _ = _safe_div(tp, tp + fp)
        r, _ = _safe_div(tp, tp + fn)
        f1, _ = _safe_div(2 * p * r, p + r)
        f1s.append(f1)
    return float(np.mean(f1s))


@dataclass
class PerClassMetrics:
    class_index: int
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    recall: float
    f1: float
    auc: float
    auc_valid: bool
    zero_division_flags: list = field(default_factory=list)


@dataclass
class MetricSet:
    accuracy: float  # overall fraction of correct predictions
    per_class: list  # list[PerClassMetrics]
    macro_sensitivity: float
    macro_specificity: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float
    unknown_rate: float


def auc_per_class(
    probabilities: np.ndarray, truth: np.ndarray, n_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Rank-sum (Mann-Whitney) one-vs-rest AUC per class with tie correction.

    Classes without both a positive and a negative sample are marked invalid.
    """
    truth = np.asarray(truth, dtype=np.intp)
    aucs = np.zeros(n_classes, dtype=np.float64)
    valid = np.zeros(n_classes, dtype=bool)
    for k in range(n_classes):
        pos = truth == k
        n_pos = int(pos.sum())
        n_neg = len(truth) - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = stats.rankdata(probabilities[:, k], method="average")
        r_pos = ranks[pos].sum()
        aucs[k] = (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        valid[k] = True
    return aucs, valid


def roc_auc_ovr(probabilities: np.ndarray, truth: np.ndarray) -> float:
    """Macro-average one-vs-rest AUC over classes with both labels present."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    aucs, valid = auc_per_class(probabilities, truth, probabilities.shape[1])
    if not valid.any():
        return 0.0
    return float(aucs[valid].mean())


def compute_metrics(predictions: PredictionSet, truth: np.ndarray) -> MetricSet:
    """Evaluate one prediction set: per-class one-vs-rest metrics plus macro
    averages, overall accuracy and the abstention rate."""
    truth = np.asarray(truth, dtype=np.intp)
    if predictions.n_samples != len(truth):
        raise EvaluationError("prediction/truth length mismatch")
    n_classes = predictions.n_classes
    n = len(truth)
    counts = confusion_counts(predictions.labels, truth, n_classes)
    aucs, auc_valid = auc_per_class(predictions.probabilities, truth, n_classes)

    per_class = []
    for k in range(n_classes):
        tp, fp, tn, fn = (int(v) for v in counts[k])
        flags = []
        acc = (tp + tn) / n
        sens, fl = _safe_div(tp, tp + fn)
        if fl:
            flags.append("sensitivity")
        spec, fl = _safe_div(tn, tn + fp)
        if fl:
            flags.append("specificity")
        prec, fl = _safe_div(tp, tp + fp)
        if fl:
            flags.append("precision")
        f1, fl = _safe_div(2 * prec * sens, prec + sens)
        if fl:
            flags.append("f1")
        per_class.append(
            PerClassMetrics(
                class_index=k,
                tp=tp, fp=fp, tn=tn, fn=fn,
                accuracy=acc,
                sensitivity=sens,
                specificity=spec,
                precision=prec,
                recall=sens,
                f1=f1,
                auc=float(aucs[k]),
                auc_valid=bool(auc_valid[k]),
                zero_division_flags=flags,
            )
        )

    overall_accuracy = float(np.sum(predictions.labels == truth) / n)
    macro_auc = float(aucs[auc_valid].mean()) if auc_valid.any() else 0.0
    return MetricSet(
        accuracy=overall_accuracy,
        per_class=per_class,
        macro_sensitivity=float(np.mean([c.sensitivity for c in per_class])),
        macro_specificity=float(np.mean([c.specificity for c in per_class])),
        macro_precision=float(np.mean([c.precision for c in per_class])),
        macro_recall=float(np.mean([c.recall for c in per_class])),
        macro_f1=float(np.mean([c.f1 for c in per_class])),
        macro_auc=macro_auc,
        unknown_rate=float(np.mean(predictions.labels == -1)),
    )


# ---------------------------------------------------------------------------
# corrected resampled paired t-test
# ---------------------------------------------------------------------------


@dataclass
class TTestResult:
    t: float
    p_value: float
    degenerate: bool = False


def corrected_ttest(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    n_train: float,
    n_test: float,
) -> TTestResult:
    """Paired t-test with the variance inflated by n_test/n_train to correct
    for overlapping CV training sets. Two-sided p, J-1 degrees of freedom."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if len(a) != len(b):
        raise EvaluationError("score series length mismatch")
    j = len(a)
    if j < 2:
        raise EvaluationError("need at least 2 paired scores")
    d = a - b
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    if var == 0.0:
        return TTestResult(t=0.0, p_value=1.0 if mean == 0.0 else 0.0, degenerate=True)
    t = mean / np.sqrt((1.0 / j + n_test / n_train) * var)
    p = 2.0 * float(stats.t.sf(abs(t), j - 1))
    return TTestResult(t=float(t), p_value=p)


# ---------------------------------------------------------------------------
# benchmark driver
# ---------------------------------------------------------------------------


@dataclass
class FoldClassRecord:
    method: str
    repeat: int
    fold: int
    class_index: int
    class_name: str
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    recall: float
    f1: float
    auc: float
    auc_valid: bool


@dataclass
class FoldRecord:
    method: str
    repeat: int
    fold: int
    n_test: int
    accuracy: float
    macro_f1: float
    macro_auc: float
    unknown_rate: float


@dataclass
class MethodResult:
    label: str
    spec: IntegratorSpec
    fold_records: list = field(default_factory=list)
    class_records: list = field(default_factory=list)
    per_fold_scores: list = field(default_factory=list)  # raw importance maps
    selected_sets: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    signature: Optional[FeatureSignature] = None
    stability: Optional[StabilityReport] = None
    aggregates: dict = field(default_factory=dict)


@dataclass
class SignificanceEntry:
    metric: str
    method_a: str
    method_b: str
    t: float
    p_value: float
    degenerate: bool


@dataclass
class EvaluationReport:
    seed: int
    class_names: list
    modality_names: list
    repeats: int
    folds: int
    methods: dict  # label -> MethodResult
    significance: list
    config_echo: Optional[dict] = None
    report_version: int = REPORT_VERSION

    def to_json_dict(self) -> dict:
        out = {
            "report_version": self.report_version,
            "seed": self.seed,
            "class_names": self.class_names,
            "modality_names": self.modality_names,
            "repeats": self.repeats,
            "folds": self.folds,
            "config": self.config_echo,
            "methods": {},
            "significance": [asdict(s) for s in self.significance],
        }
        for label, method in self.methods.items():
            out["methods"][label] = {
                "kind": method.spec.kind,
                "aggregates": method.aggregates,
                "fold_records": [asdict(r) for r in method.fold_records],
                "class_records": [asdict(r) for r in method.class_records],
                "signature": method.signature.to_rows() if method.signature else [],
                "stability": method.stability.to_json_dict() if method.stability else None,
                "extras": method.extras,
                "failures": method.failures,
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    def records_csv_rows(self) -> list[dict]:
        rows = []
        for label in self.methods:
            for r in self.methods[label].class_records:
                rows.append(asdict(r))
        return rows


def _cell_seed(seed: int, repeat: int, fold: int) -> int:
    return int(
        np.random.SeedSequence(entropy=seed, spawn_key=(repeat, fold)).generate_state(1)[0]
    )


def _run_cell(args) -> dict:
    """Fit preprocessing and every method on one (repeat, fold) cell.

    Standalone function so cells can run in worker processes; returns plain
    records keyed by method label.
    """
    dataset, plan, methods, cfg, seed, repeat, fold = args
    n = dataset.n_samples
    test_idx = plan.test_indices(repeat, fold)
    train_idx = plan.train_indices(repeat, fold, n)
    train_tables, y_train = dataset.take_rows(train_idx)
    test_tables, y_test = dataset.take_rows(test_idx)

    pres = [fit_preprocessor(t, cfg) for t in train_tables]
    train_p = [p.transform(t) for p, t in zip(pres, train_tables)]
    test_p = [p.transform(t) for p, t in zip(pres, test_tables)]
    if cfg.smote_enabled:
        train_fit, y_fit = smote_balance_tables(
            train_p, y_train, k=cfg.smote_k, seed=_cell_seed(seed, repeat, fold)
        )
    else:
        train_fit, y_fit = train_p, y_train

    out: dict = {}
    for mi, spec in enumerate(methods):
        label = spec.label
        try:
            fitted = fit_integrator(
                train_fit, y_fit, spec, dataset.n_classes,
                seed=_cell_seed(seed, repeat, fold) + 131 * mi,
            )
            predictions = fitted.predict(test_p)
            metrics = compute_metrics(predictions, y_test)
            scores = fitted.feature_scores()
            if isinstance(fitted, MetaLearnerIntegrator):
                selected = set(fitted.meta_feature_keys)
            else:
                selected = {key for key, v in scores.items() if v > 0}
            out[label] = {
                "metrics": metrics,
                "scores": scores,
                "selected": selected,
                "extras": fitted.report_extras(),
                "n_test": len(test_idx),
                "failure": None,
            }
        except Exception as e:  # method failure must not sink other methods
            out[label] = {"failure": f"{type(e).__name__}: {e}"}
    return out


def run_cv_benchmark(
    dataset: MultiModalDataset,
    fold_plan: FoldPlan,
    methods: Sequence[IntegratorSpec],
    preprocess_cfg: PreprocessConfig,
    seed: int = 0,
    n_jobs: int = 1,
    config_echo: Optional[dict] = None,
) -> EvaluationReport:
    """Fit and score every method on every (repeat, fold) cell, then attach
    signatures, stability and pairwise corrected t-tests on the per-fold
    macro-F1 and AUC series."""
    labels = [spec.label for spec in methods]
    if len(set(labels)) != len(labels):
        raise EvaluationError("duplicate method labels; set distinct names")

    cells = list(fold_plan.cells())
    args = [
        (dataset, fold_plan, list(methods), preprocess_cfg, seed, r, f) for r, f in cells
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            cell_results = list(pool.map(_run_cell, args))
    else:
        cell_results = [_run_cell(a) for a in args]

    methods_out: dict[str, MethodResult] = {
        spec.label: MethodResult(label=spec.label, spec=spec) for spec in methods
    }
    for (repeat, fold), result in zip(cells, cell_results):
        for spec in methods:
            label = spec.label
            payload = result[label]
            m = methods_out[label]
            if payload["failure"] is not None:
                m.failures.append(
                    {"repeat": repeat, "fold": fold, "error": payload["failure"]}
                )
                continue
            metrics: MetricSet = payload["metrics"]
            m.fold_records.append(
                FoldRecord(
                    method=label,
                    repeat=repeat,
                    fold=fold,
                    n_test=payload["n_test"],
                    accuracy=metrics.accuracy,
                    macro_f1=metrics.macro_f1,
                    macro_auc=metrics.macro_auc,
                    unknown_rate=metrics.unknown_rate,
                )
            )
            for c in metrics.per_class:
                m.class_records.append(
                    FoldClassRecord(
                        method=label,
                        repeat=repeat,
                        fold=fold,
                        class_index=c.class_index,
                        class_name=dataset.class_names[c.class_index],
                        tp=c.tp, fp=c.fp, tn=c.tn, fn=c.fn,
                        accuracy=c.accuracy,
                        sensitivity=c.sensitivity,
                        specificity=c.specificity,
                        precision=c.precision,
                        recall=c.recall,
                        f1=c.f1,
                        auc=c.auc,
                        auc_valid=c.auc_valid,
                    )
                )
            m.per_fold_scores.append(
                {k: float(v) for k, v in payload["scores"].items()}
            )
            m.selected_sets.append(payload["selected"])
            m.extras[f"{repeat}:{fold}"] = payload["extras"]

    n_folds_total = fold_plan.repeats * fold_plan.folds_per_repeat
    raw_feature_counts = {
        t.modality_name: t.n_features for t in dataset.modalities
    }
    for spec in methods:
        m = methods_out[spec.label]
        _finalize_method(m, spec, dataset, raw_feature_counts, n_folds_total)

    significance = _pairwise_significance(methods_out, dataset.n_samples, fold_plan)
    return EvaluationReport(
        seed=seed,
        class_names=list(dataset.class_names),
        modality_names=list(dataset.modality_names),
        repeats=fold_plan.repeats,
        folds=fold_plan.folds_per_repeat,
        methods=methods_out,
        significance=significance,
        config_echo=config_echo,
    )


def _finalize_method(
    m: MethodResult,
    spec: IntegratorSpec,
    dataset: MultiModalDataset,
    raw_feature_counts: dict,
    n_folds_total: int,
) -> None:
    if m.fold_records:
        acc = [r.accuracy for r in m.fold_records]
        unk = [r.unknown_rate for r in m.fold_records]
        per_class_vals = {
            name: [getattr(r, name) for r in m.class_records]
            for name in ("sensitivity", "specificity", "precision", "recall", "f1")
        }
        auc_vals = [r.auc for r in m.class_records if r.auc_valid]
        m.aggregates = {
            "accuracy_mean": float(np.mean(acc)),
            "accuracy_sd": float(np.std(acc)),
            "unknown_rate_mean": float(np.mean(unk)),
            "n_folds_scored": len(m.fold_records),
        }
        for name, vals in per_class_vals.items():
            m.aggregates[f"macro_{name}_mean"] = float(np.mean(vals))
            m.aggregates[f"macro_{name}_sd"] = float(np.std(vals))
        m.aggregates["macro_auc_mean"] = float(np.mean(auc_vals)) if auc_vals else 0.0
        m.aggregates["macro_auc_sd"] = float(np.std(auc_vals)) if auc_vals else 0.0

    if m.per_fold_scores:
        m.signature = select_signature(m.per_fold_scores, n_folds=n_folds_total)

    if len(m.selected_sets) >= 2:
        if spec.kind == "ML":
            universe = dataset.n_classes * len(
                spec.modalities if spec.modalities is not None else dataset.modality_names
            )
            caveat = META_STABILITY_CAVEAT
        else:
            used = spec.modalities if spec.modalities is not None else dataset.modality_names
            universe = sum(raw_feature_counts[name] for name in used)
            caveat = None
        tagged = [{f"{mod}::{feat}" for mod, feat in s} for s in m.selected_sets]
        m.stability = stability_cwrel(tagged, universe, caveat=caveat)


def _pairwise_significance(
    methods_out: dict, n_samples: int, fold_plan: FoldPlan
) -> list:
    n_test = n_samples / fold_plan.folds_per_repeat
    n_train = n_samples - n_test
    labels = list(methods_out)
    entries = []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            a, b = methods_out[labels[i]], methods_out[labels[j]]
            if not a.fold_records or not b.fold_records:
                continue
            if len(a.fold_records) != len(b.fold_records):
                continue  # a method failed on some folds; series not comparable
            for metric in ("macro_f1", "macro_auc"):
                sa = [getattr(r, metric) for r in a.fold_records]
                sb = [getattr(r, metric) for r in b.fold_records]
                res = corrected_ttest(sa, sb, n_train, n_test)
                entries.append(
                    SignificanceEntry(
                        metric=metric,
                        method_a=labels[i],
                        method_b=labels[j],
                        t=res.t,
                        p_value=res.p_value,
                        degenerate=res.degenerate,
                    )
                )
    return entries
