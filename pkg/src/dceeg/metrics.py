"""Evaluation harness: confusion matrices, one-vs-rest rates, ROC/AUC,
cross-validation folds, and a train/test leakage check.

Conventions (mirrored exactly by the brute-force oracles in the tests):
predictions are argmax over probabilities with ties to the lowest index;
per-class accuracy is the class-conditional hit rate on that class's own
samples (so it equals recall); rates with a zero denominator report 0.0;
overall rows are unweighted macro averages over classes present in the
truth, with pooled (micro) accuracy reported alongside. Per-class AUC is
one-vs-rest by trapezoidal integration over all distinct score thresholds,
which equals the tie-aware pair-ordering statistic; classes without both a
positive and a negative sample have no AUC and are excluded from the macro
mean with a warning.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class MetricsError(Exception):
    pass


@dataclass
class MetricsReport:
    class_names: list[str]
    confusion: np.ndarray                  # [C, C] rows true, cols predicted
    per_class: dict[str, dict[str, float]]
    overall: dict[str, float]              # macro averages
    micro_accuracy: float
    auc: dict[str, float | None]
    macro_auc: float | None
    micro_auc: float | None
    n_samples: int
    warnings: list[str] = field(default_factory=list)


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


def binary_auc(labels: np.ndarray, scores: np.ndarray) -> float | None:
    """Trapezoidal ROC area over thresholds at every distinct score. Ties
    are grouped, so the result equals the Mann-Whitney pair statistic."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    boundaries = np.nonzero(np.diff(s))[0]
    cut = np.concatenate([boundaries, [s.size - 1]])
    tp = np.cumsum(lab)[cut]
    fp = np.cumsum(~lab)[cut]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return float(np.trapezoid(tpr, fpr))


def roc_points(labels: np.ndarray, scores: np.ndarray) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) triples from +inf down through every distinct score."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = max(int(labels.sum()), 1)
    n_neg = max(int((~labels).sum()), 1)
    pts = [(np.inf, 0.0, 0.0)]
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            tp += bool(lab[j])
            fp += not lab[j]
            j += 1
        pts.append((float(s[i]), fp / n_neg, tp / n_pos))
        i = j
    return pts


def compute_metrics(y_true: np.ndarray, probs: np.ndarray,
                    class_names: list[str] | None = None) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != y_true.shape[0]:
        raise MetricsError(f"probs shape {probs.shape} does not match {y_true.shape[0]} labels")
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise MetricsError(f"probability rows must sum to 1 (max deviation "
                           f"{np.abs(row_sums - 1.0).max():.2e})")
    c = probs.shape[1]
    names = class_names or [f"class{i}" for i in range(c)]
    y_pred = probs.argmax(axis=1)
    m = confusion_matrix(y_true, y_pred, c)
    n = int(m.sum())

    notes: list[str] = []
    per_class: dict[str, dict[str, float]] = {}
    auc: dict[str, float | None] = {}
    present: list[int] = []
    for k in range(c):
        tp = int(m[k, k])
        fn = int(m[k].sum() - tp)
        fp = int(m[:, k].sum() - tp)
        tn = n - tp - fn - fp
        support = tp + fn
        pre = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / support if support else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0
        per_class[names[k]] = {"acc": rec, "pre": pre, "rec": rec,
                               "spec": spec, "f1": f1, "support": float(support)}
        if support:
            present.append(k)
        a = binary_auc(y_true == k, probs[:, k])
        auc[names[k]] = a
        if a is None:
            notes.append(f"AUC undefined for class {names[k]!r} (missing positives "
                         "or negatives); excluded from macro")
    if not present:
        raise MetricsError("no class has any true samples")

    overall = {key: float(np.mean([per_class[names[k]][key] for k in present]))
               for key in ("acc", "pre", "rec", "spec", "f1")}
    micro_accuracy = float((y_pred == y_true).mean())

    defined = [a for a in auc.values() if a is not None]
    macro_auc = float(np.mean(defined)) if defined else None
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y_true] = 1.0
    micro_auc = binary_auc(onehot.reshape(-1) > 0.5, probs.reshape(-1))
    for note in notes:
        warnings.warn(note)
    return MetricsReport(class_names=names, confusion=m, per_class=per_class,
                         overall=overall, micro_accuracy=micro_accuracy, auc=auc,
                         macro_auc=macro_auc, micro_auc=micro_auc, n_samples=n,
                         warnings=notes)


def report_rows(report: MetricsReport) -> list[list[str]]:
    """CSV rows in per-class-then-overall order: Class, Acc, Pre, Recall,
    Spec, F1, AUC."""
    rows = [["class", "acc", "pre", "recall", "spec", "f1", "auc"]]
    for name in report.class_names:
        pc = report.per_class[name]
        a = report.auc[name]
        rows.append([name] + [f"{pc[k]:.6f}" for k in ("acc", "pre", "rec", "spec", "f1")]
                    + [f"{a:.6f}" if a is not None else "undefined"])
    o = report.overall
    rows.append(["overall"] + [f"{o[k]:.6f}" for k in ("acc", "pre", "rec", "spec", "f1")]
                + [f"{report.macro_auc:.6f}" if report.macro_auc is not None else "undefined"])
    return rows


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    assignments: np.ndarray        # sample index -> fold id
    n_folds: int
    seed: int

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.nonzero(self.assignments == fold)[0]
        train = np.nonzero(self.assignments != fold)[0]
        return train, test


def make_folds(n_samples: int, n_folds: int, seed: int,
               groups: list[str] | None = None) -> FoldPlan:
    """Random non-overlapping folds with sizes differing by at most one.
    With ``groups``, whole groups are assigned greedily to the smallest fold
    (subject-independent mode; the size balance then only holds per group)."""
    if n_samples < n_folds:
        raise MetricsError(f"cannot split {n_samples} samples into {n_folds} folds")
    rng = np.random.default_rng(seed)
    assignments = np.empty(n_samples, dtype=np.int64)
    if groups is None:
        order = rng.permutation(n_samples)
        for fold, chunk in enumerate(np.array_split(order, n_folds)):
            assignments[chunk] = fold
    else:
        if len(groups) != n_samples:
            raise MetricsError("groups must match sample count")
        uniq = sorted(set(groups))
        rng.shuffle(uniq)
        sizes = np.zeros(n_folds, dtype=np.int64)
        fold_of = {}
        by_group: dict[str, int] = {}
        for g in groups:
            by_group[g] = by_group.get(g, 0) + 1
        for g in sorted(uniq, key=lambda g: -by_group[g]):
            fold = int(sizes.argmin())
            fold_of[g] = fold
            sizes[fold] += by_group[g]
        for i, g in enumerate(groups):
            assignments[i] = fold_of[g]
    return FoldPlan(assignments=assignments, n_folds=n_folds, seed=seed)


def find_duplicate_leaks(train_x: np.ndarray, test_x: np.ndarray) -> list[tuple[int, int]]:
    """Exact-duplicate rows appearing on both sides of a split."""
    seen: dict[bytes, int] = {}
    for i, row in enumerate(np.ascontiguousarray(train_x)):
        seen.setdefault(row.tobytes(), i)
    leaks = []
    for j, row in enumerate(np.ascontiguousarray(test_x)):
        hit = seen.get(row.tobytes())
        if hit is not None:
            leaks.append((hit, j))
    return leaks


@dataclass
class CrossValResult:
    plan: FoldPlan
    reports: list[MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]
    leaks: list[str]


def cross_validate(data: np.ndarray, labels: np.ndarray, train_fn,
                   n_folds: int = 5, seed: int = 0,
                   class_names: list[str] | None = None,
                   groups: list[str] | None = None) -> CrossValResult:
    """Train/evaluate once per fold. ``train_fn(train_x, train_y, test_x,
    test_y, fold) -> test probabilities``. Exact-duplicate leakage across a
    split is flagged (training still proceeds; the flags ship in the result).
    """
    plan = make_folds(len(data), n_folds, seed, groups)
    reports = []
    leaks: list[str] = []
    for fold in range(n_folds):
        train_idx, test_idx = plan.fold_indices(fold)
        if np.intersect1d(train_idx, test_idx).size:
            raise MetricsError(f"fold {fold} train/test index overlap")
        dups = find_duplicate_leaks(data[train_idx], data[test_idx])
        if dups:
            leaks.append(f"fold {fold}: {len(dups)} exact-duplicate epochs cross the split")
        probs = train_fn(data[train_idx], labels[train_idx],
                         data[test_idx], labels[test_idx], fold)
        reports.append(compute_metrics(labels[test_idx], probs, class_names))
    keys = ("acc", "pre", "rec", "spec", "f1")
    mean = {k: float(np.mean([r.overall[k] for r in reports])) for k in keys}
    std = {k: float(np.std([r.overall[k] for r in reports])) for k in keys}
    mean["micro_accuracy"] = float(np.mean([r.micro_accuracy for r in reports]))
    std["micro_accuracy"] = float(np.std([r.micro_accuracy for r in reports]))
    return CrossValResult(plan=plan, reports=reports, mean=mean, std=std, leaks=leaks)
