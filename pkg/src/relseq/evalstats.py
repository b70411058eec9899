"""Accuracy metrics, the Wilcoxon signed-rank test, and cross-validation.

Micro accuracy pools positions ("time-slice accuracy"); macro averages
per-class accuracies over the classes present in the test reference
("class accuracy").  Fold spreads are reported as sample standard
deviations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, split_folds


@dataclass
class EvalReport:
    micro: float
    macro: float
    per_class: dict[int, float]
    n_positions: int
    fold_results: list["EvalReport"] = field(default_factory=list)
    micro_mean: float | None = None
    micro_std: float | None = None
    macro_mean: float | None = None
    macro_std: float | None = None

    def to_dict(self):
        d = {"micro": self.micro, "macro": self.macro,
             "per_class": {str(k): v for k, v in self.per_class.items()},
             "n_positions": self.n_positions}
        if self.fold_results:
            d["folds"] = [f.to_dict() for f in self.fold_results]
            d["micro_mean"] = self.micro_mean
            d["micro_std"] = self.micro_std
            d["macro_mean"] = self.macro_mean
            d["macro_std"] = self.macro_std
        return d


def evaluate(pred: list[np.ndarray], truth: list[np.ndarray]) -> EvalReport:
    """Micro/macro accuracy of aligned prediction/reference label lists."""
    if len(pred) != len(truth):
        raise ValueError("prediction and truth lists differ in length")
    for p, t in zip(pred, truth):
        if len(p) != len(t):
            raise ValueError("sequence length mismatch between pred and truth")
    if not truth or sum(len(t) for t in truth) == 0:
        raise ValueError("nothing to evaluate")
    all_pred = np.concatenate([np.asarray(p) for p in pred])
    all_true = np.concatenate([np.asarray(t) for t in truth])
    micro = float(np.mean(all_pred == all_true))
    per_class = {}
    for c in np.unique(all_true):
        sel = all_true == c
        per_class[int(c)] = float(np.mean(all_pred[sel] == c))
    macro = float(np.mean(list(per_class.values())))
    return EvalReport(micro, macro, per_class, int(all_true.size))


@dataclass
class WilcoxonResult:
    w_plus: float
    w_minus: float
    p_value: float | None
    n_effective: int
    method: str
    defined: bool = True


def _signed_ranks(diffs: np.ndarray) -> np.ndarray:
    """Average ranks of |d| (zero differences must already be dropped)."""
    order = np.argsort(np.abs(diffs), kind="stable")
    ranks = np.empty(len(diffs))
    sorted_abs = np.abs(diffs)[order]
    i = 0
    while i < len(diffs):
        j = i
        while j + 1 < len(diffs) and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a, b, exact_limit: int = 20) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped; tied magnitudes share average ranks.
    Up to exact_limit pairs the p-value enumerates all sign patterns; above
    that a normal approximation with tie correction is used.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("paired samples must be nonempty and equally long")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 0.0, None, 0, "undefined", defined=False)
    ranks = _signed_ranks(d)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    t_obs = min(w_plus, w_minus)
    if n <= exact_limit:
        # doubled ranks are integers even under average-rank ties, so the
        # null distribution is an exact integer convolution
        doubled = np.rint(2 * ranks).astype(np.int64)
        total = int(doubled.sum())
        dist = np.zeros(total + 1)
        dist[0] = 1.0
        for r in doubled:
            nxt = dist.copy()
            nxt[r:] += dist[:total + 1 - r]
            dist = nxt
        t2 = int(round(2 * t_obs))
        p = 2.0 * dist[:t2 + 1].sum() / 2 ** n
        return WilcoxonResult(w_plus, w_minus, min(1.0, p), n, "exact")
    mu = n * (n + 1) / 4.0
    tie_term = 0.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    for t in counts:
        tie_term += t ** 3 - t
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0)
    if sigma == 0.0:
        return WilcoxonResult(w_plus, w_minus, None, n, "undefined", defined=False)
    z = (t_obs - mu) / sigma
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return WilcoxonResult(w_plus, w_minus, min(1.0, p), n, "normal")


def run_cv(data: Dataset, trainer, k: int, seed: int,
           invert_ratio: bool = False) -> EvalReport:
    """k-fold cross validation at whole-sequence granularity.

    trainer(train_dataset) must return an object with predict(x) -> labels.
    invert_ratio trains on one fold and tests on the remaining k-1 (the
    25/75 protocol at k=4); k = #sequences gives leave-one-out.
    """
    folds = split_folds(len(data.sequences), k, seed, invert_ratio=invert_ratio)
    fold_reports = []
    for train_idx, test_idx in folds:
        model = trainer(data.subset(train_idx))
        test = data.subset(test_idx)
        preds = [model.predict(s.x) for s in test.sequences]
        fold_reports.append(evaluate(preds, [s.y for s in test.sequences]))
    micro = np.array([r.micro for r in fold_reports])
    macro = np.array([r.macro for r in fold_reports])
    per_class: dict[int, list[float]] = {}
    for r in fold_reports:
        for c, v in r.per_class.items():
            per_class.setdefault(c, []).append(v)
    top = EvalReport(
        micro=float(micro.mean()), macro=float(macro.mean()),
        per_class={c: float(np.mean(v)) for c, v in sorted(per_class.items())},
        n_positions=sum(r.n_positions for r in fold_reports),
        fold_results=fold_reports,
        micro_mean=float(micro.mean()), micro_std=float(micro.std(ddof=1)),
        macro_mean=float(macro.mean()), macro_std=float(macro.std(ddof=1)))
    return top


def report_lines(report: EvalReport) -> list[str]:
    """Delimited text rendering with fixed field names."""
    lines = [f"micro\t{report.micro:.6f}", f"macro\t{report.macro:.6f}"]
    for c, v in sorted(report.per_class.items()):
        lines.append(f"class\t{c}\t{v:.6f}")
    if report.fold_results:
        for i, r in enumerate(report.fold_results):
            lines.append(f"fold\t{i}\t{r.micro:.6f}\t{r.macro:.6f}")
        lines.append(f"micro_mean_std\t{report.micro_mean:.6f}\t{report.micro_std:.6f}")
        lines.append(f"macro_mean_std\t{report.macro_mean:.6f}\t{report.macro_std:.6f}")
    return lines
