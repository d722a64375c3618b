"""Target-detection ROC/AUC, nuisance leakage, paired Wilcoxon tests, run reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError

WILCOXON_EXACT_MAX = 20


@dataclass
class RocCurve:
    thresholds: np.ndarray
    sensitivity: np.ndarray
    false_alarm: np.ndarray
    auc: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "sensitivity", "false_alarm"])
            for row in zip(self.thresholds, self.sensitivity, self.false_alarm):
                writer.writerow([repr(float(v)) for v in row])


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined unless both classes are present")
    return scores, pos, n_pos, n_neg


def auc(scores, labels):
    """Probability that a random positive outscores a random negative, ties counted 1/2.

    Computed from the Mann-Whitney rank sum with average ranks.
    """
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    """Sensitivity and false-alarm rate at every distinct score threshold (score >= thr)."""
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    p = pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # final index of each tied run
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    area = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds, tpr, fpr, area)


# --------------------------------------------------------------------- signed rank


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float  # two-sided
    w_plus: float
    w_minus: float
    n_used: int
    method: str


def _exact_null_counts(doubled_ranks):
    """Number of sign patterns giving each value of 2*W+ (dynamic programming over ranks)."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        counts[r:reach + r + 1] = counts[r:reach + r + 1] + counts[:reach + 1]
        reach += r
    return counts


def wilcoxon_signed_rank(x, y) -> WilcoxonResult:
    """Paired two-sided Wilcoxon signed-rank test on ``x - y``.

    Zero differences are dropped; tied magnitudes share their average rank. For
    up to 20 non-zero pairs the p-value is exact over all 2^m sign assignments,
    above that a tie-corrected normal approximation with continuity correction
    is used.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"paired samples differ in length: {x.size} vs {y.size}")
    d = x - y
    d = d[d != 0]
    m = d.size
    if m == 0:
        raise MetricError("all paired differences are zero; the signed-rank test is undefined")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if m <= WILCOXON_EXACT_MAX:
        doubled = np.rint(2 * ranks).astype(np.int64)  # average ranks are multiples of 1/2
        counts = _exact_null_counts(doubled)
        k = int(round(2 * stat))
        tail = sum(counts[:k + 1])
        p = min(1.0, 2 * float(tail) / 2 ** m)
        method = "exact"
    else:
        mean = m * (m + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = m * (m + 1) * (2 * m + 1) / 24.0 - (tie_sizes ** 3 - tie_sizes).sum() / 48.0
        z = (max(abs(stat - mean) - 0.5, 0.0)) / math.sqrt(var) if var > 0 else 0.0
        p = min(1.0, math.erfc(z / math.sqrt(2)))
        method = "normal"
    return WilcoxonResult(stat, p, w_plus, w_minus, m, method)


# --------------------------------------------------------------------------- reports


@dataclass
class RunResult:
    lam: float
    seed: int
    test_auc: float
    val_adversary_acc: float
    val_classifier_acc: float
    best_epoch: int
    epochs_run: int
    runtime_s: float
    run_id: str = ""


@dataclass
class EvalReport:
    runs: list = field(default_factory=list)
    paired_tests: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def by_lambda(self):
        out = {}
        for r in self.runs:
            out.setdefault(r.lam, {})[r.seed] = r
        return out

    def summary(self):
        rows = []
        for lam, runs in sorted(self.by_lambda().items()):
            aucs = [r.test_auc for r in runs.values()]
            leak = [r.val_adversary_acc for r in runs.values()]
            rows.append(dict(lam=lam, n=len(aucs), mean_test_auc=float(np.mean(aucs)),
                             std_test_auc=float(np.std(aucs)), mean_val_adversary_acc=float(np.mean(leak)),
                             std_val_adversary_acc=float(np.std(leak)),
                             mean_val_classifier_acc=float(np.mean([r.val_classifier_acc for r in runs.values()]))))
        return rows

    def add_paired_tests(self, baseline=0.0):
        """Wilcoxon test of test AUC at ``baseline`` against every other lambda, paired by seed."""
        grouped = self.by_lambda()
        if baseline not in grouped:
            return
        self.paired_tests = []
        for lam in sorted(grouped):
            if lam == baseline:
                continue
            seeds = sorted(set(grouped[lam]) & set(grouped[baseline]))
            a = [grouped[lam][s].test_auc for s in seeds]
            b = [grouped[baseline][s].test_auc for s in seeds]
            entry = dict(lam=lam, baseline=baseline, seeds=seeds,
                         mean_difference=float(np.mean(np.subtract(a, b))) if seeds else None)
            try:
                res = wilcoxon_signed_rank(a, b)
                entry.update(statistic=res.statistic, p_value=res.p_value, w_plus=res.w_plus,
                             w_minus=res.w_minus, n_used=res.n_used, method=res.method)
            except MetricError as exc:
                entry.update(error=str(exc))
            self.paired_tests.append(entry)

    def to_dict(self, with_timing=True):
        runs = []
        for r in self.runs:
            d = asdict(r)
            if not with_timing:
                d.pop("runtime_s")
            runs.append(d)
        return dict(runs=runs, summary=self.summary(), paired_tests=self.paired_tests, meta=self.meta)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls([RunResult(**r) for r in d["runs"]], d.get("paired_tests", []), d.get("meta", {}))


def confusion_matrix(true, pred, n):
    out = np.zeros((n, n), dtype=np.int64)
    np.add.at(out, (np.asarray(true), np.asarray(pred)), 1)
    return out


def evaluate_run(state, test_set, leakage_set=None):
    """Test AUC (target-class probability as score), adversary leakage and confusion matrices.

    ``leakage_set`` defaults to ``test_set``; its block IDs must lie in
    1..n_blocks of the model for the leakage number to be meaningful.
    """
    from .model import predict_batches
    from .train import leakage

    state.eval()
    _, cls_logp, _ = predict_batches(state, test_set.data)
    score = np.exp(cls_logp[:, 1].astype(np.float64))
    result = dict(
        auc=auc(score, test_set.labels),
        roc=roc_curve(score, test_set.labels),
        classifier_confusion=confusion_matrix(test_set.labels, cls_logp.argmax(axis=1), state.spec.n_classes),
    )
    target = test_set if leakage_set is None else leakage_set
    blocks = target.blocks - 1
    if len(target) and blocks.max() < state.spec.n_blocks:
        _, _, adv_logp = predict_batches(state, target.data)
        result["leakage"] = leakage(state, target)
        result["adversary_confusion"] = confusion_matrix(blocks, adv_logp.argmax(axis=1), state.spec.n_blocks)
    else:
        result["leakage"] = None
        result["adversary_confusion"] = None
    return result
