"""Holdout selection by controller score, rejection sweeps and agreement statistics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .controller import Controller
from .predictor import Predictor


def n_rejected(n: int, ratio: float) -> int:
    return int(math.floor(ratio * n + 1e-9))


def select_holdout(scores, ratio: float, ids=None) -> np.ndarray:
    """Positions retained after dropping the ``floor(ratio * n)`` lowest scores.

    Ties in score are broken by ``ids`` (default: position), lowest first.
    The result is in ascending position order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must lie in [0, 1)")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n = scores.size
    tiebreak = np.arange(n) if ids is None else np.asarray(ids)
    order = np.lexsort((tiebreak, scores))
    return np.sort(order[n_rejected(n, ratio) :])


def controller_scores(controller: Controller, images, state=None) -> np.ndarray:
    """Amenability scores for a batch; recurrent controllers score from ``state`` without advancing it."""
    with torch.no_grad():
        if controller.recurrent:
            if state is None:
                state_mem, ctx = controller.zero_memory(), None
            else:
                state_mem, ctx = state.memory, state.context
            return controller.score_with_memory(state_mem, images, ctx).double().numpy()
        return controller.score(images).double().numpy()


def bootstrap_std(values, rng: np.random.Generator, n_resamples: int = 1000) -> float:
    """St.D. of the mean over ``n_resamples`` bootstrap resamples."""
    values = np.asarray(values, dtype=np.float64)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    return float(values[idx].mean(axis=1).std(ddof=1))


def subject_std(values, subjects) -> float:
    """St.D. across subjects of per-subject mean performance."""
    values = np.asarray(values, dtype=np.float64)
    subjects = np.asarray(subjects)
    means = [values[subjects == s].mean() for s in np.unique(subjects)]
    return float(np.std(means, ddof=1)) if len(means) > 1 else 0.0


@dataclass
class RejectionSweepResult:
    ratios: list[float] = field(default_factory=list)
    metric_mean: list[float] = field(default_factory=list)
    metric_std: list[float] = field(default_factory=list)
    n_retained: list[int] = field(default_factory=list)

    def best_ratio(self) -> float:
        return self.ratios[int(np.argmax(self.metric_mean))]

    def rows(self) -> list[dict]:
        return [
            {"ratio": r, "metric_mean": m, "metric_std": s, "n_retained": n}
            for r, m, s, n in zip(self.ratios, self.metric_mean, self.metric_std, self.n_retained)
        ]


def sweep_from_scores(
    scores,
    performance,
    ratios,
    *,
    subjects=None,
    rng: np.random.Generator | None = None,
    n_resamples: int = 1000,
) -> RejectionSweepResult:
    """Mean and spread of per-sample ``performance`` over each retained set.

    Spread is the subject-level St.D. when ``subjects`` is given, otherwise
    a bootstrap St.D. of the mean.
    """
    ratios = [float(r) for r in ratios]
    if ratios != sorted(ratios):
        raise ValueError("ratios must be sorted ascending")
    performance = np.asarray(performance, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    out = RejectionSweepResult()
    for r in ratios:
        keep = select_holdout(scores, r)
        if keep.size < 2:
            warnings.warn(f"rejection ratio {r} leaves {keep.size} samples; skipped")
            continue
        vals = performance[keep]
        spread = subject_std(vals, np.asarray(subjects)[keep]) if subjects is not None else bootstrap_std(vals, rng, n_resamples)
        out.ratios.append(r)
        out.metric_mean.append(float(vals.mean()))
        out.metric_std.append(spread)
        out.n_retained.append(int(keep.size))
    return out


def rejection_sweep(
    controller: Controller,
    predictor: Predictor,
    images,
    labels,
    ratios,
    *,
    state=None,
    subjects=None,
    rng=None,
    n_resamples: int = 1000,
) -> RejectionSweepResult:
    scores = controller_scores(controller, images, state)
    performance = 1.0 - predictor.evaluate_metric(images, labels)
    return sweep_from_scores(scores, performance, ratios, subjects=subjects, rng=rng, n_resamples=n_resamples)


def selected_performance(scores, performance, ratio: float) -> float:
    keep = select_holdout(scores, ratio)
    return float(np.asarray(performance, dtype=np.float64)[keep].mean())


# ---------------------------------------------------------------------------
# agreement with oracle amenability labels


def cohen_kappa(counts) -> float:
    """Cohen's kappa of a square agreement table; NaN when chance agreement is 1."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    p_o = np.trace(counts) / n
    p_e = float(np.dot(counts.sum(axis=1) / n, counts.sum(axis=0) / n))
    if p_e >= 1.0:
        return float("nan")
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class ContingencyTable:
    """Rows: controller (low, high); columns: oracle (low, high)."""

    counts: np.ndarray
    kappa: float
    accuracy: float
    precision: float
    recall: float
    kappa_defined: bool = True

    def to_json(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "kappa": None if not self.kappa_defined else self.kappa,
            "kappa_defined": self.kappa_defined,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
        }


def table_from_counts(counts) -> ContingencyTable:
    counts = np.asarray(counts, dtype=np.int64)
    tp, fp = counts[0, 0], counts[0, 1]
    fn = counts[1, 0]
    n = counts.sum()
    oracle_one_class = counts[:, 0].sum() in (0, n)
    kappa = cohen_kappa(counts)
    defined = not oracle_one_class and math.isfinite(kappa)
    return ContingencyTable(
        counts=counts,
        kappa=kappa if defined else float("nan"),
        accuracy=float(np.trace(counts) / n),
        precision=float(tp / (tp + fp)) if tp + fp else float("nan"),
        recall=float(tp / (tp + fn)) if tp + fn else float("nan"),
        kappa_defined=defined,
    )


def contingency(scores, oracle_flags, ratio: float) -> ContingencyTable:
    """Compare the samples rejected at ``ratio`` with oracle low-amenability flags.

    ``oracle_flags`` is True for amenable (high) samples.  Low amenability is
    the positive class for precision and recall.
    """
    oracle_high = np.asarray(oracle_flags, dtype=bool)
    if oracle_high.size != np.size(scores):
        raise ValueError("need an oracle flag for every sample")
    ctrl_high = np.zeros(oracle_high.size, dtype=bool)
    ctrl_high[select_holdout(scores, ratio)] = True
    counts = np.array(
        [
            [np.sum(~ctrl_high & ~oracle_high), np.sum(~ctrl_high & oracle_high)],
            [np.sum(ctrl_high & ~oracle_high), np.sum(ctrl_high & oracle_high)],
        ]
    )
    return table_from_counts(counts)


def auroc(scores, positive) -> float:
    """Area under the ROC curve for ``scores`` ranking ``positive`` samples first (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class TTestResult:
    t_statistic: float
    p_value: float
    degenerate: bool = False


def paired_t_test(metric_a, metric_b) -> TTestResult:
    """Two-sided paired t-test on per-unit values."""
    a = np.asarray(metric_a, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length samples of at least two pairs")
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0.0:
        mean = d.mean()
        if mean == 0.0:
            return TTestResult(0.0, 1.0, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, degenerate=True)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(float(t), float(p))
