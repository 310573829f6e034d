"""Per-iteration competition between the two students.

Both students are scored on the labeled portion of the current mini-batch
using predictions already computed for the supervised loss, so the
comparison adds no extra forward passes.  Each configured metric is averaged
over the batch and oriented so that higher is better; the student winning
strictly more metrics is the overall winner.  Ties fall back to the first
configured metric, then to the previous iteration's winner, then to
student 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import metrics

METRIC_NAMES = ("dice", "ce", "jac", "hd95", "asd")
_ALIASES = {"jaccard": "jac", "95hd": "hd95"}
_HIGHER_BETTER = {"dice", "jac"}


def canonical_metric(name: str) -> str:
    key = _ALIASES.get(name.strip().lower(), name.strip().lower())
    if key not in METRIC_NAMES:
        raise ValueError(f"unknown competition metric {name!r}; choose from {METRIC_NAMES}")
    return key


@dataclass(frozen=True)
class CompetitionConfig:
    """Ordered metric list; list order fixes the tie-break priority."""

    metrics: tuple[str, ...] = ("dice",)
    combination: str = "per_metric_wins"

    def __post_init__(self):
        if not self.metrics:
            raise ValueError("competition needs at least one metric")
        canon = tuple(canonical_metric(m) for m in self.metrics)
        if len(set(canon)) != len(canon):
            raise ValueError(f"duplicate competition metrics in {self.metrics}")
        if self.combination != "per_metric_wins":
            raise ValueError(f"unknown combination rule {self.combination!r}")
        object.__setattr__(self, "metrics", canon)


@dataclass
class CompetitionOutcome:
    winner: int
    loser: int
    per_metric_scores: list[tuple[str, float, float]] = field(default_factory=list)
    tie_broken_by: Optional[str] = None


def orient(metric: str, value: Optional[float]) -> float:
    """Map a raw metric value to a higher-is-better score.

    Undefined values (None, from empty-mask surface distances) become -inf:
    a student that cannot produce a surface loses that metric outright.
    """
    if value is None or math.isnan(value):
        return -math.inf
    return value if canonical_metric(metric) in _HIGHER_BETTER else -value


def _batch_metric(metric: str, probs: np.ndarray, truths: np.ndarray) -> float:
    """Batch-mean raw metric value; NaN when any item is undefined."""
    if metric == "ce":
        return metrics.ce_metric(probs, truths)
    preds = probs.argmax(axis=1).astype(bool)
    vals = []
    for pred, truth in zip(preds, truths):
        if metric == "dice":
            vals.append(metrics.dice_score(pred, truth))
        elif metric == "jac":
            vals.append(metrics.jaccard_score(pred, truth))
        else:
            try:
                vals.append(metrics.hd95(pred, truth) if metric == "hd95"
                            else metrics.asd(pred, truth))
            except metrics.UndefinedMetric:
                return math.nan
    return float(np.mean(vals))


def compete(probs_s1: np.ndarray, probs_s2: np.ndarray, truths: np.ndarray,
            config: CompetitionConfig, previous_winner: Optional[int] = None,
            truths_s2: Optional[np.ndarray] = None) -> CompetitionOutcome:
    """Score both students on the labeled batch and declare winner and loser.

    ``truths_s2`` covers the case where each student saw its own augmented
    view of the labeled images (so ground truth differs geometrically); it
    defaults to ``truths``.
    """
    p1, p2 = np.asarray(probs_s1), np.asarray(probs_s2)
    t1 = np.asarray(truths)
    t2 = t1 if truths_s2 is None else np.asarray(truths_s2)
    if t1.ndim == 2:
        t1 = t1[None]
    if t2.ndim == 2:
        t2 = t2[None]
    if p1.ndim != 4 or p2.ndim != 4 or t1.shape[0] == 0:
        raise ValueError("compete requires rank-4 probabilities and a non-empty labeled batch")

    rows: list[tuple[str, float, float]] = []
    oriented: list[tuple[float, float]] = []
    wins1 = wins2 = 0
    for m in config.metrics:
        v1 = _batch_metric(m, p1, t1)
        v2 = _batch_metric(m, p2, t2)
        o1, o2 = orient(m, v1), orient(m, v2)
        rows.append((m, v1, v2))
        oriented.append((o1, o2))
        if o1 > o2:
            wins1 += 1
        elif o2 > o1:
            wins2 += 1

    tie_rule = None
    if wins1 > wins2:
        winner = 1
    elif wins2 > wins1:
        winner = 2
    else:
        o1, o2 = oriented[0]
        if o1 > o2:
            winner, tie_rule = 1, "first_metric"
        elif o2 > o1:
            winner, tie_rule = 2, "first_metric"
        elif previous_winner in (1, 2):
            winner, tie_rule = previous_winner, "previous_winner"
        else:
            winner, tie_rule = 1, "default_student1"

    return CompetitionOutcome(winner=winner, loser=3 - winner,
                              per_metric_scores=rows, tie_broken_by=tie_rule)
