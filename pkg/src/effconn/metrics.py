"""Edge-selection scores, estimation error and replicate aggregation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np


@dataclass(frozen=True)
class SelectionScore:
    fpr: float
    fnr: float
    accuracy: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return asdict(self)


def score_selection(selected, truth) -> SelectionScore:
    """Confusion-matrix rates of a binary edge selection against the true edge set.

    Degenerate denominators: FPR (FNR) is 0 when there are no true negatives
    (positives); F1 is 1 when both the truth and the selection are empty.
    """
    sel = np.asarray(selected).astype(bool).ravel()
    tru = np.asarray(truth).astype(bool).ravel()
    if sel.shape != tru.shape:
        raise ValueError(f"length mismatch: {sel.size} selected vs {tru.size} true")
    tp = int(np.sum(sel & tru))
    fp = int(np.sum(sel & ~tru))
    tn = int(np.sum(~sel & ~tru))
    fn = int(np.sum(~sel & tru))
    fpr = fp / (fp + tn) if fp + tn else 0.0
    fnr = fn / (fn + tp) if fn + tp else 0.0
    denom = 2 * tp + fp + fn
    if denom == 0:
        f1 = 1.0 if tru.sum() == 0 else 0.0
    else:
        f1 = 2 * tp / denom
    return SelectionScore(fpr=fpr, fnr=fnr, accuracy=(tp + tn) / sel.size, f1=f1,
                          tp=tp, fp=fp, tn=tn, fn=fn)


def mse(estimate, truth) -> float:
    est = np.asarray(estimate, dtype=float).ravel()
    tru = np.asarray(truth, dtype=float).ravel()
    if est.shape != tru.shape:
        raise ValueError(f"length mismatch: {est.size} vs {tru.size}")
    d = est - tru
    return float(d @ d / d.size)


def aggregate(scores) -> dict:
    """Fieldwise mean and sample standard deviation of SelectionScores or dicts."""
    scores = list(scores)
    if not scores:
        raise ValueError("cannot aggregate an empty list of scores")
    rows = [s.as_dict() if isinstance(s, SelectionScore) else dict(s) for s in scores]
    out = {}
    for key in rows[0]:
        vals = np.array([r[key] for r in rows], dtype=float)
        out[key] = {"mean": float(vals.mean()),
                    "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    return out


SCORE_FIELDS = [f.name for f in fields(SelectionScore)]
