"""Performance and group-fairness metrics.

Fairness differences use the max-minus-min aggregation over groups. A group
cell whose rate is undefined (no positives for TPR, no negatives for FPR)
contributes a rate of 0 and is recorded as a flag instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import LengthMismatch, NoNegatives, NoPositives, SingleGroup


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    support: int


def _arrays(*arrays):
    arrs = [np.asarray(a) for a in arrays]
    n = len(arrs[0])
    if any(len(a) != n for a in arrs):
        raise LengthMismatch(f"lengths differ: {[len(a) for a in arrs]}")
    if n == 0:
        raise LengthMismatch("metrics need at least one sample")
    return arrs


def confusion_matrix(y_true, y_pred, K: int) -> np.ndarray:
    """``cm[t, p]`` counts samples with true label ``t`` predicted as ``p``."""
    yt, yp = _arrays(y_true, y_pred)
    yt = yt.astype(np.int64)
    yp = yp.astype(np.int64)
    return np.bincount(yt * K + yp, minlength=K * K).reshape(K, K)


def accuracy(y_true, y_pred) -> float:
    yt, yp = _arrays(y_true, y_pred)
    return int(np.count_nonzero(yt == yp)) / len(yt)


def _safe_div(a, b) -> float:
    return a / b if b else 0.0


def per_class_prf(y_true, y_pred, K: int) -> list[PRF]:
    cm = confusion_matrix(y_true, y_pred, K)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    out = []
    for c in range(K):
        p = _safe_div(int(tp[c]), int(predicted[c]))
        r = _safe_div(int(tp[c]), int(support[c]))
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        out.append(PRF(p, r, f, int(support[c])))
    return out


def macro_f1(y_true, y_pred, K: int) -> float:
    """Unweighted mean F1 over all K classes; absent classes count as 0."""
    return sum(m.f1 for m in per_class_prf(y_true, y_pred, K)) / K


@dataclass
class GroupRates:
    selection: dict
    tpr: dict
    fpr: dict
    flags: list[str] = field(default_factory=list)


def group_rates(y_true, y_pred, group, positive_class=1) -> GroupRates:
    yt, yp, g = _arrays(y_true, y_pred, group)
    pos_true = yt == positive_class
    pos_pred = yp == positive_class
    sel, tpr, fpr, flags = {}, {}, {}, []
    for gid in np.unique(g):
        m = g == gid
        sel[gid.item()] = np.count_nonzero(pos_pred & m) / np.count_nonzero(m)
        n_pos = np.count_nonzero(pos_true & m)
        n_neg = np.count_nonzero(~pos_true & m)
        tpr[gid.item()] = _safe_div(np.count_nonzero(pos_pred & pos_true & m), n_pos)
        fpr[gid.item()] = _safe_div(np.count_nonzero(pos_pred & ~pos_true & m), n_neg)
        if not n_pos:
            flags.append(f"group {gid.item()!r} has no true positives for class {positive_class}; TPR set to 0")
        if not n_neg:
            flags.append(f"group {gid.item()!r} has no true negatives for class {positive_class}; FPR set to 0")
    return GroupRates(sel, tpr, fpr, flags)


def _spread(values) -> float:
    values = list(values)
    return max(values) - min(values)


def demographic_parity_difference(y_pred, group, positive_class=1) -> float:
    """Largest gap in selection rate ``P(pred == positive_class | group)``."""
    yp, g = _arrays(y_pred, group)
    groups = np.unique(g)
    if len(groups) < 2:
        raise SingleGroup("demographic parity needs at least two groups")
    rates = [np.count_nonzero((yp == positive_class) & (g == gid)) / np.count_nonzero(g == gid)
             for gid in groups]
    return _spread(rates)


def equalized_odds_difference(y_true, y_pred, group, positive_class=1, flags: list | None = None) -> float:
    """``max(TPR gap, FPR gap)`` across groups.

    Undefined group rates count as 0; their descriptions are appended to
    ``flags`` when a list is passed.
    """
    yt, yp, g = _arrays(y_true, y_pred, group)
    if len(np.unique(g)) < 2:
        raise SingleGroup("equalized odds needs at least two groups")
    if not np.any(yt == positive_class):
        raise NoPositives(f"no samples with true label {positive_class}")
    if np.all(yt == positive_class):
        raise NoNegatives(f"every sample has true label {positive_class}")
    rates = group_rates(yt, yp, g, positive_class)
    if flags is not None:
        flags.extend(rates.flags)
    return max(_spread(rates.tpr.values()), _spread(rates.fpr.values()))


def multiclass_fairness(y_true, y_pred, group, K: int, aggregate: str = "max",
                        flags: list | None = None) -> tuple[float, float]:
    """One-vs-rest DPD and EOD per class, aggregated by ``max`` (default) or ``mean``.

    For K == 2 this is the binary pair with class 1 positive. Classes that never
    occur as a true label (or occur for every sample) have no defined EOD and
    are skipped for that metric.
    """
    yt, yp, g = _arrays(y_true, y_pred, group)
    if K == 2:
        return (demographic_parity_difference(yp, g, 1),
                equalized_odds_difference(yt, yp, g, 1, flags))
    reduce = {"max": max, "mean": lambda v: sum(v) / len(v)}[aggregate]
    dpds, eods = [], []
    for c in range(K):
        dpds.append(demographic_parity_difference(yp, g, c))
        if np.any(yt == c) and not np.all(yt == c):
            eods.append(equalized_odds_difference(yt, yp, g, c, flags))
        elif flags is not None:
            flags.append(f"class {c} has no one-vs-rest contrast in y_true; EOD skipped")
    return reduce(dpds), (reduce(eods) if eods else 0.0)


@dataclass
class FairnessReport:
    condition: str
    task: str
    accuracy: float = math.nan
    macro_f1: float = math.nan
    per_class: list = field(default_factory=list)
    dpd: float = math.nan
    eod: float = math.nan
    dpd_mean: float = math.nan
    eod_mean: float = math.nan
    group: str = "All"
    flags: list = field(default_factory=list)
    status: str = "ok"
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = [list(p) for p in self.per_class]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FairnessReport":
        d = dict(d)
        d["per_class"] = [PRF(float(p), float(r), float(f), int(s)) for p, r, f, s in d.get("per_class", [])]
        for k in ("accuracy", "macro_f1", "dpd", "eod", "dpd_mean", "eod_mean"):
            if d.get(k) is None:
                d[k] = math.nan
        return cls(**d)

    def __eq__(self, other):
        if not isinstance(other, FairnessReport):
            return NotImplemented
        a, b = self.to_dict(), other.to_dict()
        for k in a:
            x, y = a[k], b[k]
            if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
                continue
            if x != y:
                return False
        return True


def evaluate(y_true, y_pred, group, K: int, condition: str = "", task: str = "") -> FairnessReport:
    """Full metric suite for one set of predictions."""
    flags: list[str] = []
    prf = per_class_prf(y_true, y_pred, K)
    dpd, eod = multiclass_fairness(y_true, y_pred, group, K, "max", flags)
    if K == 2:
        dpd_mean, eod_mean = dpd, eod
    else:
        dpd_mean, eod_mean = multiclass_fairness(y_true, y_pred, group, K, "mean")
    return FairnessReport(
        condition=condition,
        task=task,
        accuracy=accuracy(y_true, y_pred),
        macro_f1=sum(m.f1 for m in prf) / K,
        per_class=prf,
        dpd=dpd,
        eod=eod,
        dpd_mean=dpd_mean,
        eod_mean=eod_mean,
        flags=sorted(set(flags)),
    )
