"""Bias mitigation: random oversampling, inverse-frequency class weights and
equalized-odds post-processing with per-group randomized thresholds.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Record
from .errors import (
    DataError,
    EmptyClassList,
    GroupMissingClass,
    LengthMismatch,
    MissingClass,
    UnknownGroup,
)

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Pre-training: oversampling


def _label_fn(target_label: str):
    if target_label == "gender":
        return lambda r: r.gender_id
    if target_label == "profession":
        return lambda r: r.profession_id
    if target_label == "joint":
        return lambda r: (r.gender_id, r.profession_id)
    raise ValueError(f"unknown target label {target_label!r}")


def oversample(train: Sequence[Record], target_label: str, seed: int = 0,
               num_classes: int | None = None) -> list[Record]:
    """Duplicate minority-class records until every class reaches the majority count.

    Duplicates are drawn uniformly with replacement within each class. The
    input records come first, in their original order, followed by the added
    copies grouped by class. ``target_label`` is ``"gender"``, ``"profession"``
    or ``"joint"`` (the gender x profession cell). When ``num_classes`` is given,
    every class id below it must be present.
    """
    if not train:
        raise EmptyClassList("cannot oversample an empty record list")
    key = _label_fn(target_label)
    members: dict = defaultdict(list)
    for i, r in enumerate(train):
        members[key(r)].append(i)
    if num_classes is not None and target_label != "joint":
        absent = sorted(set(range(num_classes)) - set(members))
        if absent:
            raise MissingClass(f"classes {absent} have no {target_label} records in the training split")
    majority = max(len(v) for v in members.values())
    rng = np.random.default_rng(seed)
    out = list(train)
    for label in sorted(members):
        idx = members[label]
        deficit = majority - len(idx)
        if deficit > 0:
            picks = rng.integers(0, len(idx), size=deficit)
            out.extend(train[idx[j]] for j in picks)
    return out


# --------------------------------------------------------------------------
# In-training: class weights


def compute_class_weights(labels: Sequence[int], K: int) -> np.ndarray:
    """``weights[c] = N / (K * n_c)``; balanced labels give all ones."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=K)[:K]
    if len(labels) == 0 or (counts == 0).any():
        raise MissingClass(f"classes {np.flatnonzero(counts == 0).tolist()} absent from labels")
    return len(labels) / (K * counts.astype(np.float64))


# --------------------------------------------------------------------------
# Post-training: equalized odds


@dataclass
class GroupedScores:
    scores: np.ndarray
    y_true: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.y_true = np.asarray(self.y_true).astype(np.int64)
        self.group = np.asarray(self.group)
        if not (len(self.scores) == len(self.y_true) == len(self.group)):
            raise LengthMismatch("scores, y_true and group must have equal length")
        if not np.isfinite(self.scores).all():
            raise DataError("scores must be finite")


@dataclass
class GroupThreshold:
    """Randomized threshold rule for one group.

    With probability ``(1 - p_random) * mix`` the sample is thresholded at
    ``t_lo``, with ``(1 - p_random) * (1 - mix)`` at ``t_hi``; with
    ``p_random`` the prediction ignores the score and is positive with
    probability ``random_rate``. A positive prediction means ``score >= threshold``.
    """

    t_lo: float
    t_hi: float
    mix: float
    p_random: float = 0.0
    random_rate: float = 0.0

    def cutpoints(self) -> tuple[float, float, float]:
        keep = 1.0 - self.p_random
        return keep * self.mix, keep, keep + self.p_random * self.random_rate


@dataclass
class EOPolicy:
    groups: dict
    target_tpr: float
    target_fpr: float
    positive_class: int = 1
    flags: list = field(default_factory=list)

    @property
    def target_point(self) -> tuple[float, float]:
        return self.target_tpr, self.target_fpr

    def to_dict(self) -> dict:
        return {
            "positive_class": self.positive_class,
            "target_point": {"tpr": self.target_tpr, "fpr": self.target_fpr},
            "groups": [
                {"group": _plain(g), "t_lo": _enc(t.t_lo), "t_hi": _enc(t.t_hi), "mix": t.mix,
                 "p_random": t.p_random, "random_rate": t.random_rate}
                for g, t in self.groups.items()
            ],
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EOPolicy":
        groups = {
            e["group"]: GroupThreshold(_dec(e["t_lo"]), _dec(e["t_hi"]), e["mix"],
                                       e.get("p_random", 0.0), e.get("random_rate", 0.0))
            for e in d["groups"]
        }
        return cls(groups, d["target_point"]["tpr"], d["target_point"]["fpr"],
                   d.get("positive_class", 1), list(d.get("flags", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EOPolicy":
        return cls.from_dict(json.loads(text))


def _plain(x):
    return x.item() if isinstance(x, np.generic) else x


def _enc(t: float):
    return ("inf" if t > 0 else "-inf") if math.isinf(t) else t


def _dec(t) -> float:
    return float(t)


@dataclass
class _Roc:
    """ROC points of a score-threshold rule, with exact integer counts."""

    thresholds: list  # descending; the first is +inf (predict nothing)
    tp: list
    fp: list
    n_pos: int
    n_neg: int


def roc_points(scores, y) -> _Roc:
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    ys = y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    # last index of each run of equal scores: predicting score >= s[i]
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    return _Roc(
        thresholds=[math.inf] + s[last].tolist(),
        tp=[0] + tp[last].tolist(),
        fp=[0] + fp[last].tolist(),
        n_pos=int(ys.sum()),
        n_neg=int((~ys).sum()),
    )


@dataclass
class _Hull:
    """Upper concave ROC hull as a function FPR -> TPR."""

    xs: np.ndarray
    ys: np.ndarray
    thresholds: list


def upper_hull(roc: _Roc) -> _Hull:
    pts = list(zip(roc.fp, roc.tp, roc.thresholds))
    hull: list = []
    for p in pts:
        while len(hull) >= 2:
            (ox, oy, _), (ax, ay, _) = hull[-2], hull[-1]
            if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    # keep the highest vertex for each FPR so the hull is a function of FPR
    dedup: list = []
    for v in hull:
        if dedup and dedup[-1][0] == v[0]:
            dedup[-1] = v
        else:
            dedup.append(v)
    xs = np.array([v[0] / roc.n_neg for v in dedup])
    ys = np.array([v[1] / roc.n_pos for v in dedup])
    return _Hull(xs, ys, [v[2] for v in dedup])


def _segment(hull: _Hull, x: float) -> tuple[int, float]:
    """Index ``i`` and weight ``a`` with ``x = (1-a) xs[i] + a xs[i+1]``."""
    i = int(np.searchsorted(hull.xs, x, side="right")) - 1
    i = min(max(i, 0), len(hull.xs) - 1)
    if hull.xs[i] == x or i == len(hull.xs) - 1:
        return i, 0.0
    a = (x - hull.xs[i]) / (hull.xs[i + 1] - hull.xs[i])
    return i, float(a)


def hull_value(hull: _Hull, x: float) -> float:
    i, a = _segment(hull, x)
    if a == 0.0:
        return float(hull.ys[i])
    return float((1 - a) * hull.ys[i] + a * hull.ys[i + 1])


def in_hull_region(hull: _Hull, fpr: float, tpr: float, tol: float = 1e-9) -> bool:
    """Whether (fpr, tpr) is achievable by randomizing thresholds: between the
    chance diagonal and the upper hull."""
    return -tol <= fpr <= 1 + tol and fpr - tol <= tpr <= hull_value(hull, min(max(fpr, 0.0), 1.0)) + tol


def _envelope_candidates(hulls: list[_Hull], grid_resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Candidate FPR values: every hull vertex, every crossing between two
    hulls, plus an even grid. Returns ``(exact, grid)`` arrays."""
    xs = np.unique(np.concatenate([h.xs for h in hulls] + [np.array([0.0, 1.0])]))
    exact = list(xs)
    for a, b in zip(xs[:-1], xs[1:]):
        ya = [hull_value(h, a) for h in hulls]
        yb = [hull_value(h, b) for h in hulls]
        slopes = [(q - p) / (b - a) for p, q in zip(ya, yb)]
        for i in range(len(hulls)):
            for j in range(i + 1, len(hulls)):
                ds = slopes[i] - slopes[j]
                if ds != 0:
                    x = a + (ya[j] - ya[i]) / ds
                    if a < x < b:
                        exact.append(x)
    grid = np.linspace(0.0, 1.0, max(grid_resolution, 2))
    return np.array(sorted(set(exact))), grid


def _realize(hull: _Hull, fpr: float, tpr: float) -> GroupThreshold:
    i, a = _segment(hull, fpr)
    if a == 0.0:
        t_lo = t_hi = hull.thresholds[i]
        mix, h = 1.0, float(hull.ys[i])
    else:
        t_lo, t_hi = hull.thresholds[i + 1], hull.thresholds[i]
        mix, h = a, float((1 - a) * hull.ys[i] + a * hull.ys[i + 1])
    p_random = 0.0
    if h - tpr > 1e-12 and h > fpr:
        p_random = min(1.0, (h - tpr) / (h - fpr))
    return GroupThreshold(t_lo, t_hi, mix, p_random, fpr if p_random > 0 else 0.0)


def fit_eo_policy(scores, y_true=None, group=None, grid_resolution: int = 101,
                  positive_class: int = 1) -> EOPolicy:
    """Fit per-group randomized thresholds that share one (TPR, FPR) point.

    Every group's achievable region is the area under its upper ROC hull and
    above the chance diagonal; the common feasible frontier is the pointwise
    minimum of the hulls. The target on that frontier maximises expected
    accuracy on the fitting data, i.e. ``P * TPR - N * FPR`` with pooled
    positive and negative counts. Candidates are the frontier's breakpoints
    plus a ``grid_resolution``-point FPR grid.

    In a group whose hull lies above the target, the hull point at the target
    FPR is mixed with score-independent predictions at rate FPR* (a point on
    the diagonal) so that the group's TPR drops to exactly TPR*.
    """
    data = scores if isinstance(scores, GroupedScores) else GroupedScores(scores, y_true, group)
    y = data.y_true == positive_class
    flags = []
    hulls = {}
    for g in np.unique(data.group):
        m = data.group == g
        if not y[m].any() or y[m].all():
            raise GroupMissingClass(
                f"group {_plain(g)!r} needs at least one positive and one negative example")
        if np.ptp(data.scores[m]) == 0:
            msg = f"group {_plain(g)!r} has identical scores; only chance-level operating points"
            warnings.warn(msg, stacklevel=2)
            flags.append(msg)
        hulls[_plain(g)] = upper_hull(roc_points(data.scores[m], y[m]))
    if not hulls:
        raise GroupMissingClass("no groups to fit")

    n_pos, n_neg = int(y.sum()), int((~y).sum())
    hull_list = list(hulls.values())
    exact, grid = _envelope_candidates(hull_list, grid_resolution)

    def frontier(x):
        return min(hull_value(h, x) for h in hull_list)

    def objective(x):
        return n_pos * frontier(x) - n_neg * x

    best_x = max(exact, key=lambda x: (objective(x), -x))
    best = objective(best_x)
    for x in grid:
        # grid points sit on frontier segments; they only win by a real margin
        if objective(x) > best + 1e-9:
            best_x, best = x, objective(x)
    target_fpr = float(best_x)
    target_tpr = frontier(target_fpr)

    groups = {g: _realize(h, target_fpr, target_tpr) for g, h in hulls.items()}
    return EOPolicy(groups, target_tpr, target_fpr, positive_class, flags)


def _rate_at(scores, y, t) -> tuple[float, float]:
    pred = scores >= t
    return float(np.count_nonzero(pred & y) / np.count_nonzero(y)), \
        float(np.count_nonzero(pred & ~y) / np.count_nonzero(~y))


def policy_operating_points(policy: EOPolicy, scores, y_true, group) -> dict:
    """Expected (TPR, FPR) of the randomized rule per group, computed exactly
    from the mixture weights rather than by sampling."""
    data = GroupedScores(scores, y_true, group)
    y = data.y_true == policy.positive_class
    out = {}
    for g in np.unique(data.group):
        key = _plain(g)
        if key not in policy.groups:
            raise UnknownGroup(f"group {key!r} not covered by policy")
        t = policy.groups[key]
        m = data.group == g
        s, yy = data.scores[m], y[m]
        lo, hi = _rate_at(s, yy, t.t_lo), _rate_at(s, yy, t.t_hi)
        keep = 1.0 - t.p_random
        out[key] = tuple(keep * (t.mix * a + (1 - t.mix) * b) + t.p_random * t.random_rate
                         for a, b in zip(lo, hi))
    return out


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = (1 << 64) - 1


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def uniform_stream(seed: int, n: int, stream: int = 0, offset: int = 0) -> np.ndarray:
    """Counter-based uniforms in [0, 1): draw ``i`` depends only on
    ``(seed, stream, offset + i)`` via SplitMix64, never on iteration order."""
    with np.errstate(over="ignore"):
        key = _splitmix64(np.array([(seed ^ (stream * 0xD1B54A32D192ED03)) & _MASK64], dtype=np.uint64))
        counters = np.arange(offset, offset + n, dtype=np.uint64)
        z = _splitmix64(key + counters * _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def draw_thresholds(policy: EOPolicy, group, u: np.ndarray) -> np.ndarray:
    """Per-sample thresholds; ``-inf`` forces a positive, ``+inf`` a negative."""
    group = np.asarray(group)
    thr = np.empty(len(group))
    for g in np.unique(group):
        key = _plain(g)
        if key not in policy.groups:
            raise UnknownGroup(f"group {key!r} not covered by policy")
        t = policy.groups[key]
        m = group == g
        c_lo, c_hi, c_pos = t.cutpoints()
        ug = u[m]
        thr[m] = np.where(ug < c_lo, t.t_lo,
                          np.where(ug < c_hi, t.t_hi,
                                   np.where(ug < c_pos, -math.inf, math.inf)))
    return thr


def apply_eo_policy(policy: EOPolicy, scores, group, seed: int = 0) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    group = np.asarray(group)
    if len(scores) != len(group):
        raise LengthMismatch("scores and group must have equal length")
    u = uniform_stream(seed, len(scores))
    return (scores >= draw_thresholds(policy, group, u)).astype(np.int64)


# --------------------------------------------------------------------------
# Multiclass: one-vs-rest policies recombined by margin argmax


@dataclass
class MulticlassEOPolicy:
    policies: list
    num_classes: int

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "policies": [p.to_dict() for p in self.policies]}

    @classmethod
    def from_dict(cls, d: dict) -> "MulticlassEOPolicy":
        return cls([EOPolicy.from_dict(p) for p in d["policies"]], d["num_classes"])


def _pooled_threshold(scores, y) -> float:
    if not y.any() or y.all():
        return 0.0
    roc = roc_points(scores, y)
    gains = [tp * 1 - fp for tp, fp in zip(roc.tp, roc.fp)]
    return roc.thresholds[int(np.argmax(gains))]


def fit_eo_policy_multiclass(scores, y_true, group, grid_resolution: int = 101) -> MulticlassEOPolicy:
    """One binary policy per class on ``(scores[:, c], y == c, group)``.

    A (class, group) cell without both positives and negatives gets a
    pass-through rule: the deterministic threshold that maximises pooled
    accuracy for that class (0 if the class itself is degenerate), and a flag.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true).astype(np.int64)
    group = np.asarray(group)
    n, K = scores.shape
    if K == 2:
        p1 = fit_eo_policy(scores[:, 1], y_true, group, grid_resolution, positive_class=1)
        p0 = EOPolicy({g: GroupThreshold(-math.inf, -math.inf, 1.0) for g in p1.groups}, 1.0, 1.0, 0,
                      ["binary problem: decided by the class-1 policy"])
        return MulticlassEOPolicy([p0, p1], K)
    policies = []
    for c in range(K):
        yc = y_true == c
        s = scores[:, c]
        ok = np.zeros(len(group), dtype=bool)
        bad = []
        for g in np.unique(group):
            m = group == g
            if yc[m].any() and not yc[m].all():
                ok |= m
            else:
                bad.append(_plain(g))
        flags = []
        if ok.any():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                pol = fit_eo_policy(s[ok], yc[ok], group[ok], grid_resolution, positive_class=1)
            pol.positive_class = c
            flags.extend(pol.flags)
        else:
            pol = EOPolicy({}, math.nan, math.nan, c)
        if bad:
            t = _pooled_threshold(s, yc)
            for g in bad:
                pol.groups[g] = GroupThreshold(t, t, 1.0)
            flags.append(f"class {c}: groups {bad} lack positives or negatives; pass-through threshold {t!r}")
        pol.flags = flags
        policies.append(pol)
    return MulticlassEOPolicy(policies, K)


def apply_eo_policy_multiclass(policy: MulticlassEOPolicy, scores, group, seed: int = 0) -> np.ndarray:
    """Final label = argmax over classes of ``score_c - threshold_c``, lowest id
    on ties.

    Scores are probabilities, so a forced positive (threshold ``-inf``) is
    equivalent to threshold 0 and a forced negative (``+inf``) to a threshold
    just above 1; margins use those finite equivalents so that forced decisions
    of several classes stay comparable instead of all tying at infinity.
    """
    scores = np.asarray(scores, dtype=np.float64)
    group = np.asarray(group)
    n, K = scores.shape
    if K != policy.num_classes:
        raise LengthMismatch(f"score matrix has {K} columns, policy expects {policy.num_classes}")
    if K == 2:
        return apply_eo_policy(policy.policies[1], scores[:, 1], group, seed)
    margins = np.empty((n, K))
    for c, pol in enumerate(policy.policies):
        u = uniform_stream(seed, n, stream=c)
        thr = np.clip(draw_thresholds(pol, group, u), 0.0, _ABOVE_ONE)
        margins[:, c] = scores[:, c] - thr
    return np.argmax(margins, axis=1)


_ABOVE_ONE = float(np.nextafter(1.0, 2.0))
