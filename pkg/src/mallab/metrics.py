"""Weighted AUC, GAUC and the grouped lift tables."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .errors import UndefinedMetricError


def weighted_auc(scores, labels, weights=None) -> float:
    """Weighted Mann-Whitney AUC with pair weight w_p * w_n and half credit for ties.

    O(M log M): sort scores, collapse tie groups, then each group's positive
    mass beats all negative mass in strictly lower groups.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels) > 0
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=float)
    if s.shape != y.shape or s.shape != w.shape:
        raise ValueError(f"scores, labels and weights must share a shape; got {s.shape}, {y.shape}, {w.shape}")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    wp = np.where(y, w, 0.0)
    wn = np.where(y, 0.0, w)
    tot_p, tot_n = wp.sum(), wn.sum()
    if tot_p == 0 or tot_n == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    uniq, inv = np.unique(s, return_inverse=True)
    gp = np.bincount(inv, weights=wp, minlength=len(uniq))
    gn = np.bincount(inv, weights=wn, minlength=len(uniq))
    neg_below = np.concatenate(([0.0], np.cumsum(gn)[:-1]))
    auc = float((gp * neg_below).sum() + 0.5 * (gp * gn).sum()) / (tot_p * tot_n)
    # summation order can overshoot the bounds by an ulp
    return min(1.0, max(0.0, auc))


def pairwise_auc(scores, labels, weights=None) -> float:
    """O(M^2) reference implementation of :func:`weighted_auc`."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels) > 0
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=float)
    sp, wp = s[y], w[y]
    sn, wn = s[~y], w[~y]
    if len(sp) == 0 or len(sn) == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    cmp = (sp[:, None] > sn[None, :]) + 0.5 * (sp[:, None] == sn[None, :])
    return float((wp[:, None] * wn[None, :] * cmp).sum() / (wp.sum() * wn.sum()))


@dataclass
class GaucResult:
    value: float
    users_counted: int
    users_skipped: int
    per_user: dict = field(default_factory=dict)  # user -> (clicks, auc)


def gauc_detail(scores, labels, weights, users, click_counts: dict | None = None) -> GaucResult:
    """sum_u clicks(u) * AUC_u / sum_u clicks(u) over users with both classes.

    clicks(u) defaults to the user's sample count; ``click_counts`` overrides it.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels) > 0
    w = np.asarray(weights, dtype=float)
    u = np.asarray(users)
    order = np.lexsort((np.arange(len(u)), u))
    u_sorted = u[order]
    starts = np.flatnonzero(np.r_[True, u_sorted[1:] != u_sorted[:-1]])
    ends = np.r_[starts[1:], len(u_sorted)]
    num = den = 0.0
    skipped = 0
    per_user = {}
    for a, b in zip(starts, ends):
        idx = order[a:b]
        yy = y[idx]
        if yy.all() or not yy.any():
            skipped += 1
            continue
        auc = weighted_auc(s[idx], yy, w[idx])
        n_click = b - a if click_counts is None else click_counts[u_sorted[a].item()]
        per_user[u_sorted[a].item()] = (int(n_click), auc)
        num += n_click * auc
        den += n_click
    if den == 0:
        raise UndefinedMetricError("GAUC needs at least one user with both classes")
    return GaucResult(num / den, len(per_user), skipped, per_user)


def gauc(scores, labels, weights, users, click_counts: dict | None = None) -> float:
    return gauc_detail(scores, labels, weights, users, click_counts).value


def gauc_from_groups(groups: dict, click_counts: dict | None = None) -> float:
    """GAUC from ``{user: (scores, labels, weights)}``."""
    s, y, w, u = [], [], [], []
    for user in sorted(groups):
        gs, gl, gw = groups[user]
        s.extend(gs)
        y.extend(gl)
        w.extend(gw)
        u.extend([user] * len(gs))
    return gauc(s, y, w, u, click_counts)


def spearman(x, y) -> float:
    return float(spearmanr(x, y).statistic)


# -------------------------------------------------------------- group lift


@dataclass
class GroupRow:
    key: object
    metric_a: float
    metric_b: float
    delta: float
    pos_growth: float
    n_samples: int

    def to_dict(self) -> dict:
        return {"group": self.key, "metric_base": self.metric_a, "metric_model": self.metric_b,
                "delta": self.delta, "pos_growth": self.pos_growth, "n_samples": self.n_samples}


@dataclass
class GroupTable:
    grouping: str
    metric: str
    rows: list
    dropped: int = 0

    def to_dict(self) -> dict:
        return {"grouping": self.grouping, "metric": self.metric, "dropped": self.dropped,
                "rows": [r.to_dict() for r in self.rows]}


def user_gain_buckets(user_gain: dict, edges=(0, 1, 2, 4)) -> dict:
    """Bucket index per user: gain 0 -> 0, 1 -> 1, 2-3 -> 2, >=4 -> 3 (for default edges)."""
    out = {}
    for u, g in user_gain.items():
        b = 0
        for i, e in enumerate(edges):
            if g >= e:
                b = i
        out[u] = b
    return out


def group_lift_report(
    scores_base,
    scores_model,
    labels,
    weights,
    users,
    group_of,
    grouping: str,
    pos_growth: dict | None = None,
) -> GroupTable:
    """Per-group metric under two models (GAUC for user groups, AUC for industries).

    ``group_of`` maps each sample to its group key (array aligned with the
    samples).  Groups whose metric is undefined are dropped and counted.
    """
    metric = "gauc" if grouping == "user" else "auc"
    sa = np.asarray(scores_base, dtype=float)
    sb = np.asarray(scores_model, dtype=float)
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=float)
    u = np.asarray(users)
    keys = np.asarray(group_of)
    rows, dropped = [], 0
    for key in sorted(set(keys.tolist())):
        m = keys == key
        try:
            if metric == "gauc":
                a = gauc(sa[m], y[m], w[m], u[m])
                b = gauc(sb[m], y[m], w[m], u[m])
            else:
                a = weighted_auc(sa[m], y[m], w[m])
                b = weighted_auc(sb[m], y[m], w[m])
        except UndefinedMetricError:
            dropped += 1
            continue
        growth = float(pos_growth.get(key, float("nan"))) if pos_growth else float("nan")
        rows.append(GroupRow(key, a, b, b - a, growth, int(m.sum())))
    if dropped:
        warnings.warn(f"{dropped} {grouping} group(s) dropped: metric undefined", stacklevel=2)
    return GroupTable(grouping, metric, rows, dropped)
