"""Discrimination metrics, rank tests and group-stratified evaluation reports."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

GROUP_DIMENSIONS = ("gender", "age_band", "censorship", "grade", "time_bin", "magnification")
AGE_BANDS = ("<40", "40-60", ">60")


def _midranks(x):
    return stats.rankdata(np.asarray(x, dtype=np.float64), method="average")


def binary_auc(scores, positive):
    """Mann-Whitney estimate of ROC AUC; ties score one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n1, n0 = positive.sum(), (~positive).sum()
    if n1 == 0 or n0 == 0:
        raise ValueError("need both positive and negative cases")
    r = _midranks(scores)
    return float((r[positive].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def auc_ovr(probs, labels):
    """Macro one-vs-rest AUC over the classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim == 1:
        probs = np.stack([1 - probs, probs], axis=1)
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError("AUC needs at least two classes present")
    return float(np.mean([binary_auc(probs[:, k], labels == k) for k in present]))


def c_index(risks, times, events):
    """Harrell's concordance; returns None when no pair is comparable.

    A pair (i, j) is comparable when t_i < t_j and case i had the event; it
    is concordant when risk_i > risk_j, and ties in risk count one half.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not len(risks) == len(times) == len(events):
        raise ValueError("risks, times and events must align")
    earlier = (times[:, None] < times[None, :]) & events[:, None]
    n = earlier.sum()
    if n == 0:
        return None
    diff = risks[:, None] - risks[None, :]
    score = (diff > 0) + 0.5 * (diff == 0)
    return float(score[earlier].sum() / n)


def spearman(x, y):
    """(rho, two-sided p) from the Pearson correlation of midranks."""
    x, y = np.asarray(x, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()
    n = len(x)
    if n != len(y):
        raise ValueError("x and y must have equal length")
    if n < 3:
        raise ValueError("spearman needs n >= 3")
    rx, ry = _midranks(x), _midranks(y)
    if rx.std() == 0 or ry.std() == 0:
        raise ValueError("zero variance input")
    rho = float(np.corrcoef(rx, ry)[0, 1])
    rho = min(1.0, max(-1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1 - rho * rho))
    return rho, float(2 * stats.t.sf(abs(t), n - 2))


def mae(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal shape")
    return float(np.mean(np.abs(x - y)))


def _rank_sum_exact(ranks, na):
    n = len(ranks)
    expected = na * (n + 1) / 2
    observed = abs(ranks[:na].sum() - expected)
    sums = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(n), na)])
    return float(np.mean(np.abs(sums - expected) >= observed - 1e-9))


def _rank_sum_normal(ranks, na, nb):
    n = na + nb
    u = ranks[:na].sum() - na * (na + 1) / 2
    mu = na * nb / 2
    _, counts = np.unique(ranks, return_counts=True)
    tie = (counts ** 3 - counts).sum() / (n * (n - 1))
    var = na * nb / 12 * ((n + 1) - tie)
    if var <= 0:
        return 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2 * stats.norm.sf(z)))


def wilcoxon_rank_sum(a, b, method="auto"):
    """Two-sided rank-sum p-value.

    ``method`` "exact" enumerates every split of the pooled midranks,
    "normal" uses the tie-corrected normal approximation with continuity
    correction, "auto" picks exact when n_a + n_b <= 12.
    """
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    ranks = _midranks(np.concatenate([a, b]))
    if method == "auto":
        method = "exact" if len(a) + len(b) <= 12 else "normal"
    if method == "exact":
        return _rank_sum_exact(ranks, len(a))
    if method == "normal":
        return _rank_sum_normal(ranks, len(a), len(b))
    raise ValueError(f"unknown method {method!r}")


def unpaired_t_test(a, b):
    """Welch's two-sided t-test p-value."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0:
        if a.mean() == b.mean():
            raise ValueError("both samples have zero variance")
        raise ValueError("zero variance with different means")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1)) if va * vb > 0 else (
        len(a) - 1 if vb == 0 else len(b) - 1)
    return float(2 * stats.t.sf(abs(t), df))


# ---------------------------------------------------------------------------
# stratified reporting
# ---------------------------------------------------------------------------

def age_band(age):
    if age < 40:
        return "<40"
    if age <= 60:
        return "40-60"
    return ">60"


def group_keys(case):
    """(dimension, value) pairs for one case dict."""
    keys = []
    if "gender" in case:
        if case["gender"] not in ("female", "male"):
            raise ValueError(f"unknown gender {case['gender']!r}")
        keys.append(("gender", case["gender"]))
    if "age" in case:
        keys.append(("age_band", age_band(case["age"])))
    keys.append(("censorship", "censored" if case["censored"] else "uncensored"))
    keys.append(("grade", str(case["grade"])))
    keys.append(("time_bin", str(case["time_bin"])))
    if "magnification" in case:
        keys.append(("magnification", str(case["magnification"])))
    return keys


@dataclass
class ReportRow:
    dimension: str
    value: str
    n: int
    auc: float | None
    c_index: float | None
    grade_uncertainty: float | None
    risk_uncertainty: float | None
    grade_coverage: float | None
    risk_coverage: float | None


@dataclass
class EvalReport:
    rows: list

    def overall(self):
        return self.rows[0]

    def find(self, dimension, value):
        for r in self.rows:
            if r.dimension == dimension and r.value == value:
                return r
        return None

    def to_json(self):
        return json.dumps([asdict(r) for r in self.rows], indent=1)

    def to_csv(self):
        buf = io.StringIO()
        fields = list(ReportRow.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for r in self.rows:
            w.writerow(["" if getattr(r, f) is None else getattr(r, f) for f in fields])
        return buf.getvalue()


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _row(dimension, value, cases):
    probs = np.array([c["grade_probs"] for c in cases])
    grades = np.array([c["grade"] for c in cases])
    try:
        auc = auc_ovr(probs, grades)
    except ValueError:
        auc = None
    cidx = c_index([c["risk"] for c in cases], [c["time"] for c in cases],
                   [not c["censored"] for c in cases])
    g_cov = _mean_or_none([float(c["grade"] in c["grade_set"]) for c in cases if "grade_set" in c])
    r_cov = _mean_or_none([float(c["time_bin"] in c["risk_set"]) for c in cases if "risk_set" in c])
    return ReportRow(dimension, value, len(cases), auc, cidx,
                     _mean_or_none([c.get("grade_uncertainty") for c in cases]),
                     _mean_or_none([c.get("risk_uncertainty") for c in cases]), g_cov, r_cov)


def stratified_report(cases, dimensions=GROUP_DIMENSIONS):
    """Overall row followed by one row per (dimension, value) present.

    Each case is a dict with grade_probs, grade, risk, time, censored,
    time_bin and optionally gender, age, magnification, grade_set, risk_set,
    grade_uncertainty, risk_uncertainty.  Metrics that are undefined for a
    group (single class, no comparable pair) are reported as None.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("no cases to report")
    rows = [_row("overall", "all", cases)]
    groups = {}
    for c in cases:
        for key in group_keys(c):
            groups.setdefault(key, []).append(c)
    for dim in dimensions:
        values = sorted(v for d, v in groups if d == dim)
        for v in values:
            rows.append(_row(dim, v, groups[(dim, v)]))
    return EvalReport(rows)


def synthesis_report(synth, real, layout, names=None):
    """Spearman and MAE between synthesized and real profiles, per gene group and overall.

    Correlation is computed over all (case, gene) values of a group pooled.
    """
    synth = np.asarray(synth, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if synth.shape != real.shape or synth.shape[1] != layout.total:
        raise ValueError("synthesized and real profiles must both be (n, total genes)")
    names = names or [f"group{g}" for g in range(len(layout.sizes))]
    rows = []
    for g, name in enumerate(names):
        sl = layout.group_slice(g)
        rho, p = spearman(synth[:, sl], real[:, sl])
        rows.append({"group": name, "n_genes": layout.sizes[g], "spearman": rho, "p_value": p,
                     "mae": mae(synth[:, sl], real[:, sl])})
    rho, p = spearman(synth, real)
    rows.append({"group": "all", "n_genes": layout.total, "spearman": rho, "p_value": p,
                 "mae": mae(synth, real)})
    return rows
