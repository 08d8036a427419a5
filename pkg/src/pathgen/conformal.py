"""Split-conformal prediction sets for grade and risk-interval sets over time bins."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

RISK_LO, RISK_HI = -5.0, -1.0
N_BINS = 4


def equal_width_bins(n_bins=N_BINS, lo=RISK_LO, hi=RISK_HI):
    """Risk bounds per time bin; bin 1 (shortest survival) gets the highest risks.

    Returns a list of (t_lb, t_ub) pairs indexed by bin - 1.
    """
    width = (hi - lo) / n_bins
    return [(hi - (b + 1) * width, hi - b * width) for b in range(n_bins)]


def quantile_level(n, alpha):
    # the small slack keeps e.g. 20 * 0.9 from rounding up to 19
    return math.ceil((n + 1) * (1 - alpha) - 1e-9) / n


def conformal_quantile(scores, alpha):
    """Finite-sample corrected quantile with "higher" interpolation.

    Returns (q_hat, guaranteed).  When ceil((n+1)(1-alpha))/n exceeds 1 the
    calibration set is too small for the guarantee; the maximum score is used
    and ``guaranteed`` is False.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = len(s)
    if n == 0:
        raise ValueError("need at least one calibration score")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    q = quantile_level(n, alpha)
    if q > 1:
        return float(s[-1]), False
    k = math.ceil(q * n - 1e-9)        # rank of the smallest score with ecdf >= q
    return float(s[max(k, 1) - 1]), True


@dataclass
class GradeCalibration:
    q_hat: float
    alpha: float
    n_cal: int
    n_classes: int
    guaranteed: bool = True

    def to_json(self):
        return json.dumps({"kind": "grade", **asdict(self)}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.pop("kind", "grade") != "grade":
            raise ValueError("not a grade calibration")
        return cls(**d)


@dataclass
class RiskCalibration:
    q_hat: float
    alpha: float
    n_cal: int
    bin_bounds: list = field(default_factory=equal_width_bins)
    guaranteed: bool = True
    literal_rule: bool = False

    def to_json(self):
        d = asdict(self)
        d["bin_bounds"] = [list(map(float, b)) for b in self.bin_bounds]
        return json.dumps({"kind": "risk", **d}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.pop("kind", "risk") != "risk":
            raise ValueError("not a risk calibration")
        d["bin_bounds"] = [tuple(b) for b in d["bin_bounds"]]
        return cls(**d)


@dataclass
class PredictionSet:
    members: list
    risk_lb: float | None = None
    risk_ub: float | None = None

    def __contains__(self, item):
        return item in self.members

    def __len__(self):
        return len(self.members)


def load_calibration(text):
    kind = json.loads(text).get("kind")
    if kind == "grade":
        return GradeCalibration.from_json(text)
    if kind == "risk":
        return RiskCalibration.from_json(text)
    raise ValueError(f"unknown calibration kind {kind!r}")


# ---------------------------------------------------------------------------
# grade
# ---------------------------------------------------------------------------

def calibrate_gradation(cal_probs, cal_labels, alpha=0.1):
    probs = np.asarray(cal_probs, dtype=np.float64)
    labels = np.asarray(cal_labels, dtype=int)
    n_classes = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"grade label out of range 0..{n_classes - 1}")
    scores = 1.0 - probs[np.arange(len(labels)), labels]
    q_hat, ok = conformal_quantile(scores, alpha)
    return GradeCalibration(q_hat, alpha, len(labels), n_classes, ok)


def grade_set(probs, cal: GradeCalibration):
    """Classes whose probability reaches 1 - q_hat (may be empty)."""
    p = np.asarray(probs, dtype=np.float64)
    return PredictionSet([int(j) for j in np.flatnonzero(p >= 1.0 - cal.q_hat)])


def grade_uncertainty(pset, n_classes):
    """(|C| / N) * (largest index gap in C / (N - 1)); empty or singleton sets give 0."""
    members = list(pset.members if isinstance(pset, PredictionSet) else pset)
    if len(members) <= 1:
        return 0.0
    if n_classes < 2:
        raise ValueError("need at least two classes")
    spread = max(members) - min(members)
    return len(members) / n_classes * spread / (n_classes - 1)


# ---------------------------------------------------------------------------
# risk
# ---------------------------------------------------------------------------

def _check_bounds(bin_bounds):
    b = sorted((float(lo), float(hi)) for lo, hi in bin_bounds)
    if b[0][0] != RISK_LO or b[-1][1] != RISK_HI:
        raise ValueError("bin bounds must cover [-5, -1]")
    for (lo1, hi1), (lo2, hi2) in zip(b, b[1:]):
        if not (lo1 < hi1 and np.isclose(hi1, lo2)):
            raise ValueError("bin bounds must be contiguous and non-overlapping")


def calibrate_risk(cal_risks, cal_bins, alpha=0.1, bin_bounds=None, literal_rule=False):
    """Scores |r_i - risk_i| with r_i the upper risk bound of the true time bin."""
    bounds = equal_width_bins() if bin_bounds is None else [tuple(b) for b in bin_bounds]
    _check_bounds(bounds)
    bins = np.asarray(cal_bins, dtype=int)
    if np.any(bins < 1) or np.any(bins > len(bounds)):
        raise ValueError(f"time bin must lie in 1..{len(bounds)}")
    risks = np.asarray(cal_risks, dtype=np.float64)
    upper = np.array([bounds[b - 1][1] for b in bins])
    q_hat, ok = conformal_quantile(np.abs(upper - risks), alpha)
    return RiskCalibration(q_hat, alpha, len(bins), bounds, ok, literal_rule)


def risk_interval(risk_pred, cal: RiskCalibration):
    """Interval risk +- q_hat clipped to [-5, -1] and the time bins it covers.

    Default rule: a bin is included when its [t_lb, t_ub] overlaps the
    interval.  ``cal.literal_rule`` switches to "risk_lb <= t_lb or
    t_ub <= risk_ub".
    """
    r = float(risk_pred)
    lb = max(RISK_LO, r - cal.q_hat)
    ub = min(RISK_HI, r + cal.q_hat)
    members = []
    for b, (t_lb, t_ub) in enumerate(cal.bin_bounds, start=1):
        if cal.literal_rule:
            hit = lb <= t_lb or t_ub <= ub
        else:
            # closed intervals: a score equal to q_hat must still cover its bin
            hit = lb <= t_ub and t_lb <= ub
        if hit:
            members.append(b)
    return PredictionSet(members, lb, ub)


def risk_uncertainty(pset, risk_lb=None, risk_ub=None, n_bins=N_BINS):
    """(|C| / N) * |ub - lb| / ((-1) - (-5))."""
    members = pset.members if isinstance(pset, PredictionSet) else pset
    lb = pset.risk_lb if risk_lb is None else risk_lb
    ub = pset.risk_ub if risk_ub is None else risk_ub
    if lb > ub:
        raise ValueError("risk lower bound exceeds upper bound")
    return len(members) / n_bins * abs(ub - lb) / (RISK_HI - RISK_LO)


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

def coverage_audit(sets, truths):
    """Fraction of cases whose true label (class or bin) is in its set."""
    sets = list(sets)
    truths = list(truths)
    if len(sets) != len(truths):
        raise ValueError("sets and truths must align")
    if not sets:
        raise ValueError("nothing to audit")
    hits = [int(t) in (s.members if isinstance(s, PredictionSet) else s) for s, t in zip(sets, truths)]
    return float(np.mean(hits))
