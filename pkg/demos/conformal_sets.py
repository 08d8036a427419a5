"""
Conformal grade sets and risk intervals
=======================================

A fake classifier with known miscalibration, calibrated on one half of the
data and audited on the other.
"""
import numpy as np

from pathgen.conformal import (calibrate_gradation, calibrate_risk, coverage_audit,
                               equal_width_bins, grade_set, grade_uncertainty, risk_interval,
                               risk_uncertainty)

rng = np.random.default_rng(1)
n = 2000

# %% a 3-class problem; the "model" is overconfident
logits = rng.normal(size=(n, 3)) * 2
truth = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
labels = (rng.uniform(size=(n, 1)) > truth.cumsum(1)).sum(1)
sharp = np.exp(2 * logits)
probs = sharp / sharp.sum(1, keepdims=True)

print("argmax accuracy", (probs.argmax(1) == labels).mean())

# %% coverage and set size as alpha moves
for alpha in (0.05, 0.1, 0.2, 0.4):
    cal = calibrate_gradation(probs[:1000], labels[:1000], alpha)
    sets = [grade_set(p, cal) for p in probs[1000:]]
    cov = coverage_audit(sets, labels[1000:])
    size = np.mean([len(x.members) for x in sets])
    unc = np.mean([grade_uncertainty(x, 3) for x in sets])
    print(f"alpha {alpha:.2f}  q_hat {cal.q_hat:.3f}  coverage {cov:.3f}  mean size {size:.2f}  "
          f"uncertainty {unc:.3f}")

# %% risk: four time bins carved out of [-5, -1]
print("bin bounds", equal_width_bins())
bins = rng.integers(1, 5, n)
centres = np.array([np.mean(b) for b in equal_width_bins()])
risk = np.clip(centres[bins - 1] + rng.normal(0, 0.4, n), -5, -1)
cal = calibrate_risk(risk[:1000], bins[:1000], 0.1)
intervals = [risk_interval(r, cal) for r in risk[1000:]]
print("risk q_hat", round(cal.q_hat, 3), "coverage", coverage_audit(intervals, bins[1000:]))

for r in (-1.2, -2.5, -4.6):
    iv = risk_interval(r, cal)
    print(f"risk {r}: [{iv.risk_lb:.2f}, {iv.risk_ub:.2f}] bins {iv.members} "
          f"uncertainty {risk_uncertainty(iv):.3f}")
