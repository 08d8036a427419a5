"""
Whole pipeline, in library calls
================================

cohort -> PathGen -> synthesized profiles -> MCAT_GR -> conformal sets ->
stratified report -> per-patch heatmap.

PRESET = "tiny" finishes in seconds and the numbers mean nothing; "desk" is the
real experiment (about 10 minutes on one core).
"""
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from pathgen import conformal as cp
from pathgen import storage
from pathgen.cli import prediction_rows, synthesize_profiles
from pathgen.config import RunConfig
from pathgen.diffusion import GaussianPrior, PathGenModel, train_pathgen
from pathgen.metrics import auc_ovr, c_index, mae, spearman, stratified_report
from pathgen.predictor import MCATGR, distributed_predict, train_mcat_gr
from pathgen.synthdata import by_split, generate_cohort

PRESET = sys.argv[1] if len(sys.argv) > 1 else "tiny"
run = RunConfig.preset_named(PRESET)
out = Path(tempfile.mkdtemp(prefix="pathgen-demo-"))

# %% cohort
sp = by_split(generate_cohort(run.cohort))
print({k: len(v) for k, v in sp.items()})
case = sp["test"][0]
print(case.case_id, "grade", case.grade, "time bin", case.survival.time_bin,
      "patches", len(case.patches), "genes", case.genes.shape)

# %% PathGen: learn genes from patches
train = sp["train"]
X = np.stack([r.genes for r in train])
prior = GaussianPrior.fit(X)
sched = run.diffusion.schedule()
params, _, loss = train_pathgen(X, [r.patches for r in train], run.pathgen, sched,
                                run.pathgen_train, prior=prior)
print("pathgen loss", [round(v, 3) for v in loss[:3]], "...", round(loss[-1], 3))
pg = PathGenModel(params, run.pathgen, sched, prior)

# %% how close are the synthesized profiles?
profiles = {s: synthesize_profiles(pg, recs, 0, run.synth_samples) for s, recs in sp.items()}
real = np.stack([r.genes for r in sp["test"]])
print("test rho %.3f  MAE %.3f" % (spearman(profiles["test"], real)[0], mae(profiles["test"], real)))


# %% MCAT_GR on synthesized genes
def arrays(split):
    recs = sp[split]
    return ([r.patches for r in recs], profiles[split], np.array([r.grade for r in recs]),
            np.array([r.survival.time_bin for r in recs]),
            np.array([r.survival.censored for r in recs]))


mparams, _, hist = train_mcat_gr(*arrays("train"), run.predictor, run.predictor_train,
                                 val=arrays("val"))
print("best epoch", int(np.argmin(hist["val"])))
model = MCATGR(mparams, run.predictor)


def predict(split):
    return model.predict_many([r.patches for r in sp[split]], profiles[split])


probs, hazards, risks = predict("test")
test = sp["test"]
print("test AUC %.3f" % auc_ovr(probs, [r.grade for r in test]),
      "C-index %.3f" % c_index(risks, [r.survival.time for r in test],
                               [not r.survival.censored for r in test]))

# %% conformal calibration on the held-out cal split
cal_probs, _, cal_risks = predict("cal")
gcal = cp.calibrate_gradation(cal_probs, [r.grade for r in sp["cal"]], run.alpha)
rcal = cp.calibrate_risk(cal_risks, [r.survival.time_bin for r in sp["cal"]], run.alpha)
print("q_hat grade %.3f risk %.3f" % (gcal.q_hat, rcal.q_hat))

rows = prediction_rows(test, probs, hazards, risks, gcal, rcal)
storage.write_predictions(out / "predictions.jsonl", rows)
report = stratified_report(rows)
for r in report.rows[:7]:
    print(f"{r.dimension:>12} {r.value:<8} n={r.n:<4} grade cov {r.grade_coverage:.2f} "
          f"risk cov {r.risk_coverage:.2f} grade unc {r.grade_uncertainty:.3f}")

# %% one slide, patch by patch
hm = distributed_predict(case.patches, profiles["test"][0], mparams, run.predictor)
storage.write_heatmap(out, "risk", hm["risk_grid"])
print("risk grid", hm["risk_grid"].shape, "mean", round(hm["mean_risk"], 3))
print("files in", out)
