"""Command-line pipeline: data generation, training, synthesis, conformal calibration,
prediction, evaluation and heatmap export.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite numerics.
Logs go to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import conformal as cp
from . import storage
from .config import ConfigError, RunConfig
from .crossmodal import GENE_GROUPS
from .diffusion import GaussianPrior, PathGenModel, sample, train_pathgen
from .metrics import stratified_report, synthesis_report
from .predictor import MCATGR, distributed_predict, survival_curve, train_mcat_gr
from .synthdata import SPLITS, by_split, generate_cohort

log = logging.getLogger("pathgen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GENE_SOURCES = ("real", "synth", "zero")


class DataError(RuntimeError):
    pass


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        entry = {"t": round(record.created, 3), "level": record.levelname.lower(),
                 "msg": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, sort_keys=True)


def _setup_logging(verbose=False):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def _info(msg, **fields):
    log.info(msg, extra={"fields": fields})


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------

def _run_config(args):
    cfg = RunConfig.load(args.config, getattr(args, "seed", None))
    if getattr(args, "lam", None) is not None:
        cfg = cfg.with_lambda(args.lam)
    if getattr(args, "alpha", None) is not None:
        cfg = cfg.with_alpha(args.alpha)
    return cfg


def _cohort(path, split=None):
    try:
        _, records = storage.load_cohort(path, split)
    except (OSError, storage.FormatError) as e:
        raise DataError(f"cannot load cohort {path}: {e}") from None
    if not records:
        raise DataError(f"split {split!r} of {path} is empty")
    return records


def _load_pathgen(path):
    ck = storage.load_checkpoint(path, "pathgen")
    run = RunConfig.from_dict(ck.config)
    prior = GaussianPrior.from_arrays(ck.arrays) if ck.arrays else None
    model = PathGenModel(ck.params, run.pathgen, run.diffusion.schedule(), prior)
    return model, run, ck


def _load_predictor(path):
    ck = storage.load_checkpoint(path, "mcat_gr")
    run = RunConfig.from_dict(ck.config)
    return MCATGR(ck.params, run.predictor), run, ck


def synthesize_profiles(model, records, base_seed=0, n_samples=1):
    """One profile per case (mean of ``n_samples`` draws); case i is seeded by base_seed + i."""
    seeds = [base_seed + int(r.case_id.rsplit("-", 1)[-1]) for r in records]
    return np.asarray(sample(model, [r.patches for r in records], model.schedule, seeds, n_samples))


def _profiles(source, records, args, layout_total):
    if source == "real":
        return np.stack([r.genes for r in records])
    if source == "zero":
        return np.zeros((len(records), layout_total), np.float32)
    if getattr(args, "profiles", None):
        table = {}
        for path in args.profiles:
            table.update(storage.read_profiles(path))
        missing = [r.case_id for r in records if r.case_id not in table]
        if missing:
            raise DataError(f"profiles file lacks {len(missing)} cases, e.g. {missing[0]}")
        return np.stack([table[r.case_id] for r in records])
    if getattr(args, "pathgen", None):
        model, run, _ = _load_pathgen(args.pathgen)
        return synthesize_profiles(model, records, n_samples=run.synth_samples)
    raise DataError("synthesized genes need --profiles or --pathgen")


def _labels(records):
    return (np.array([r.grade for r in records]), np.array([r.survival.time_bin for r in records]),
            np.array([r.survival.censored for r in records]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _run_config(args)
    records = generate_cohort(cfg.cohort)
    out = storage.save_cohort(records, cfg.cohort, args.out)
    counts = {s: len(v) for s, v in by_split(records).items()}
    _info("cohort written", out=str(out), **counts)
    print(json.dumps(counts, sort_keys=True))


def _save_progress(path, module, run, params, opt, meta, arrays=None):
    storage.save_checkpoint(path, storage.Checkpoint(module, run.to_dict(), params, run.seed, opt,
                                                     arrays or {}, meta))


def cmd_train_pathgen(args):
    run = _run_config(args)
    if args.epochs is not None:
        run = replace(run, pathgen_train=replace(run.pathgen_train, epochs=args.epochs))
    records = _cohort(args.cohort, "train")
    profiles = np.stack([r.genes for r in records])
    if profiles.shape[1] != run.pathgen.layout.total or records[0].patches.dim != run.pathgen.patch_dim:
        raise ConfigError("cohort shapes do not match the pathgen config")
    prior = GaussianPrior.fit(profiles)
    params = opt = None
    start, history = 0, []
    out = Path(args.out)
    if args.resume and out.exists():
        ck = storage.load_checkpoint(out, "pathgen")
        params, opt = ck.params, ck.optimizer
        start, history = ck.meta["epoch"], list(ck.meta["history"])
        prior = GaussianPrior.from_arrays(ck.arrays)
        _info("resuming", epoch=start)

    def checkpoint(epoch, p, o, hist):
        full = history + hist
        _info("epoch", module="pathgen", epoch=epoch, loss=full[-1])
        _save_progress(out, "pathgen", run, p, o, {"epoch": epoch + 1, "history": full},
                       prior.to_arrays())

    t0 = time.time()
    params, opt, hist = train_pathgen(profiles, [r.patches for r in records], run.pathgen,
                                      run.diffusion.schedule(), run.pathgen_train, params, opt,
                                      start, checkpoint, prior)
    if not hist:
        _save_progress(out, "pathgen", run, params or {}, opt,
                       {"epoch": start, "history": history}, prior.to_arrays())
    _write_json(out.with_suffix(".log.json"), {"module": "pathgen", "loss": history + hist,
                                               "seconds": round(time.time() - t0, 3)})


def cmd_train_predictor(args):
    run = _run_config(args)
    if args.epochs is not None:
        run = replace(run, predictor_train=replace(run.predictor_train, epochs=args.epochs))
    source = args.genes or ("synth" if (args.pathgen or args.profiles) else "real")
    train = _cohort(args.cohort, "train")
    val = _cohort(args.cohort, "val")
    total = run.predictor.layout.total
    tr = ([r.patches for r in train], _profiles(source, train, args, total), *_labels(train))
    va = ([r.patches for r in val], _profiles(source, val, args, total), *_labels(val))
    out = Path(args.out)
    params = opt = None
    start, history, best = 0, {"train": [], "val": []}, None
    if args.resume and out.exists():
        ck = storage.load_checkpoint(out, "mcat_gr")
        params, opt = ck.params, ck.optimizer
        start, history = ck.meta["epoch"], ck.meta["history"]
        best_params = {k[5:]: v for k, v in ck.arrays.items() if k.startswith("best.")}
        best = (ck.meta["best_val"], best_params or None)
        _info("resuming", epoch=start)

    def checkpoint(epoch, p, o, hist, best_now):
        full = {k: history[k] + hist[k] for k in hist}
        _info("epoch", module="mcat_gr", epoch=epoch, loss=full["train"][-1], val=full["val"][-1])
        arrays = {f"best.{k}": v for k, v in (best_now[1] or {}).items()}
        _save_progress(out, "mcat_gr", run, p, o,
                       {"epoch": epoch + 1, "history": full, "genes": source,
                        "best_val": best_now[0]}, arrays)

    t0 = time.time()
    params, opt, hist = train_mcat_gr(*tr, run.predictor, run.predictor_train, params, opt, start,
                                      checkpoint, va, best)
    # the final checkpoint holds the selected parameters so downstream verbs use them
    full = {k: history[k] + hist[k] for k in hist}
    _save_progress(out, "mcat_gr", run, params, opt,
                   {"epoch": run.predictor_train.epochs, "history": full, "genes": source,
                    "best_val": float(min(full["val"])) if full["val"] else None,
                    "selected": True})
    _write_json(out.with_suffix(".log.json"), {"module": "mcat_gr", "loss": full["train"],
                                               "val_loss": full["val"], "genes": source,
                                               "seconds": round(time.time() - t0, 3)})


def cmd_synthesize(args):
    model, run, _ = _load_pathgen(args.pathgen)
    records = _cohort(args.cohort, args.split)
    synth = synthesize_profiles(model, records, args.seed or 0, args.samples or run.synth_samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    storage.write_profiles(out / f"profiles_{args.split}.json", [r.case_id for r in records], synth)
    real = np.stack([r.genes for r in records])
    rows = synthesis_report(synth, real, run.pathgen.layout, list(GENE_GROUPS))
    _write_json(out / f"synthesis_report_{args.split}.json", rows)
    _info("synthesized", split=args.split, n=len(records), spearman=rows[-1]["spearman"],
          mae=rows[-1]["mae"])


def _predict_arrays(model, records, source, args):
    profiles = _profiles(source, records, args, model.cfg.layout.total)
    probs, hazards, risks = model.predict_many([r.patches for r in records], profiles)
    return profiles, probs, hazards, risks


def cmd_calibrate(args):
    model, run, ck = _load_predictor(args.predictor)
    alpha = args.alpha if args.alpha is not None else run.alpha
    records = _cohort(args.cohort, args.split or "cal")
    _, probs, _, risks = _predict_arrays(model, records, ck.meta.get("genes", "real"), args)
    grades, bins, _ = _labels(records)
    gcal = cp.calibrate_gradation(probs, grades, alpha)
    rcal = cp.calibrate_risk(risks, bins, alpha, literal_rule=run.literal_risk_rule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grade_calibration.json").write_text(gcal.to_json() + "\n")
    (out / "risk_calibration.json").write_text(rcal.to_json() + "\n")
    if not (gcal.guaranteed and rcal.guaranteed):
        log.warning("calibration set too small for the coverage guarantee")
    _info("calibrated", alpha=alpha, grade_q_hat=gcal.q_hat, risk_q_hat=rcal.q_hat, n_cal=len(records))


def _load_calibrations(path):
    root = Path(path)
    try:
        g = cp.GradeCalibration.from_json((root / "grade_calibration.json").read_text())
        r = cp.RiskCalibration.from_json((root / "risk_calibration.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing calibration artifact: {e.filename}") from None
    return g, r


def prediction_rows(records, probs, hazards, risks, gcal, rcal):
    rows = []
    for r, p, h, risk in zip(records, probs, hazards, risks):
        gs = cp.grade_set(p, gcal)
        rs = cp.risk_interval(risk, rcal)
        rows.append({
            "case_id": r.case_id, "grade_probs": [float(x) for x in p],
            "grade_set": gs.members, "grade_uncertainty": cp.grade_uncertainty(gs, gcal.n_classes),
            "hazards": [float(x) for x in h], "survival": [float(x) for x in survival_curve(h)],
            "risk": float(risk), "risk_lb": rs.risk_lb, "risk_ub": rs.risk_ub,
            "risk_set": rs.members, "risk_uncertainty": cp.risk_uncertainty(rs),
            "grade": r.grade, "time": r.survival.time, "censored": r.survival.censored,
            "time_bin": r.survival.time_bin, "gender": r.gender, "age": r.age,
            "magnification": r.magnification,
        })
    return rows


def cmd_predict(args):
    model, _, ck = _load_predictor(args.predictor)
    if not args.calibration:
        raise DataError("predict needs --calibration (sets and intervals require it)")
    gcal, rcal = _load_calibrations(args.calibration)
    records = _cohort(args.cohort, args.split or "test")
    _, probs, hazards, risks = _predict_arrays(model, records, ck.meta.get("genes", "real"), args)
    if not np.all(np.isfinite(probs)) or not np.all(np.isfinite(risks)):
        raise ad.NonFiniteError("non-finite predictions")
    rows = prediction_rows(records, probs, hazards, risks, gcal, rcal)
    storage.write_predictions(args.out, rows)
    _info("predicted", n=len(rows), out=str(args.out))


def cmd_evaluate(args):
    try:
        rows = storage.read_predictions(args.predictions)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read predictions: {e}") from None
    if not rows:
        raise DataError("no predictions to evaluate")
    report = stratified_report(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    o = report.overall()
    _info("evaluated", n=o.n, auc=o.auc, c_index=o.c_index, grade_coverage=o.grade_coverage,
          risk_coverage=o.risk_coverage)


def _coattention_grid(values, patch_set):
    grid = np.full(patch_set.grid_shape, np.nan)
    for v, (r, c) in zip(values, patch_set.coords):
        grid[r, c] = v
    return grid


def cmd_heatmap(args):
    model, _, ck = _load_predictor(args.predictor)
    records = [r for r in _cohort(args.cohort) if r.case_id == args.case]
    if not records:
        raise DataError(f"unknown case {args.case!r}")
    rec = records[0]
    profile = _profiles(ck.meta.get("genes", "real"), [rec], args, model.cfg.layout.total)[0]
    dist = distributed_predict(rec.patches, profile, model.params, model.cfg, args.window)
    out = Path(args.out)
    written = []
    written += storage.write_heatmap(out, "risk", dist["risk_grid"])
    cls = dist["grade_class_grid"].astype(np.float64)
    cls[cls < 0] = np.nan
    written += storage.write_heatmap(out, "grade", cls)
    for k in range(model.cfg.n_grades):
        written += storage.write_heatmap(out, f"grade_prob_{k}", dist["grade_grid"][..., k])
    amap = model.predict(rec.patches, profile).coattention
    if amap is not None:
        lines = ["group," + ",".join(str(i) for i in range(amap.shape[1]))]
        lines += [f"{name}," + ",".join(repr(float(v)) for v in row)
                  for name, row in zip(GENE_GROUPS, amap)]
        (out / "coattention.csv").write_text("\n".join(lines) + "\n")
        for name, row in zip(GENE_GROUPS, amap):
            written += storage.write_heatmap(out, f"coattention_{name}", _coattention_grid(row, rec.patches))
    _write_json(out / "heatmap.json", {"case_id": rec.case_id, "grid_shape": list(rec.patches.grid_shape),
                                       "mean_risk": dist["mean_risk"],
                                       "mean_grade_probs": [float(x) for x in dist["mean_grade_probs"]]})
    _info("heatmaps written", case=rec.case_id, files=len(written))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="pathgen", description=__doc__.split("\n")[0])
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        return p

    def common(p, config=True):
        if config:
            p.add_argument("--config", default="desk", help="preset name or JSON config path")
            p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)

    p = verb("gen-data", cmd_gen_data, "generate a synthetic cohort directory")
    common(p)

    for name, fn in (("train-pathgen", cmd_train_pathgen), ("train-predictor", cmd_train_predictor)):
        p = verb(name, fn, f"{name.split('-')[1]} training (resumable)")
        common(p)
        p.add_argument("--cohort", required=True)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--resume", action="store_true")
        if name == "train-predictor":
            p.add_argument("--lambda", dest="lam", type=float, default=None)
            p.add_argument("--genes", choices=GENE_SOURCES, default=None)
            p.add_argument("--pathgen", default=None)
            p.add_argument("--profiles", action="append", default=None,
                           help="synthesized profiles file; repeat for several splits")

    p = verb("synthesize", cmd_synthesize, "sample gene profiles for one split")
    p.add_argument("--pathgen", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=None,
                   help="average this many draws per case (default from the config)")
    p.add_argument("--out", required=True)

    for name, fn in (("calibrate", cmd_calibrate), ("predict", cmd_predict), ("heatmap", cmd_heatmap)):
        p = verb(name, fn, f"{name} with a trained predictor")
        p.add_argument("--predictor", required=True)
        p.add_argument("--cohort", required=True)
        p.add_argument("--pathgen", default=None)
        p.add_argument("--profiles", action="append", default=None)
        p.add_argument("--out", required=True)
        if name != "heatmap":
            p.add_argument("--split", choices=SPLITS, default=None)
        if name == "calibrate":
            p.add_argument("--alpha", type=float, default=None)
        if name == "predict":
            p.add_argument("--calibration", default=None)
        if name == "heatmap":
            p.add_argument("--case", required=True)
            p.add_argument("--window", type=int, default=1)

    p = verb("evaluate", cmd_evaluate, "stratified report from a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        args.fn(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except ad.NonFiniteError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except (DataError, storage.FormatError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except ValueError as e:
        # invalid generator or model settings surface as ValueError
        log.error("config error: %s", e)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
