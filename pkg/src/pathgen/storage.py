"""On-disk formats: checkpoints, cohort directories, prediction JSONL and heatmaps.

Binary payloads are little-endian float32 throughout so files are portable
and can be read without this package.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .crossmodal import PatchSet
from .synthdata import SPLITS, CaseRecord, CohortConfig, SurvivalLabel

CHECKPOINT_MAGIC = b"PGCKPT01"
CHECKPOINT_VERSION = 1
ARRAY_MAGIC = b"PGARR1\x00\x00"
COHORT_VERSION = 1
MODULE_IDS = ("pathgen", "mcat_gr")
_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Raised for malformed, foreign or version-mismatched files."""


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# single arrays
# ---------------------------------------------------------------------------

def array_bytes(arr):
    """Magic, uint32 ndim, uint32 dims, then float32 data (all little-endian)."""
    a = np.ascontiguousarray(arr, dtype=_LE_F32)
    head = ARRAY_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + a.tobytes()


def array_from_bytes(buf):
    if buf[:8] != ARRAY_MAGIC:
        raise FormatError("not an array file")
    (ndim,) = struct.unpack_from("<I", buf, 8)
    shape = struct.unpack_from(f"<{ndim}I", buf, 12)
    data = np.frombuffer(buf, dtype=_LE_F32, offset=12 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise FormatError(f"array payload has {data.size} values, header says {shape}")
    return data.reshape(shape).astype(np.float32)


def write_array(path, arr):
    Path(path).write_bytes(array_bytes(arr))


def read_array(path):
    return array_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    module: str
    config: dict
    params: dict
    seed: int = 0
    optimizer: ad.AdamState | None = None
    arrays: dict = field(default_factory=dict)      # extra named arrays (e.g. a prior)
    meta: dict = field(default_factory=dict)        # epoch, history, ...


def checkpoint_bytes(ckpt: Checkpoint):
    if ckpt.module not in MODULE_IDS:
        raise FormatError(f"unknown module id {ckpt.module!r}")
    blobs = [("param", k, v) for k, v in sorted(ckpt.params.items())]
    blobs += [("array", k, v) for k, v in sorted(ckpt.arrays.items())]
    opt = None
    if ckpt.optimizer is not None:
        s = ckpt.optimizer
        opt = {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step": s.step}
        blobs += [("adam_m", k, v) for k, v in sorted(s.m.items())]
        blobs += [("adam_v", k, v) for k, v in sorted(s.v.items())]
    table, offset, payload = [], 0, []
    for kind, name, v in blobs:
        b = np.ascontiguousarray(v, dtype=_LE_F32).tobytes()
        table.append({"kind": kind, "name": name, "shape": list(np.shape(v)),
                      "offset": offset, "nbytes": len(b)})
        payload.append(b)
        offset += len(b)
    header = _dumps({
        "format_version": CHECKPOINT_VERSION, "module": ckpt.module, "config": ckpt.config,
        "seed": int(ckpt.seed), "optimizer": opt, "meta": ckpt.meta, "tensors": table,
    }).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)


def checkpoint_from_bytes(buf, module=None):
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    try:
        header = json.loads(buf[16:16 + hlen])
    except ValueError as e:
        raise FormatError(f"corrupt checkpoint header: {e}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint format version {header.get('format_version')} "
                          f"!= supported {CHECKPOINT_VERSION}")
    if module is not None and header["module"] != module:
        raise FormatError(f"checkpoint holds {header['module']!r}, expected {module!r}")
    base = 16 + hlen
    groups = {"param": {}, "array": {}, "adam_m": {}, "adam_v": {}}
    for t in header["tensors"]:
        start = base + t["offset"]
        if start + t["nbytes"] > len(buf):
            raise FormatError(f"tensor {t['name']!r} runs past end of file")
        v = np.frombuffer(buf, _LE_F32, t["nbytes"] // 4, start).reshape(t["shape"])
        groups[t["kind"]][t["name"]] = v.astype(np.float32)
    opt = None
    if header["optimizer"] is not None:
        opt = ad.AdamState(**header["optimizer"], m=groups["adam_m"], v=groups["adam_v"])
    return Checkpoint(header["module"], header["config"], groups["param"], header["seed"],
                      opt, groups["array"], header["meta"])


def save_checkpoint(path, ckpt: Checkpoint):
    _atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path, module=None):
    return checkpoint_from_bytes(Path(path).read_bytes(), module)


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# cohort directory
# ---------------------------------------------------------------------------

def _case_entry(r: CaseRecord):
    return {
        "case_id": r.case_id, "split": r.split, "grade": r.grade,
        "time": r.survival.time, "censored": r.survival.censored, "time_bin": r.survival.time_bin,
        "gender": r.gender, "age": r.age, "magnification": r.magnification,
        "latent": r.latent, "grid_shape": list(r.patches.grid_shape),
    }


def save_cohort(records, cfg: CohortConfig, out_dir):
    """cohort.json + splits/<name>.json + cases/<id>.{patches,coords,genes}.f32."""
    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(exist_ok=True)
    for r in records:
        write_array(out / "cases" / f"{r.case_id}.patches.f32", r.patches.embeddings)
        write_array(out / "cases" / f"{r.case_id}.coords.f32", r.patches.coords)
        write_array(out / "cases" / f"{r.case_id}.genes.f32", r.genes)
        if "tumour_mask" in r.extra:
            write_array(out / "cases" / f"{r.case_id}.tumour.f32", r.extra["tumour_mask"])
    for s in SPLITS:
        ids = [r.case_id for r in records if r.split == s]
        (out / "splits" / f"{s}.json").write_text(_dumps(ids) + "\n")
    manifest = {"format_version": COHORT_VERSION, "config": cfg.to_dict(),
                "cases": [_case_entry(r) for r in records]}
    (out / "cohort.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


def load_cohort(cohort_dir, split=None):
    """Returns (config, records); ``split`` restricts to one split's manifest."""
    root = Path(cohort_dir)
    try:
        manifest = json.loads((root / "cohort.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"no cohort.json under {root}") from None
    if manifest.get("format_version") != COHORT_VERSION:
        raise FormatError("unsupported cohort format version")
    cfg = CohortConfig.from_dict(manifest["config"])
    wanted = None
    if split is not None:
        if split not in SPLITS:
            raise FormatError(f"unknown split {split!r}")
        wanted = set(json.loads((root / "splits" / f"{split}.json").read_text()))
    records = []
    for e in manifest["cases"]:
        if wanted is not None and e["case_id"] not in wanted:
            continue
        base = root / "cases" / e["case_id"]
        coords = read_array(f"{base}.coords.f32").astype(np.int64)
        ps = PatchSet(read_array(f"{base}.patches.f32"), coords, e["magnification"],
                      tuple(e["grid_shape"]))
        extra = {}
        if Path(f"{base}.tumour.f32").exists():
            extra["tumour_mask"] = read_array(f"{base}.tumour.f32").astype(bool)
        records.append(CaseRecord(
            e["case_id"], ps, read_array(f"{base}.genes.f32"), e["grade"],
            SurvivalLabel(e["time"], e["censored"], e["time_bin"]), e["gender"], e["age"],
            e["magnification"], e["split"], e["latent"], extra))
    return cfg, records


# ---------------------------------------------------------------------------
# predictions and profiles
# ---------------------------------------------------------------------------

def predictions_text(rows):
    return "".join(_dumps(r) + "\n" for r in rows)


def write_predictions(path, rows):
    _atomic_write(path, predictions_text(rows).encode())


def read_predictions(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_profiles(path, case_ids, profiles):
    """Synthesized profiles: JSON index next to one float32 matrix file."""
    path = Path(path)
    write_array(path.with_suffix(".f32"), np.asarray(profiles))
    path.write_text(_dumps({"case_ids": list(case_ids), "matrix": path.with_suffix(".f32").name}) + "\n")


def read_profiles(path):
    path = Path(path)
    index = json.loads(path.read_text())
    mat = read_array(path.parent / index["matrix"])
    return dict(zip(index["case_ids"], mat))


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def grid_csv(grid):
    """One CSV row per grid row; empty cells where there is no patch (NaN)."""
    lines = []
    for row in np.asarray(grid, dtype=np.float64):
        lines.append(",".join("" if np.isnan(v) else repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def grid_pgm(grid):
    """Binary 8-bit PGM, min-max scaled to 1..255 with 0 marking empty cells.

    Returns (bytes, sidecar dict) where the sidecar records the scaling.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("heatmap grid must be 2-D")
    valid = ~np.isnan(g)
    lo = float(g[valid].min()) if valid.any() else 0.0
    hi = float(g[valid].max()) if valid.any() else 0.0
    span = hi - lo
    pix = np.zeros(g.shape, np.uint8)
    if valid.any():
        scaled = (g[valid] - lo) / span if span > 0 else np.zeros(valid.sum())
        pix[valid] = np.round(1 + 254 * scaled).astype(np.uint8)
    rows, cols = g.shape
    head = f"P5\n{cols} {rows}\n255\n".encode()
    side = {"min": lo, "max": hi, "rows": rows, "cols": cols, "empty_value": 0,
            "scale": "value = min + (pixel - 1) / 254 * (max - min)"}
    return head + pix.tobytes(), side


def read_pgm(path):
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(rows, cols)


def write_heatmap(out_dir, name, grid):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.csv").write_text(grid_csv(grid))
    pgm, side = grid_pgm(grid)
    (out / f"{name}.pgm").write_bytes(pgm)
    (out / f"{name}.json").write_text(json.dumps(side, sort_keys=True, indent=1) + "\n")
    return [out / f"{name}.{ext}" for ext in ("csv", "pgm", "json")]
