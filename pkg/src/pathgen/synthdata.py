"""Synthetic paired slide/transcriptome cohorts and preprocessing rules.

A per-case latent vector drives every modality: tumour patch embeddings are a
noisy linear image of its shared part, gene groups are nonlinear maps of the
whole latent, and grade and survival follow a nonlinear severity score.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .crossmodal import DESK_GROUP_SIZES, GeneLayout, PatchSet

SPLITS = ("train", "val", "cal", "test")
GBMLGG_CASE_COUNTS = (532, 56, 82, 75)
BACKGROUND_THRESHOLD = 0.8


@dataclass(frozen=True)
class CohortConfig:
    group_sizes: tuple = DESK_GROUP_SIZES
    embed_dim: int = 64
    patches_per_slide: int = 32
    n_train: int = 600
    n_val: int = 100
    n_cal: int = 150
    n_test: int = 150
    n_grades: int = 3
    censoring_rate: float = 0.3
    female_fraction: float = 0.45
    magnifications: tuple = (1, 2, 3)
    shared_latent: int = 6
    private_latent: int = 2
    private_gain: float = 0.1
    gene_noise: float = 0.01
    patch_noise: float = 0.5
    slide_nuisance: float = 0.3
    seed: int = 0

    def __post_init__(self):
        counts = (self.embed_dim, self.patches_per_slide, self.n_train, self.n_val,
                  self.n_cal, self.n_test, self.n_grades, self.shared_latent)
        if any(int(c) < 1 for c in counts):
            raise ValueError("all cohort counts must be >= 1")
        if self.shared_latent < 4:
            raise ValueError("need at least 4 shared latent dimensions")
        if not 0 <= self.censoring_rate < 1:
            raise ValueError("censoring rate must lie in [0, 1)")
        GeneLayout(tuple(self.group_sizes))

    @property
    def split_sizes(self):
        return (self.n_train, self.n_val, self.n_cal, self.n_test)

    @property
    def n_cases(self):
        return sum(self.split_sizes)

    def to_dict(self):
        d = asdict(self)
        d["group_sizes"] = list(self.group_sizes)
        d["magnifications"] = list(self.magnifications)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("group_sizes", "magnifications"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SurvivalLabel:
    time: float
    censored: bool
    time_bin: int = 0            # 1..4 once bin edges are known

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("survival time must be >= 0")


@dataclass
class CaseRecord:
    case_id: str
    patches: PatchSet
    genes: np.ndarray
    grade: int
    survival: SurvivalLabel
    gender: str
    age: float
    magnification: int
    split: str = "train"
    latent: float = 0.0          # generator severity score, kept for sanity checks
    extra: dict = field(default_factory=dict)

    @property
    def censored(self):
        return self.survival.censored


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def patch_filter(mean_intensity):
    """Return True to keep a patch; background (intensity > 0.8) is dropped."""
    v = float(mean_intensity)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"normalised intensity must lie in [0, 1], got {v}")
    return not v > BACKGROUND_THRESHOLD


def zscore_stats(train_profiles):
    x = np.asarray(train_profiles, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, sd


def zscore(profiles, mean, sd):
    sd = np.asarray(sd, dtype=np.float64)
    bad = np.flatnonzero(~(sd > 0))
    if len(bad):
        raise ValueError(f"gene {int(bad[0])} has zero standard deviation")
    return ((np.asarray(profiles, dtype=np.float64) - mean) / sd).astype(np.float32)


def split_counts(n, fractions):
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 4 or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("need four non-negative fractions summing to 1")
    raw = fr * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    empty = [SPLITS[i] for i in range(4) if fr[i] > 0 and counts[i] == 0]
    if empty:
        raise ValueError(f"split(s) {empty} would be empty for n={n}")
    return counts


def split_cohort(records, fractions, seed):
    """Uniform random case-level partition into train/val/cal/test."""
    counts = split_counts(len(records), fractions)
    order = np.random.default_rng(seed).permutation(len(records))
    out = {}
    start = 0
    for name, c in zip(SPLITS, counts):
        out[name] = [records[i] for i in sorted(order[start:start + c])]
        start += c
    return out


def bin_edges(train_records):
    """Quartile edges of uncensored training survival times."""
    times = [r.survival.time for r in train_records if not r.survival.censored]
    if len(times) < 4:
        times = [r.survival.time for r in train_records]
    return np.quantile(times, [0.25, 0.5, 0.75])


def assign_bin(time, edges):
    return int(np.searchsorted(edges, time, side="right")) + 1


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass
class _World:
    """Fixed maps shared by every case of a cohort."""
    patch_map: np.ndarray
    stroma: np.ndarray
    mag_offsets: np.ndarray
    gene_maps: list
    proj: np.ndarray


def _severity(z):
    s = z[..., 0] + 0.8 * z[..., 1] * z[..., 2] + 0.6 * (z[..., 3] ** 2 - 1)
    return s / np.sqrt(1 + 0.64 + 0.72)


def _features(z, proj):
    u = _severity(z)[..., None]
    shared = z[..., :proj.shape[0]]
    return np.concatenate([z, u, np.tanh(shared @ proj)], axis=-1)


def _make_world(cfg, rng):
    k = cfg.shared_latent + cfg.private_latent
    D = cfg.embed_dim
    patch_map = rng.normal(size=(cfg.shared_latent, D)) / np.sqrt(cfg.shared_latent) * 1.5
    stroma = rng.normal(size=D)
    mag_offsets = rng.normal(size=(len(cfg.magnifications), D)) * 0.5
    proj = rng.normal(size=(cfg.shared_latent, 8)) / np.sqrt(cfg.shared_latent) * 0.6
    nfeat = k + 1 + 8
    gene_maps = []
    for g, size in enumerate(cfg.group_sizes):
        w = rng.normal(size=(nfeat, size)) / np.sqrt(nfeat)
        w[cfg.shared_latent:k] *= cfg.private_gain    # private latent: weak
        w[k] *= 2.5 if g == 1 else 1.0           # oncogenes read severity directly
        gene_maps.append(w)
    return _World(patch_map, stroma, mag_offsets, gene_maps, proj)


def _slide(cfg, world, z, mag_idx, rng):
    M = cfg.patches_per_slide
    side = int(np.ceil(np.sqrt(M * 1.15)))
    rows = cols = side
    grid = np.array([(r, c) for r in range(rows) for c in range(cols)])
    centre = rng.uniform(0, side - 1, size=2)
    dist = np.linalg.norm(grid - centre, axis=1) + rng.uniform(0, 1.5, len(grid))
    order = np.argsort(dist)
    n_bg = len(grid) - M
    # tissue patches read darker than blank glass
    intensity = np.empty(len(grid))
    intensity[order[:M]] = rng.uniform(0.3, 0.75, M)
    intensity[order[M:]] = rng.uniform(0.82, 1.0, n_bg)
    keep = np.array([patch_filter(v) for v in intensity])
    coords = grid[keep]
    tissue = order[:M]
    tcentre = grid[tissue[rng.integers(M)]]
    tdist = np.linalg.norm(coords - tcentre, axis=1) + rng.uniform(0, 1.0, len(coords))
    n_tumour = int(round(M * rng.uniform(0.45, 0.8)))
    tumour = np.zeros(len(coords), bool)
    tumour[np.argsort(tdist)[:n_tumour]] = True

    D = cfg.embed_dim
    base = rng.normal(size=D) * cfg.slide_nuisance + world.mag_offsets[mag_idx]
    signal = z[:cfg.shared_latent] @ world.patch_map
    emb = np.where(tumour[:, None], signal[None, :], world.stroma[None, :]) + base
    emb = emb + rng.normal(size=emb.shape) * cfg.patch_noise
    return PatchSet(emb.astype(np.float32), coords, cfg.magnifications[mag_idx], (rows, cols)), tumour


def generate_cohort(cfg: CohortConfig):
    """Generate, split, bin and z-score a full cohort; pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    world = _make_world(cfg, rng)
    k = cfg.shared_latent + cfg.private_latent
    n = cfg.n_cases
    Z = rng.normal(size=(n, k))
    feats = _features(Z, world.proj)
    raw = np.concatenate([feats @ w for w in world.gene_maps], axis=1)
    raw = raw + rng.normal(size=raw.shape) * cfg.gene_noise
    sev = _severity(Z)

    noisy = sev + rng.normal(size=n) * 0.3
    cuts = np.quantile(noisy, np.arange(1, cfg.n_grades) / cfg.n_grades)
    grades = np.searchsorted(cuts, noisy, side="right")

    rate = np.exp(1.2 * sev + 0.3 * (grades - grades.mean())) / 30.0
    times = rng.exponential(1.0 / rate)
    censored = rng.uniform(size=n) < cfg.censoring_rate
    times = np.where(censored, times * rng.uniform(0.05, 1.0, n), times)

    genders = np.where(rng.uniform(size=n) < cfg.female_fraction, "female", "male")
    ages = np.clip(52 + 12 * rng.normal(size=n) + 4 * sev, 18, 90)
    mags = rng.integers(len(cfg.magnifications), size=n)

    records = []
    for i in range(n):
        ps, tumour = _slide(cfg, world, Z[i], mags[i], rng)
        records.append(CaseRecord(
            case_id=f"case-{i:05d}", patches=ps, genes=raw[i].astype(np.float32),
            grade=int(grades[i]), survival=SurvivalLabel(float(times[i]), bool(censored[i])),
            gender=str(genders[i]), age=float(round(ages[i], 1)),
            magnification=int(ps.magnification), latent=float(sev[i]),
            extra={"tumour_mask": tumour}))

    fractions = np.array(cfg.split_sizes, dtype=np.float64) / n
    splits = split_cohort(records, fractions, cfg.seed + 1)
    for name, recs in splits.items():
        for r in recs:
            r.split = name
    train = splits["train"]
    mu, sd = zscore_stats(np.stack([r.genes for r in train]))
    edges = bin_edges(train)
    for r in records:
        r.genes = zscore(r.genes[None], mu, sd)[0]
        r.survival.time_bin = assign_bin(r.survival.time, edges)
    return records


def by_split(records):
    out = {s: [] for s in SPLITS}
    for r in records:
        out[r.split].append(r)
    return out


def bin_edges_of(records):
    """Recover the bin edges used when the cohort was generated."""
    return bin_edges([r for r in records if r.split == "train"])
