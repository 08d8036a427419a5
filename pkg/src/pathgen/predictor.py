"""MCAT_GR: joint tumour-grade and survival-risk prediction from patches and genes.

Gene-group tokens query the slide's patch features; the co-attended tokens
run through a small transformer and two separate gated attention pools, one
feeding the grade head and one the hazard head.  The hazard head also sees a
pooled embedding of the gene tokens themselves.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .crossmodal import DESK_GROUP_SIZES, GeneLayout, PatchSet, pad_patches
from .crossmodal import coattention, gene_encoder, init_coattention, init_gene_encoder
from .layers import (ParamBuilder, gated_pool, init_gated_pool, init_transformer_layer,
                     linear, transformer_layer)

log = logging.getLogger(__name__)

N_TIME_BINS = 4
RISK_MIN, RISK_MAX = -5.0, -1.0
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class PredictorConfig:
    group_sizes: tuple = DESK_GROUP_SIZES
    patch_dim: int = 64
    embed_dim: int = 64
    hidden: int = 64
    n_grades: int = 3
    heads: int = 4
    ff_mult: int = 4
    path_layers: int = 2
    gene_layers: int = 2
    use_genes: bool = True      # False gives the patches-only ablation

    @property
    def layout(self):
        return GeneLayout(tuple(self.group_sizes))


@dataclass
class PredictorOutput:
    grade_probs: np.ndarray       # softmax over grade logits
    hazards: np.ndarray
    survival: np.ndarray
    risk: float
    coattention: np.ndarray | None = None   # (6, M) or None for the ablation

    def to_dict(self):
        return {
            "grade_probs": [float(p) for p in self.grade_probs],
            "hazards": [float(h) for h in self.hazards],
            "survival": [float(s) for s in self.survival],
            "risk": float(self.risk),
        }


def init_mcat_gr(cfg: PredictorConfig, seed=0):
    pb = ParamBuilder(np.random.default_rng(seed))
    E = cfg.embed_dim
    pb.linear("pfc", cfg.patch_dim, E)
    if cfg.use_genes:
        init_gene_encoder(pb.scope("genc"), cfg.layout, cfg.hidden, E)
        init_coattention(pb.scope("coattn"), E, E)
        for i in range(cfg.gene_layers):
            init_transformer_layer(pb.scope(f"gtf{i}"), E, cfg.ff_mult)
        init_gated_pool(pb.scope("gpool"), E, E)
    for i in range(cfg.path_layers):
        init_transformer_layer(pb.scope(f"ptf{i}"), E, cfg.ff_mult)
    init_gated_pool(pb.scope("pool_grade"), E, E)
    init_gated_pool(pb.scope("pool_risk"), E, E)
    pb.linear("grade", E, cfg.n_grades)
    pb.linear("hazard", 2 * E if cfg.use_genes else E, N_TIME_BINS)
    return pb.params


def mcat_gr_logits(p, patches, genes, cfg: PredictorConfig, mask=None):
    """Graph-level forward.

    patches (B, M, D), genes (B, G) -> (grade logits (B, N), hazard logits
    (B, 4), co-attention map (B, 6, M) or None).
    """
    h = ad.elu(linear(p, "pfc", patches))
    amap = None
    if cfg.use_genes:
        tokens = gene_encoder(p, "genc", genes, cfg.layout)
        path, amap = coattention(p, "coattn", tokens, h, mask)
        path_mask = None
        g = tokens
        for i in range(cfg.gene_layers):
            g = transformer_layer(p, f"gtf{i}", g, cfg.heads)
        gene_emb, _ = gated_pool(p, "gpool", g)
    else:
        path, path_mask = h, mask
    for i in range(cfg.path_layers):
        path = transformer_layer(p, f"ptf{i}", path, cfg.heads, key_mask=path_mask)
    pooled_grade, _ = gated_pool(p, "pool_grade", path, path_mask)
    pooled_risk, _ = gated_pool(p, "pool_risk", path, path_mask)
    grade_logits = linear(p, "grade", pooled_grade)
    risk_in = ad.concat([pooled_risk, gene_emb], axis=1) if cfg.use_genes else pooled_risk
    hazard_logits = linear(p, "hazard", risk_in)
    return grade_logits, hazard_logits, amap


# ---------------------------------------------------------------------------
# output transforms and losses
# ---------------------------------------------------------------------------

def softmax_np(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def survival_curve(hazards):
    """S(t) = prod_{j<=t} (1 - h_j) along the last axis."""
    return np.cumprod(1.0 - np.asarray(hazards, dtype=np.float64), axis=-1)


def risk_score(hazards):
    """-(1 + sum_t S(t)); lies in [-5, -1] for four bins."""
    return -(1.0 + survival_curve(hazards).sum(axis=-1))


def grade_loss(grade_probs, label, n_grades=None):
    """Mean over classes of binary cross entropy against the one-hot label.

    Works on arrays (one case or a batch) and on graph tensors (batch).
    """
    graph = isinstance(grade_probs, ad.Tensor)
    shape = grade_probs.shape
    n = shape[-1] if n_grades is None else n_grades
    labels = np.atleast_1d(np.asarray(label))
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"grade label out of range 0..{n - 1}")
    onehot = np.eye(n, dtype=np.float64)[labels].reshape(shape)
    if graph:
        pc = ad.clip(grade_probs, PROB_CLAMP, 1 - PROB_CLAMP)
        y = onehot.astype(ad.default_dtype())
        ll = ad.log(pc) * y + ad.log(1.0 - pc) * (1.0 - y)
        return -ll.mean()
    p = np.clip(np.asarray(grade_probs, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(onehot * np.log(p) + (1 - onehot) * np.log(1 - p)))


def survival_nll_loss(hazards, time_bin, censored):
    """Discrete-time survival negative log-likelihood, averaged over the batch.

    Uncensored: -[log S(bin-1) + log h(bin)].  Censored: -log S(bin).
    """
    graph = isinstance(hazards, ad.Tensor)
    shape = hazards.shape
    bins = np.atleast_1d(np.asarray(time_bin, dtype=int))
    cens = np.atleast_1d(np.asarray(censored, dtype=np.float64))
    if np.any(bins < 1) or np.any(bins > shape[-1]):
        raise ValueError("time bin must lie in 1..n_bins")
    K = shape[-1]
    at = np.eye(K)[bins - 1]                               # one-hot of the event bin
    before = (np.arange(K)[None, :] < (bins - 1)[:, None]).astype(np.float64)
    upto = before + at
    c = cens[:, None]
    w_log1m = (c * upto + (1 - c) * before).reshape(shape)
    w_log = ((1 - c) * at).reshape(shape)
    if graph:
        dt = ad.default_dtype()
        h = ad.clip(hazards, PROB_CLAMP, 1 - PROB_CLAMP)
        ll = ad.log(1.0 - h) * w_log1m.astype(dt) + ad.log(h) * w_log.astype(dt)
        return -ll.sum() * (1.0 / len(bins))
    h = np.clip(np.asarray(hazards, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    ll = np.log(1 - h) * w_log1m + np.log(h) * w_log
    return float(-ll.sum() / len(bins))


def joint_loss(l_grade, l_risk, lam=0.3, swap=False):
    """lam * L_grade + (1 - lam) * L_risk; ``swap`` puts lam on the risk term."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if swap:
        l_grade, l_risk = l_risk, l_grade
    return l_grade * lam + l_risk * (1.0 - lam)


# ---------------------------------------------------------------------------
# model wrapper
# ---------------------------------------------------------------------------

@dataclass
class MCATGR:
    params: dict
    cfg: PredictorConfig

    def forward_batch(self, patches, genes, mask=None, raw=False):
        """Grade probabilities (softmax, or per-class sigmoid if ``raw``), hazards, maps."""
        p = {k: ad.Tensor(v) for k, v in self.params.items()}
        genes = np.zeros((len(patches), self.cfg.layout.total), np.float32) if genes is None else genes
        gl, hl, amap = mcat_gr_logits(p, ad.Tensor(patches), ad.Tensor(np.asarray(genes, np.float32)),
                                      self.cfg, mask)
        hz = _sigmoid(hl.data)
        probs = _sigmoid(gl.data) if raw else softmax_np(gl.data)
        return probs, hz, None if amap is None else amap.data

    def predict(self, patch_set: PatchSet, profile=None):
        probs, hz, amap = self.forward_batch(patch_set.embeddings[None],
                                             None if profile is None else np.asarray(profile)[None])
        return PredictorOutput(probs[0], hz[0], survival_curve(hz[0]), float(risk_score(hz[0])),
                               None if amap is None else amap[0])

    def predict_many(self, patch_sets, profiles=None, batch_size=64, raw=False):
        """Batched inference -> (grade probs (n, N), hazards (n, 4), risks (n,))."""
        probs, hazards = [], []
        for s in range(0, len(patch_sets), batch_size):
            chunk = patch_sets[s:s + batch_size]
            patches, mask = pad_patches(chunk)
            genes = None if profiles is None else np.asarray(profiles[s:s + batch_size], np.float32)
            pr, hz, _ = self.forward_batch(patches, genes, mask, raw)
            probs.append(pr)
            hazards.append(hz)
        hazards = np.concatenate(hazards)
        return np.concatenate(probs), hazards, risk_score(hazards)


def mcat_gr_forward(patch_set, profile, params, cfg: PredictorConfig):
    return MCATGR(params, cfg).predict(patch_set, profile)


def distributed_predict(patch_set: PatchSet, profile, params, cfg: PredictorConfig, window=1):
    """Predict from each window of ``window`` consecutive patches independently.

    Returns a dict with grade-probability, predicted-grade and risk grids
    aligned to the patch coordinates (NaN where no patch), plus the mean of
    the distributed predictions.
    """
    if len(patch_set) == 0:
        raise ValueError("empty patch set")
    if window < 1:
        raise ValueError("window must be >= 1")
    model = MCATGR(params, cfg)
    pieces = [PatchSet(patch_set.embeddings[s:s + window], patch_set.coords[s:s + window],
                       patch_set.magnification, patch_set.grid_shape)
              for s in range(0, len(patch_set), window)]
    profiles = None if profile is None else np.repeat(np.asarray(profile)[None], len(pieces), 0)
    probs, _, risks = model.predict_many(pieces, profiles)
    rows, cols = patch_set.grid_shape
    risk_grid = np.full((rows, cols), np.nan)
    grade_grid = np.full((rows, cols, cfg.n_grades), np.nan)
    class_grid = np.full((rows, cols), -1)
    for i, piece in enumerate(pieces):
        for r, c in piece.coords:
            risk_grid[r, c] = risks[i]
            grade_grid[r, c] = probs[i]
            class_grid[r, c] = int(np.argmax(probs[i]))
    return {
        "risk_grid": risk_grid,
        "grade_grid": grade_grid,
        "grade_class_grid": class_grid,
        "mean_grade_probs": probs.mean(axis=0),
        "mean_risk": float(risks.mean()),
    }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class PredictorTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-4
    lam: float = 0.3
    swap_lambda: bool = False
    seed: int = 0
    lr_schedule: str = "constant"


def batch_loss(p, batch, cfg, lam, swap):
    gl, hl, _ = mcat_gr_logits(p, batch["patches"], batch["genes"], cfg, batch.get("mask"))
    lg = grade_loss(ad.sigmoid(gl), batch["grade"], cfg.n_grades)
    lr_ = survival_nll_loss(ad.sigmoid(hl), batch["time_bin"], batch["censored"])
    return joint_loss(lg, lr_, lam, swap)


def evaluate_loss(model, patch_sets, profiles, grades, time_bins, censored, lam, swap=False):
    """Joint loss of a frozen model on a labelled set (arrays, no graph)."""
    probs, hazards, _ = model.predict_many(patch_sets, profiles, raw=True)
    lg = grade_loss(probs, np.asarray(grades), model.cfg.n_grades)
    lr_ = survival_nll_loss(hazards, time_bins, censored)
    return joint_loss(lg, lr_, lam, swap)


def train_mcat_gr(patch_sets, profiles, grades, time_bins, censored, cfg: PredictorConfig,
                  train_cfg: PredictorTrainConfig, params=None, opt_state=None, start_epoch=0,
                  callback=None, val=None, best=None):
    """Adam on the joint loss; randomness derived from (seed, epoch) for resumability.

    ``val`` = (patch_sets, profiles, grades, time_bins, censored) turns on model
    selection: the returned parameters are those of the epoch with the lowest
    validation loss, and the history holds both curves.  ``best`` =
    (val loss, params) carries that selection across a resumed run; the
    callback receives it as its last argument.
    """
    if params is None:
        params = init_mcat_gr(cfg, train_cfg.seed)
    if opt_state is None:
        opt_state = ad.adam_init(params, train_cfg.lr)
    patches_all, mask_all = pad_patches(patch_sets)
    n = len(patch_sets)
    genes_all = (np.zeros((n, cfg.layout.total), np.float32) if profiles is None
                 else np.asarray(profiles, np.float32))
    grades, time_bins = np.asarray(grades), np.asarray(time_bins)
    censored = np.asarray(censored, dtype=np.float64)
    history = {"train": [], "val": []}
    best = (np.inf, None) if best is None else best
    for epoch in range(start_epoch, train_cfg.epochs):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        opt_state.lr = ad.scheduled_lr(train_cfg.lr, epoch, train_cfg.epochs, train_cfg.lr_schedule)
        losses = []
        for s in range(0, n, train_cfg.batch_size):
            idx = order[s:s + train_cfg.batch_size]
            inputs = {"patches": patches_all[idx], "genes": genes_all[idx]}
            meta = {"grade": grades[idx], "time_bin": time_bins[idx], "censored": censored[idx],
                    "mask": None if mask_all is None else mask_all[idx]}
            g = ad.trace(lambda p, x: batch_loss(p, {**x, **meta}, cfg, train_cfg.lam,
                                                 train_cfg.swap_lambda), params, inputs)
            loss = float(g.output_value)
            if not np.isfinite(loss):
                raise ad.NonFiniteError(f"non-finite predictor loss at epoch {epoch}")
            ad.adam_step(params, ad.gradient(g), opt_state)
            losses.append(loss)
        history["train"].append(float(np.mean(losses)))
        if val is not None:
            vloss = evaluate_loss(MCATGR(params, cfg), *val, train_cfg.lam, train_cfg.swap_lambda)
            history["val"].append(vloss)
            if vloss < best[0]:
                best = (vloss, {k: v.copy() for k, v in params.items()})
        log.debug("mcat_gr epoch %d loss %.4f", epoch, history["train"][-1])
        if callback is not None:
            callback(epoch, params, opt_state, history, best)
    if best[1] is not None:
        params = best[1]
    return params, opt_state, history
