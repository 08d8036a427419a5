"""Gene encoders/decoders, genomic-guided co-attention and the PathGen noise network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import (ParamBuilder, attention, init_transformer_layer, linear,
                     mask_bias, sinusoidal_embedding, transformer_layer)

GENE_GROUPS = (
    "tumour_suppressor",
    "oncogene",
    "protein_kinase",
    "cell_differentiation",
    "transcription_factor",
    "cytokine_growth_factor",
)

# gene counts per group for the GBMLGG cohort (shape testing only)
REFERENCE_GROUP_SIZES = (84, 314, 498, 424, 1396, 428)
DESK_GROUP_SIZES = (8, 16, 24, 20, 48, 16)


@dataclass(frozen=True)
class GeneLayout:
    """Sizes of the six ordered gene groups of a profile vector."""
    sizes: tuple = DESK_GROUP_SIZES

    def __post_init__(self):
        if len(self.sizes) != len(GENE_GROUPS):
            raise ValueError(f"expected {len(GENE_GROUPS)} gene groups, got {len(self.sizes)}")
        if any(int(s) < 1 for s in self.sizes):
            raise ValueError("gene group sizes must be >= 1")

    @property
    def total(self):
        return int(sum(self.sizes))

    @property
    def offsets(self):
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)]))

    def group_slice(self, g):
        o = self.offsets
        return slice(o[g], o[g + 1])

    def split(self, profile):
        profile = np.asarray(profile)
        if profile.shape[-1] != self.total:
            raise ValueError(f"profile has {profile.shape[-1]} genes, layout expects {self.total}")
        return [profile[..., self.group_slice(g)] for g in range(len(self.sizes))]


@dataclass
class PatchSet:
    """Patch embeddings of one slide plus their grid coordinates."""
    embeddings: np.ndarray             # (M, D)
    coords: np.ndarray                 # (M, 2) int (row, col)
    magnification: int = 1
    grid_shape: tuple | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.embeddings.ndim != 2 or len(self.embeddings) < 1:
            raise ValueError("a patch set needs at least one (1 x D) embedding")
        if len(self.coords) != len(self.embeddings):
            raise ValueError("one coordinate per patch required")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("patch embeddings must be finite")
        if len({tuple(c) for c in self.coords}) != len(self.coords):
            raise ValueError("patch coordinates must be unique")
        if self.grid_shape is None:
            self.grid_shape = tuple(int(x) for x in self.coords.max(axis=0) + 1)

    def __len__(self):
        return len(self.embeddings)

    @property
    def dim(self):
        return self.embeddings.shape[1]


def pad_patches(patch_sets):
    """Stack variable-length patch sets into (B, M, D) plus a 0/1 mask."""
    m = max(len(ps) for ps in patch_sets)
    d = patch_sets[0].dim
    out = np.zeros((len(patch_sets), m, d), np.float32)
    mask = np.zeros((len(patch_sets), m), np.float32)
    for i, ps in enumerate(patch_sets):
        out[i, :len(ps)] = ps.embeddings
        mask[i, :len(ps)] = 1
    if mask.all():
        mask = None
    return out, mask


@dataclass(frozen=True)
class CrossmodalConfig:
    group_sizes: tuple = DESK_GROUP_SIZES
    patch_dim: int = 64
    embed_dim: int = 64
    hidden: int = 64
    stages: int = 3
    heads: int = 4
    ff_mult: int = 4
    share_stages: bool = False

    @property
    def layout(self):
        return GeneLayout(tuple(self.group_sizes))


# ---------------------------------------------------------------------------
# gene encoder / decoder
# ---------------------------------------------------------------------------

def init_gene_encoder(pb, layout, hidden, embed):
    for g, size in enumerate(layout.sizes):
        pb.linear(f"in{g}", size, hidden)
    pb.linear("h1", hidden, hidden, stack=6)
    pb.linear("h2", hidden, hidden, stack=6)
    pb.linear("out", hidden, embed, stack=6)


def gene_encoder(p, name, x, layout):
    """Per-group four-layer ELU encoder: (B, G) -> (B, 6, E)."""
    B = x.shape[0]
    first = []
    for g in range(6):
        sl = layout.group_slice(g)
        xg = ad.slice_(x, sl.start, sl.stop, axis=1)
        h = ad.elu(linear(p, f"{name}.in{g}", xg))
        first.append(h.reshape(1, B, h.shape[-1]))
    h = ad.concat(first, axis=0)                       # (6, B, H)
    h = ad.elu(linear(p, f"{name}.h1", h))
    h = ad.elu(linear(p, f"{name}.h2", h))
    h = ad.elu(linear(p, f"{name}.out", h))            # (6, B, E)
    return h.transpose(1, 0, 2)


def init_gene_decoder(pb, layout, hidden, embed):
    pb.linear("h0", embed, hidden, stack=6)
    pb.linear("h1", hidden, hidden, stack=6)
    pb.linear("h2", hidden, hidden, stack=6)
    for g, size in enumerate(layout.sizes):
        pb.linear(f"out{g}", hidden, size)


def gene_decoder(p, name, tokens, layout):
    """Per-group decoder, ELU between layers, linear last: (B, 6, E) -> (B, G)."""
    B = tokens.shape[0]
    h = tokens.transpose(1, 0, 2)                      # (6, B, E)
    h = ad.elu(linear(p, f"{name}.h0", h))
    h = ad.elu(linear(p, f"{name}.h1", h))
    h = ad.elu(linear(p, f"{name}.h2", h))
    outs = []
    for g in range(6):
        hg = ad.slice_(h, g, g + 1, axis=0).reshape(B, h.shape[-1])
        outs.append(linear(p, f"{name}.out{g}", hg))
    return ad.concat(outs, axis=1)


def init_coattention(pb, embed, patch_dim):
    pb.linear("q", embed, embed, bias=False)
    pb.linear("k", patch_dim, embed, bias=False)
    pb.linear("v", patch_dim, embed, bias=False)


def coattention(p, name, genes, patches, mask=None):
    """Gene tokens query patch embeddings.

    genes (B, 6, E), patches (B, M, D) -> co-attended (B, 6, E), map (B, 6, M).
    """
    q = linear(p, f"{name}.q", genes)
    k = linear(p, f"{name}.k", patches)
    v = linear(p, f"{name}.v", patches)
    return attention(q, k, v, mask_bias(mask))


# ---------------------------------------------------------------------------
# PathGen noise network
# ---------------------------------------------------------------------------

def init_pathgen(cfg: CrossmodalConfig, seed=0):
    pb = ParamBuilder(np.random.default_rng(seed))
    layout = cfg.layout
    init_gene_encoder(pb.scope("enc"), layout, cfg.hidden, cfg.embed_dim)
    pb.linear("time.0", cfg.embed_dim, cfg.embed_dim)
    pb.linear("time.1", cfg.embed_dim, cfg.embed_dim)
    n = 1 if cfg.share_stages else cfg.stages
    for s in range(n):
        init_coattention(pb.scope(f"coattn{s}"), cfg.embed_dim, cfg.patch_dim)
    for s in range(cfg.stages):
        init_transformer_layer(pb.scope(f"tf{s}"), cfg.embed_dim, cfg.ff_mult)
    init_gene_decoder(pb.scope("dec"), layout, cfg.hidden, cfg.embed_dim)
    return pb.params


def pathgen_forward(p, x_t, t, patches, cfg: CrossmodalConfig, mask=None,
                    return_maps=False, head=None):
    """Predict the injected noise for noisy profiles ``x_t`` at timesteps ``t``.

    x_t (B, G) tensor, t (B,) ints, patches (B, M, D) tensor.  ``head`` is an
    optional callable ``(x_t, decoder_out) -> eps``; the diffusion wrapper uses
    it to add the closed-form noise estimate of a Gaussian fitted to the
    training profiles, so the network only learns the patch-conditional
    correction.
    """
    layout = cfg.layout
    tokens = gene_encoder(p, "enc", x_t, layout)
    temb = sinusoidal_embedding(t, cfg.embed_dim)
    temb = linear(p, "time.1", ad.elu(linear(p, "time.0", temb)))
    tokens = tokens + temb.reshape(temb.shape[0], 1, cfg.embed_dim)
    maps = []
    for s in range(cfg.stages):
        ca = "coattn0" if cfg.share_stages else f"coattn{s}"
        co, amap = coattention(p, ca, tokens, patches, mask)
        maps.append(amap)
        tokens = transformer_layer(p, f"tf{s}", tokens + co, cfg.heads, pre_norm=True)
    eps = gene_decoder(p, "dec", tokens, layout)
    if head is not None:
        eps = head(x_t, eps)
    if return_maps:
        return eps, maps
    return eps


def pathgen_eps(x_t, t, patch_set, params, cfg: CrossmodalConfig):
    """Array-level convenience: one profile and one PatchSet -> predicted noise."""
    x = np.asarray(x_t, dtype=ad.default_dtype()).reshape(1, -1)
    if x.shape[1] != cfg.layout.total:
        raise ValueError(f"profile has {x.shape[1]} genes, expected {cfg.layout.total}")
    p = {k: ad.Tensor(v) for k, v in params.items()}
    out = pathgen_forward(p, ad.Tensor(x), np.array([t]), ad.Tensor(patch_set.embeddings[None]), cfg)
    return out.data[0]


def encode_genes(profile, params, layout, name="enc"):
    """Array-level gene encoding of a batch (B, G) or single (G,) profile."""
    x = np.asarray(profile, dtype=ad.default_dtype())
    single = x.ndim == 1
    x = x.reshape(-1, layout.total) if x.shape[-1] == layout.total else None
    if x is None:
        raise ValueError("profile size does not match the gene layout")
    p = {k: ad.Tensor(v) for k, v in params.items()}
    out = gene_encoder(p, name, ad.Tensor(x), layout).data
    return out[0] if single else out


def decode_genes(embeddings, params, layout, name="dec"):
    e = np.asarray(embeddings, dtype=ad.default_dtype())
    single = e.ndim == 2
    e = e.reshape(-1, 6, e.shape[-1])
    p = {k: ad.Tensor(v) for k, v in params.items()}
    out = gene_decoder(p, name, ad.Tensor(e), layout).data
    return out[0] if single else out


def coattend(gene_embeddings, patch_set, params, name="coattn0"):
    """Single-case co-attention: returns (co-attended (6, E), map (6, M))."""
    g = np.asarray(gene_embeddings, dtype=ad.default_dtype())[None]
    p = {k: ad.Tensor(v) for k, v in params.items()}
    co, amap = coattention(p, name, ad.Tensor(g), ad.Tensor(patch_set.embeddings[None]))
    return co.data[0], amap.data[0]
