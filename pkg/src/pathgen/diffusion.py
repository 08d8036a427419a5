"""Noise schedule, forward corruption, ancestral sampling and PathGen training."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .crossmodal import CrossmodalConfig, init_pathgen, pad_patches, pathgen_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray          # beta[t-1] for t = 1..T
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray         # sqrt of the posterior variance beta_tilde

    @property
    def T(self):
        return len(self.beta)

    def _idx(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return t - 1


def schedule_from_betas(beta):
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ValueError("need at least one beta")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must lie in (0, 1)")
    if np.any(np.diff(beta) < 0):
        raise ValueError("betas must be non-decreasing")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(beta, alpha, alpha_bar, np.sqrt(beta_tilde))


def build_schedule(T, beta_start=1e-4, beta_end=0.02, shape="linear"):
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if shape != "linear":
        raise ValueError(f"unknown schedule shape {shape!r}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def forward_sample(x0, t, eps, schedule):
    """Closed-form corruption sqrt(abar) x0 + sqrt(1 - abar) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError("noise must match the data shape")
    ab = schedule.alpha_bar[schedule._idx(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def reverse_step(eps_hat, x_t, t, schedule, z):
    """One ancestral step given the predicted noise at scalar timestep t."""
    i = schedule._idx(t)
    if t == 1:
        z = np.zeros_like(x_t)
    a, ab = schedule.alpha[i], schedule.alpha_bar[i]
    mean = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    return (mean + schedule.sigma[i] * z).astype(x_t.dtype)


@dataclass
class GaussianPrior:
    """Gaussian fit of the training profiles, used as an analytic noise baseline.

    For x0 ~ N(mean, U diag(var) U^T) the posterior-mean noise given x_t is
    sqrt(1 - abar) U diag(1 / (abar var + 1 - abar)) U^T (x_t - sqrt(abar) mean).
    The identity prior reduces this to sqrt(1 - abar) x_t.  The network output
    is added on top with weight sqrt(abar (1 - abar)), which vanishes at both
    ends of the schedule where the patches can say little about the noise.
    """
    mean: np.ndarray
    basis: np.ndarray
    var: np.ndarray

    @classmethod
    def fit(cls, profiles, floor=1e-4):
        x = np.asarray(profiles, dtype=np.float64)
        mu = x.mean(axis=0)
        var, basis = np.linalg.eigh(np.cov(x, rowvar=False, bias=True))
        return cls(mu.astype(np.float32), basis.astype(np.float32),
                   np.maximum(var, floor).astype(np.float32))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim, np.float32), np.eye(dim, dtype=np.float32),
                   np.ones(dim, np.float32))

    def head(self, t, schedule):
        """Output closure for the network: (x_t, raw) -> noise estimate."""
        ab = schedule.alpha_bar[schedule._idx(np.asarray(t))].reshape(-1, 1)
        dt = ad.default_dtype()
        shift = (np.sqrt(ab) * self.mean).astype(dt)
        gain = (np.sqrt(1 - ab) / (ab * self.var + 1 - ab)).astype(dt)
        scale = np.sqrt(ab * (1 - ab)).astype(dt)
        basis = self.basis.astype(dt)
        return lambda x_t, raw: ((x_t - shift) @ basis) * gain @ basis.T + raw * scale

    def to_arrays(self):
        return {"prior.mean": self.mean, "prior.basis": self.basis, "prior.var": self.var}

    @classmethod
    def from_arrays(cls, arrays):
        return cls(*(np.asarray(arrays[f"prior.{k}"], np.float32) for k in ("mean", "basis", "var")))


@dataclass
class PathGenModel:
    """Trained noise network: parameters, architecture, schedule and prior."""
    params: dict
    cfg: CrossmodalConfig
    schedule: NoiseSchedule | None = None
    prior: GaussianPrior | None = None

    def predict(self, x_t, t, patches, mask=None):
        p = {k: ad.Tensor(v) for k, v in self.params.items()}
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        head = None
        if self.schedule is not None:
            prior = self.prior or GaussianPrior.identity(x_t.shape[1])
            head = prior.head(t, self.schedule)
        return pathgen_forward(p, ad.Tensor(x_t), t, ad.Tensor(patches), self.cfg, mask,
                               head=head).data


def sample(model, patch_sets, schedule, seeds, n_samples=1):
    """Ancestral sampling for each patch set, one rng seed per case.

    Each case's output depends only on (model, its patch set, its seed), so
    batching does not change the result.  With ``n_samples`` > 1 the result
    is the mean of that many draws, draw k seeded by (seed, k): a Monte Carlo
    estimate of the posterior mean profile.
    """
    single = not isinstance(patch_sets, (list, tuple))
    if single:
        patch_sets, seeds = [patch_sets], [seeds]
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if n_samples > 1:
        draws = [sample(model, list(patch_sets), schedule, [(s, k) for s in seeds])
                 for k in range(n_samples)]
        x = np.mean(draws, axis=0).astype(np.float32)
        return x[0] if single else x
    patches, mask = pad_patches(patch_sets)
    G = model.cfg.layout.total if hasattr(model, "cfg") else model.dim
    T = schedule.T
    noise = np.stack([np.random.default_rng(s).standard_normal((T + 1, G)) for s in seeds])
    noise = noise.astype(np.float32)
    x = noise[:, 0]
    for t in range(T, 0, -1):
        eps_hat = model.predict(x, t, patches, mask)
        x = reverse_step(eps_hat, x, t, schedule, noise[:, T + 1 - t])
        if not np.all(np.isfinite(x)):
            raise ad.NonFiniteError(f"non-finite sample state at t={t}")
    return x[0] if single else x


def diffusion_loss(p, x0, t, eps, patches, schedule, cfg, mask=None, prior=None):
    """Mean squared noise-prediction error for one batch (graph-building)."""
    x_t = forward_sample(x0, t, eps, schedule)
    prior = prior or GaussianPrior.identity(x0.shape[1])
    eps_hat = pathgen_forward(p, ad.Tensor(x_t), t, patches, cfg, mask,
                              head=prior.head(t, schedule))
    diff = eps_hat - eps
    return ad.sum_of_squares(diff) * (1.0 / diff.data.size)


def train_step(params, x0, patches, schedule, rng, cfg, mask=None, prior=None):
    """Draw t and noise, return (loss, grads)."""
    B = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    g = ad.trace(lambda p, x: diffusion_loss(p, x0, t, eps, x["patches"], schedule, cfg, mask, prior),
                 params, {"patches": patches})
    loss = float(g.output_value)
    if not np.isfinite(loss):
        raise ad.NonFiniteError("non-finite diffusion loss")
    return loss, ad.gradient(g)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    lr_schedule: str = "constant"     # or "cosine" (decay to 5% of lr)


def train_pathgen(profiles, patch_sets, cfg, schedule, train_cfg, params=None,
                  opt_state=None, start_epoch=0, callback=None, prior=None):
    """Algorithm-1 loop over epochs; returns (params, opt_state, per-epoch losses).

    Randomness is derived from ``(seed, epoch)`` so resuming at an epoch
    boundary reproduces a fresh run.
    """
    profiles = np.asarray(profiles, np.float32)
    if params is None:
        params = init_pathgen(cfg, train_cfg.seed)
    if opt_state is None:
        opt_state = ad.adam_init(params, train_cfg.lr)
    patches_all, mask_all = pad_patches(patch_sets)
    n = len(profiles)
    history = []
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        opt_state.lr = ad.scheduled_lr(train_cfg.lr, epoch, train_cfg.epochs, train_cfg.lr_schedule)
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, train_cfg.batch_size):
            idx = order[s:s + train_cfg.batch_size]
            mask = None if mask_all is None else mask_all[idx]
            loss, grads = train_step(params, profiles[idx], patches_all[idx], schedule, rng, cfg,
                                     mask, prior)
            ad.adam_step(params, grads, opt_state)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.debug("pathgen epoch %d loss %.4f", epoch, history[-1])
        if callback is not None:
            callback(epoch, params, opt_state, history)
    return params, opt_state, history
