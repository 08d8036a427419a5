"""Run configuration: one JSON document holding every hyperparameter.

Three presets exist.  ``reference`` keeps the published hyperparameters
(T=1000, linear betas 1e-4..0.02, lambda 0.3, alpha 0.1, Adam lr 1e-4 for
the generator and 2e-4 for the predictor) at full model width.  ``desk``
is the scaled-down setting used for the experiments in tests/ and demos/,
and ``tiny`` is a seconds-long smoke configuration.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .crossmodal import REFERENCE_GROUP_SIZES, CrossmodalConfig
from .diffusion import TrainConfig, build_schedule
from .predictor import PredictorConfig, PredictorTrainConfig
from .synthdata import GBMLGG_CASE_COUNTS, CohortConfig

PRESETS = ("reference", "desk", "tiny")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    shape: str = "linear"

    def schedule(self):
        return build_schedule(self.T, self.beta_start, self.beta_end, self.shape)


@dataclass
class RunConfig:
    preset: str = "reference"
    seed: int = 0
    alpha: float = 0.1
    literal_risk_rule: bool = False
    synth_samples: int = 1
    cohort: CohortConfig = field(default_factory=lambda: CohortConfig(
        group_sizes=REFERENCE_GROUP_SIZES, embed_dim=1024,
        **dict(zip(("n_train", "n_val", "n_cal", "n_test"), GBMLGG_CASE_COUNTS))))
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    pathgen: CrossmodalConfig = field(default_factory=lambda: CrossmodalConfig(
        group_sizes=REFERENCE_GROUP_SIZES, patch_dim=1024, embed_dim=1024, hidden=256))
    pathgen_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-4))
    predictor: PredictorConfig = field(default_factory=lambda: PredictorConfig(
        group_sizes=REFERENCE_GROUP_SIZES, patch_dim=1024, embed_dim=1024, hidden=256))
    predictor_train: PredictorTrainConfig = field(default_factory=lambda: PredictorTrainConfig(
        lr=2e-4, lam=0.3))
    comment: str = ("reference preset: published T, beta range, lambda, alpha and learning "
                    "rates; widths follow a 1024-d patch encoder")

    # -- presets -----------------------------------------------------------

    @classmethod
    def desk(cls, seed=0):
        cohort = CohortConfig(seed=seed)
        return cls(
            preset="desk", seed=seed, cohort=cohort, synth_samples=8,
            diffusion=DiffusionConfig(T=100, beta_start=1e-3, beta_end=0.2),
            pathgen=CrossmodalConfig(group_sizes=cohort.group_sizes, patch_dim=cohort.embed_dim),
            pathgen_train=TrainConfig(epochs=150, batch_size=32, lr=2e-3, seed=seed,
                                      lr_schedule="cosine"),
            predictor=PredictorConfig(group_sizes=cohort.group_sizes, patch_dim=cohort.embed_dim),
            predictor_train=PredictorTrainConfig(epochs=25, batch_size=32, lr=3e-4, lam=0.3,
                                                 swap_lambda=True, seed=seed),
            comment="desk preset: scaled cohort, widths, diffusion steps and learning rates",
        )

    @classmethod
    def tiny(cls, seed=0):
        sizes = (2, 3, 3, 2, 4, 2)
        cohort = CohortConfig(group_sizes=sizes, embed_dim=8, patches_per_slide=6, n_train=24,
                              n_val=8, n_cal=8, n_test=8, seed=seed)
        small = dict(group_sizes=sizes, patch_dim=8, embed_dim=8, hidden=8, heads=2, ff_mult=2)
        return cls(
            preset="tiny", seed=seed, cohort=cohort,
            diffusion=DiffusionConfig(T=10, beta_start=1e-2, beta_end=0.5),
            pathgen=CrossmodalConfig(**small),
            pathgen_train=TrainConfig(epochs=1, batch_size=8, lr=1e-3, seed=seed),
            predictor=PredictorConfig(**small, path_layers=1, gene_layers=1),
            predictor_train=PredictorTrainConfig(epochs=1, batch_size=8, lr=1e-3, seed=seed),
            comment="tiny preset: smoke-test sizes only",
        )

    @classmethod
    def preset_named(cls, name, seed=0):
        if name == "reference":
            return cls(seed=seed)
        if name == "desk":
            return cls.desk(seed)
        if name == "tiny":
            return cls.tiny(seed)
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")

    # -- overrides ---------------------------------------------------------

    def with_seed(self, seed):
        """Same config with every seed field set from ``seed``."""
        return replace(self, seed=seed, cohort=replace(self.cohort, seed=seed),
                       pathgen_train=replace(self.pathgen_train, seed=seed),
                       predictor_train=replace(self.predictor_train, seed=seed))

    def with_lambda(self, lam):
        if not 0 <= lam <= 1:
            raise ConfigError("lambda must lie in [0, 1]")
        return replace(self, predictor_train=replace(self.predictor_train, lam=lam))

    def with_alpha(self, alpha):
        if not 0 < alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        return replace(self, alpha=alpha)

    # -- (de)serialisation -------------------------------------------------

    def to_dict(self):
        d = asdict(self)
        d["cohort"] = self.cohort.to_dict()
        for k in ("pathgen", "predictor"):
            d[k]["group_sizes"] = list(d[k]["group_sizes"])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        parts = {"cohort": CohortConfig, "diffusion": DiffusionConfig, "pathgen": CrossmodalConfig,
                 "pathgen_train": TrainConfig, "predictor": PredictorConfig,
                 "predictor_train": PredictorTrainConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            base = cls.preset_named(d.get("preset", "reference"))
            kw = {}
            for k, v in d.items():
                if k in parts:
                    sub = dict(v)
                    if "group_sizes" in sub:
                        sub["group_sizes"] = tuple(sub["group_sizes"])
                    if k == "cohort":
                        kw[k] = CohortConfig.from_dict({**getattr(base, k).to_dict(), **sub})
                    else:
                        kw[k] = replace(getattr(base, k), **sub)
                else:
                    kw[k] = v
            cfg = replace(base, **kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None

    @classmethod
    def load(cls, path_or_preset, seed=None):
        """A preset name or a path to a JSON config; ``seed`` overrides all seeds."""
        if path_or_preset in PRESETS:
            cfg = cls.preset_named(path_or_preset)
        else:
            try:
                text = Path(path_or_preset).read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config {path_or_preset}: {e}") from None
            cfg = cls.from_json(text)
        return cfg if seed is None else cfg.with_seed(seed)

    def validate(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0 <= self.predictor_train.lam <= 1:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.synth_samples < 1:
            raise ConfigError("synth_samples must be >= 1")
        if self.diffusion.T < 1:
            raise ConfigError("T must be >= 1")
        g = tuple(self.cohort.group_sizes)
        if tuple(self.pathgen.group_sizes) != g or tuple(self.predictor.group_sizes) != g:
            raise ConfigError("gene group sizes differ between cohort and models")
        if self.pathgen.patch_dim != self.cohort.embed_dim or self.predictor.patch_dim != self.cohort.embed_dim:
            raise ConfigError("patch_dim must equal the cohort embedding size")
        for name, tc in (("pathgen_train", self.pathgen_train), ("predictor_train", self.predictor_train)):
            if tc.epochs < 0 or tc.batch_size < 1 or tc.lr <= 0:
                raise ConfigError(f"{name}: epochs >= 0, batch_size >= 1 and lr > 0 required")
        return self
