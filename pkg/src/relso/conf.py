"""Run configuration: dataclass schemas merged through OmegaConf

Precedence, lowest first: schema defaults, the config file, ``RELSO_SEED``
(seed only), named command-line flags, ``--set key=value`` overrides.
"""
import logging
import os
from dataclasses import dataclass, field, fields
from typing import List, Optional

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from relso.diffcore import DEFAULT_LR
from relso.exceptions import ImproperlyConfigured
from relso.models import ModelConfig, make_config
from relso.optimizers import DEFAULT_BUDGET, DEFAULT_N_SEEDS, METHODS
from relso.seqdata import ToyLandscapeSpec
from relso.trainer import TrainConfig

logger = logging.getLogger(__name__)

SEED_ENV = "RELSO_SEED"
LOCK_NAME = "config.lock"


@dataclass
class DataConfig:
    path: Optional[str] = None
    sequence_column: str = "sequence"
    fitness_column: str = "fitness"
    split_column: str = "split"
    alphabet: Optional[str] = None
    max_len: Optional[int] = None
    split_seed: int = 0


@dataclass
class ToyConfig:
    length: int = 8
    alphabet_size: int = 20
    n_epistatic_pairs: int = 2
    seed: int = 0
    noise_std: float = 0.0
    n_samples: int = 2048
    exhaustive: bool = False
    epistasis_scale: float = 1.0


@dataclass
class ModelSection:
    preset: str = "relso"
    scale: str = "desk"
    n_layers: Optional[int] = None
    n_heads: Optional[int] = None
    d_embed: Optional[int] = None
    d_hidden: Optional[int] = None
    d_latent: Optional[int] = None
    decoder_channels: Optional[int] = None
    decoder_layers: Optional[int] = None
    decoder_kernel: Optional[int] = None
    fitness_hidden: Optional[int] = None
    gamma: Optional[float] = None
    alpha: Optional[float] = None
    eta: Optional[float] = None
    interp_weight: Optional[float] = None
    latent_norm_weight: Optional[float] = None
    spectral_weight: Optional[float] = None
    neg_scale: Optional[float] = None
    neg_samples: Optional[int] = None
    interp_fraction: Optional[float] = None
    interp_k: Optional[int] = None


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 64
    lr: float = DEFAULT_LR
    eval_every: int = 100
    checkpoint_every: int = 0
    clip_norm: float = 1.0
    optimizer: str = "adam"
    progress: Optional[bool] = None


@dataclass
class OptimizeConfig:
    checkpoint: Optional[str] = None
    methods: List[str] = field(default_factory=lambda: [m for m in METHODS if m != "ga-cycle"])
    n_seeds: int = DEFAULT_N_SEEDS
    budget: int = DEFAULT_BUDGET
    threshold: Optional[float] = None
    threshold_pct: float = 95.0
    threshold_preset: Optional[str] = None
    oracle: Optional[str] = None
    ga_eps: float = 0.05
    ga_steps: int = 60
    ga_tol: float = 1e-4
    hc_candidates: int = 5
    step_scale: float = 0.1
    kT: float = 0.05


@dataclass
class EvalConfig:
    checkpoint: Optional[str] = None
    checkpoints: List[str] = field(default_factory=list)
    split: Optional[str] = "test"
    k: int = 10
    n_components: int = 2
    n_walks: int = 100
    walk_steps: int = 10
    threshold_pct: float = 90.0
    seed_sequence: Optional[str] = None
    top_n: Optional[int] = None


@dataclass
class RunConfig:
    command: str = "train"
    seed: Optional[int] = None
    out: Optional[str] = None
    log_level: str = "INFO"
    data: DataConfig = field(default_factory=DataConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _nest(mapping):
    """Expand flat dotted keys (``model.d_latent: 8``) into nested mappings"""
    nested = {}
    for key, value in mapping.items():
        if isinstance(value, dict):
            value = _nest(value)
        node = nested
        parts = str(key).split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        if isinstance(value, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]].update(value)
        else:
            node[parts[-1]] = value
    return nested


def load_config(path=None, flags=None, overrides=(), environ=None):
    """Merged and validated run configuration

    ``flags`` maps dotted keys to values (``None`` values are ignored);
    ``overrides`` is a list of ``key=value`` strings.
    """
    environ = os.environ if environ is None else environ
    try:
        config = OmegaConf.structured(RunConfig)
        if path:
            if not os.path.exists(path):
                raise ImproperlyConfigured("config file not found: {}".format(path))
            loaded = OmegaConf.to_container(OmegaConf.load(path), resolve=True) or {}
            config = OmegaConf.merge(config, _nest(loaded))
        if config.seed is None and environ.get(SEED_ENV):
            try:
                config.seed = int(environ[SEED_ENV])
            except ValueError:
                raise ImproperlyConfigured("{} must be an integer, got {!r}".format(SEED_ENV, environ[SEED_ENV]))
        for key, value in (flags or {}).items():
            if value is not None:
                OmegaConf.update(config, key, value, merge=True)
        if overrides:
            config = OmegaConf.merge(config, OmegaConf.from_dotlist(list(overrides)))
    except OmegaConfBaseException as e:
        raise ImproperlyConfigured("invalid configuration: {}".format(e))
    if config.seed is None:
        config.seed = 0
    return config


def save_lock(config, out_dir):
    path = os.path.join(out_dir, LOCK_NAME)
    OmegaConf.save(config, path, resolve=True)
    return path


def model_config(config):
    section = config.model
    overrides = {
        f.name: getattr(section, f.name)
        for f in fields(ModelSection)
        if f.name not in ("preset", "scale") and getattr(section, f.name) is not None
    }
    unknown = set(overrides) - {f.name for f in fields(ModelConfig)}
    if unknown:
        raise ImproperlyConfigured("unknown model option(s): {}".format(", ".join(sorted(unknown))))
    return make_config(section.preset, section.scale, **overrides)


def train_config(config, progress=False):
    section = config.train
    return TrainConfig(
        steps=section.steps,
        batch_size=section.batch_size,
        lr=section.lr,
        seed=config.seed,
        eval_every=section.eval_every,
        checkpoint_every=section.checkpoint_every,
        preset=config.model.preset,
        clip_norm=section.clip_norm,
        optimizer=section.optimizer,
        progress=progress if section.progress is None else section.progress,
    )


def toy_spec(config):
    return ToyLandscapeSpec(**OmegaConf.to_container(config.toy))


def optimizer_hyperparams(config):
    section = config.optimize
    ga = {"eps": section.ga_eps, "K": section.ga_steps, "tol": section.ga_tol}
    climb = {"n_candidates": section.hc_candidates, "step_scale": section.step_scale}
    return {
        "ga": ga,
        "ga-cycle": dict(ga),
        "hc": climb,
        "shc": dict(climb),
        "mcmc-latent": {"step_scale": section.step_scale, "kT": section.kT},
        "mcmc-seq": {"kT": section.kT},
        "de": {},
    }
