"""Experiment configuration: defaults, validation, JSON round-trip, seeding.

One config object describes a whole experiment — task family, adapter,
metric, trajectory shape, search and meta-training hyper-parameters, seeds
and output directory. It round-trips through JSON unchanged, validates
with field-level messages before anything runs, and owns the one seeding
rule every component derives its random stream from.
"""

import json
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from metricopt.adapter import ADAPTER_KINDS
from metricopt.metrics import METRIC_KINDS

TASK_FAMILIES = ("synthetic", "a9a")
OBS_SCHEDULES = ("stride", "random")


class ConfigError(ValueError):
    """A config field failed validation; the message names the field."""


@dataclass
class TaskConfig:
    # "synthetic" generates data; "a9a" reads a libsvm-format file from
    # data_path. With share_base=False every task draws its own dataset
    # (synthetic only), splits and pretrained base model; share_base=True
    # fixes all three from the global seed, so tasks differ only in
    # adapter init and batch order — the protocol for finetuning one
    # pretrained model many times.
    family: str = "synthetic"
    data_path: str = ""            # libsvm-format file for family "a9a"
    share_base: bool = False
    n: int = 600
    data_dim: int = 10
    imbalance: float = 0.25
    separation: float = 2.0
    metric: str = "mcr"
    adapter_kind: str = "dynamic_bias"
    adapter_dim: int = 16
    film_layer: int = 0
    phi_scale: float = 0.01        # spread of the random adapter start
    hidden: tuple = (100, 30, 10)
    batchnorm: bool = True
    pretrain_steps: int = 150
    pretrain_lr: float = 1e-3


@dataclass
class FinetuneConfig:
    steps: int = 50                # T, both meta-train trajectories and tests
    lr: float = 0.05
    batch_size: int = 32
    obs_frac: float = 0.05         # K as a fraction of the step grid
    obs_schedule: str = "stride"
    metric_every: int = 0


@dataclass
class SearchConfig:
    k: int = 3                     # gradient-subspace size
    p: int = 3                     # antithetic pairs per step
    s2: float = 0.01               # perturbation variance
    lam: float = 1.0               # weight of the search direction


@dataclass
class MetaConfig:
    n_tasks: int = 200             # N
    inner_steps: int = 50
    inner_lr: float = 0.005        # alpha
    eta0: float = 1.0              # merge rate, decayed linearly to 0
    offline: bool = False
    use_oe: bool = True
    stats_reservoir: int = 5
    eval_every: int = 0
    heldout_tasks: int = 3


@dataclass
class LearnedOptConfig:
    iterations: int = 0            # 0: don't train an optimizer net
    unroll_steps: int = 20
    pairs: int = 4
    eps: float = 0.1
    lr: float = 1e-2
    joint_value_fit: int = 0


@dataclass
class ExperimentConfig:
    gamma: float = 10.0            # regression-vs-ordinal weight in Eq. 2
    seed: int = 0                  # base seed every stream fans out from
    seeds: list = field(default_factory=lambda: list(range(1, 11)))
    out_dir: str = "runs"
    task: TaskConfig = field(default_factory=TaskConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    learned: LearnedOptConfig = field(default_factory=LearnedOptConfig)


_GROUPS = {"task": TaskConfig, "finetune": FinetuneConfig,
           "search": SearchConfig, "meta": MetaConfig,
           "learned": LearnedOptConfig}


def _fail(name, message):
    raise ConfigError(f"{name}: {message}")


def _check(cond, name, message):
    if not cond:
        _fail(name, message)


def validate(cfg):
    """Raise ConfigError naming the first offending field; return cfg."""
    t = cfg.task
    _check(t.family in TASK_FAMILIES, "task.family",
           f"{t.family!r} not in {TASK_FAMILIES}")
    _check(t.metric in METRIC_KINDS, "task.metric",
           f"{t.metric!r} not in {METRIC_KINDS}")
    _check(t.adapter_kind in ADAPTER_KINDS, "task.adapter_kind",
           f"{t.adapter_kind!r} not in {ADAPTER_KINDS}")
    _check(t.adapter_dim >= 1, "task.adapter_dim", "must be >= 1")
    _check(t.n >= 40, "task.n", "need at least 40 samples to split")
    _check(t.data_dim >= 1, "task.data_dim", "must be >= 1")
    _check(0.0 < t.imbalance < 1.0, "task.imbalance", "must be in (0, 1)")
    _check(t.separation > 0.0, "task.separation", "must be positive")
    _check(len(t.hidden) >= 1, "task.hidden", "need at least one hidden layer")
    _check(all(int(h) >= 1 for h in t.hidden), "task.hidden",
           "layer widths must be >= 1")
    _check(t.film_layer >= 0, "task.film_layer", "must be >= 0")
    _check(t.phi_scale > 0.0, "task.phi_scale", "must be positive")
    _check(t.pretrain_steps >= 0, "task.pretrain_steps", "must be >= 0")
    _check(t.pretrain_lr > 0.0, "task.pretrain_lr", "must be positive")
    _check(isinstance(t.share_base, bool), "task.share_base",
           "must be true or false")

    f = cfg.finetune
    _check(f.steps >= 1, "finetune.steps", "must be >= 1")
    _check(f.lr > 0.0, "finetune.lr", "must be positive")
    _check(f.batch_size >= 1, "finetune.batch_size", "must be >= 1")
    _check(0.0 < f.obs_frac <= 1.0, "finetune.obs_frac", "must be in (0, 1]")
    _check(f.obs_schedule in OBS_SCHEDULES, "finetune.obs_schedule",
           f"{f.obs_schedule!r} not in {OBS_SCHEDULES}")
    _check(f.metric_every >= 0, "finetune.metric_every", "must be >= 0")

    s = cfg.search
    _check(s.k >= 0, "search.k", "must be >= 0")
    _check(s.p >= 1, "search.p", "must be >= 1")
    _check(s.s2 > 0.0, "search.s2", "must be positive")
    _check(s.lam >= 0.0, "search.lam", "must be >= 0")

    m = cfg.meta
    _check(m.n_tasks >= 0, "meta.n_tasks", "must be >= 0")
    _check(m.inner_steps >= 1, "meta.inner_steps", "must be >= 1")
    _check(m.inner_lr > 0.0, "meta.inner_lr", "must be positive")
    _check(0.0 < m.eta0 <= 1.0, "meta.eta0", "must be in (0, 1]")
    _check(m.stats_reservoir >= 0, "meta.stats_reservoir", "must be >= 0")
    _check(m.eval_every >= 0, "meta.eval_every", "must be >= 0")
    _check(m.heldout_tasks >= 0, "meta.heldout_tasks", "must be >= 0")

    lo = cfg.learned
    _check(lo.iterations >= 0, "learned.iterations", "must be >= 0")
    _check(lo.unroll_steps >= 1, "learned.unroll_steps", "must be >= 1")
    _check(lo.pairs >= 1, "learned.pairs", "must be >= 1")
    _check(lo.eps > 0.0, "learned.eps", "must be positive")
    _check(lo.lr > 0.0, "learned.lr", "must be positive")
    _check(lo.joint_value_fit >= 0, "learned.joint_value_fit", "must be >= 0")

    _check(cfg.gamma > 0.0, "gamma", "must be positive")
    _check(cfg.seed >= 0, "seed", "must be >= 0")
    _check(len(cfg.seeds) >= 1, "seeds", "need at least one seed")
    _check(all(int(x) >= 0 for x in cfg.seeds), "seeds", "must be >= 0")
    _check(len(set(cfg.seeds)) == len(cfg.seeds), "seeds",
           "duplicate seeds make paired rows ambiguous")
    _check(bool(cfg.out_dir), "out_dir", "must not be empty")
    return cfg


def to_dict(cfg):
    d = asdict(cfg)
    d["task"]["hidden"] = list(d["task"]["hidden"])
    return d


def from_dict(data):
    """Strict construction: unknown keys raise with their full path."""
    if not isinstance(data, dict):
        raise ConfigError(f"config root: expected an object, got {type(data).__name__}")
    top_names = {f.name for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top_names:
            _fail(key, "unknown field")
        if key in _GROUPS:
            group_cls = _GROUPS[key]
            if not isinstance(value, dict):
                _fail(key, "expected an object")
            names = {f.name for f in fields(group_cls)}
            for sub in value:
                if sub not in names:
                    _fail(f"{key}.{sub}", "unknown field")
            kwargs[key] = group_cls(**value)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    cfg.task.hidden = tuple(int(h) for h in cfg.task.hidden)
    cfg.seeds = [int(x) for x in cfg.seeds]
    return cfg


def dumps(cfg):
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return from_dict(data)


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))


def apply_overrides(cfg, pairs):
    """Apply ``group.field=value`` strings (JSON-parsed values) to a config."""
    data = to_dict(cfg)
    for item in pairs:
        if "=" not in item:
            _fail(item, "override must look like key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings stay strings
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                _fail(key, "unknown field")
            node = node[part]
        if parts[-1] not in node:
            _fail(key, "unknown field")
        node[parts[-1]] = value
    return from_dict(data)


def rng_for(base_seed, *route):
    """The one seeding rule: a generator for a named component stream.

    Route parts are strings (hashed with crc32) or non-negative ints, fed
    with the base seed into a SeedSequence. The same (seed, route) pair
    always yields the same stream, so a component rerun in isolation
    matches its draw inside the full pipeline.
    """
    keys = [zlib.crc32(part.encode("utf-8")) if isinstance(part, str)
            else int(part) for part in route]
    return np.random.default_rng(np.random.SeedSequence([int(base_seed)] + keys))
