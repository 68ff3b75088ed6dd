"""Experiment configuration: nested YAML with ``STRUCTGP_`` environment overrides.

An override names a dotted path with double underscores, e.g.
``STRUCTGP_OPTIM__MAX_ITER=200`` or ``STRUCTGP_N_XI="[16, 32]"``; values are
parsed as YAML scalars or lists.  Unknown keys anywhere are rejected.
"""
import copy
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from ._io import canonical_json, sha256_bytes

ENV_PREFIX = "STRUCTGP_"
PIPELINES = ("two_model", "joint", "pca_baseline")
KERNELS = ("linear", "rbf", "sum")
TEST_START = 1_000_000


class ConfigError(ValueError):
    pass


@dataclass
class PriorSection:
    var1: float = 0.25
    var2: float = 1.0
    l1: float = 2.0
    l2: float = 0.1
    d_kl: list = field(default_factory=lambda: [16, 32])
    scaling: str = "sqrt"


@dataclass
class OptimSection:
    max_iter: int = 1000
    tol: float = 1e-6
    patience: int = 5


@dataclass
class InferSection:
    max_iter: int = 300
    tol: float = 1e-3
    n_restarts: int = 5
    n_mog: int = 100


@dataclass
class ObsSection:
    grid: int = 5
    noise_fraction: float = 0.1


@dataclass
class ExperimentConfig:
    pipeline: str = "two_model"
    kernel: str = "sum"
    output_kernel: str = "rbf"
    n_xi: list = field(default_factory=lambda: [16, 32, 64])
    n_grid: int = 33
    d_xi: int = None
    m_xi: int = None
    spatial_lengthscale: float = 0.3
    seeds: list = field(default_factory=lambda: [0])
    n_test: int = 50
    prior: PriorSection = field(default_factory=PriorSection)
    optim: OptimSection = field(default_factory=OptimSection)
    infer: InferSection = field(default_factory=InferSection)
    obs: ObsSection = field(default_factory=ObsSection)
    out_dir: str = "runs/default"

    @property
    def variant(self):
        short = {"two_model": "2M", "joint": "JM", "pca_baseline": "PCA"}[self.pipeline]
        return short if self.pipeline == "pca_baseline" else f"{short}-{self.kernel.capitalize()}"

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return sha256_bytes(canonical_json(self.to_dict()).encode())

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.pipeline in PIPELINES, f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        need(self.kernel in KERNELS, f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        need(self.output_kernel in KERNELS, f"output_kernel must be one of {KERNELS}")
        need(isinstance(self.n_xi, list) and self.n_xi and all(isinstance(n, int) and n >= 2 for n in self.n_xi),
             "n_xi must be a non-empty list of integers >= 2")
        need(isinstance(self.n_grid, int) and self.n_grid >= 3, "n_grid must be an integer >= 3")
        need(self.n_grid % 2 == 1, "n_grid must be odd (the mesh is mirror-symmetric only for odd sizes)")
        n_s = self.n_grid**2
        d = self.prior.d_kl
        need(isinstance(d, list) and len(d) == 2 and all(isinstance(k, int) and 1 <= k <= n_s for k in d),
             f"prior.d_kl must be two integers in [1, {n_s}]")
        for name in ("var1", "var2", "l1", "l2"):
            need(getattr(self.prior, name) > 0, f"prior.{name} must be positive")
        need(self.prior.scaling in ("sqrt", "lambda"), "prior.scaling must be 'sqrt' or 'lambda'")
        for name in ("d_xi", "m_xi"):
            v = getattr(self, name)
            need(v is None or (isinstance(v, int) and v >= 1), f"{name} must be a positive integer or null")
        need(isinstance(self.seeds, list) and self.seeds and all(isinstance(s, int) and s >= 0 for s in self.seeds),
             "seeds must be a non-empty list of non-negative integers")
        need(isinstance(self.n_test, int) and self.n_test >= 0, "n_test must be a non-negative integer")
        need(self.optim.max_iter >= 0 and self.optim.tol >= 0 and self.optim.patience >= 1, "invalid optim section")
        need(self.infer.max_iter >= 0 and self.infer.n_restarts >= 1 and self.infer.n_mog >= 1,
             "invalid infer section")
        k = self.obs.grid
        need(isinstance(k, int) and k >= 1 and (k == 1 or (self.n_grid - 1) % (k - 1) == 0),
             f"obs.grid = {k} is not aligned with n_grid = {self.n_grid}")
        need(self.obs.noise_fraction >= 0, "obs.noise_fraction must be non-negative")
        need(self.spatial_lengthscale > 0, "spatial_lengthscale must be positive")
        return self


def _from_dict(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    kw = {}
    defaults = cls()
    for name, value in data.items():
        sub = getattr(defaults, name)
        if is_dataclass(sub):
            kw[name] = _from_dict(type(sub), value, f"{path}{name}.")
        else:
            kw[name] = value
    return cls(**kw)


def _apply_env(raw, env):
    raw = copy.deepcopy(raw)
    for key in sorted(env):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = raw
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {key} does not address a config section")
        try:
            node[path[-1]] = yaml.safe_load(env[key])
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {key}: {exc}") from exc
    return raw


def load_config(path=None, env=None, overrides=None):
    """Config from ``path`` (or defaults), then environment overrides, then ``overrides``."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    raw = _apply_env(raw, os.environ if env is None else env)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    return _from_dict(ExperimentConfig, raw).validate()
