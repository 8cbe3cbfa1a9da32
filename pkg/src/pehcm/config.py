"""Run configuration: defaults, `key = value` config files, and overrides.

Precedence is last-writer-wins: built-in defaults, then the config file,
then explicit assignments in the order given. Every training run writes its
fully resolved configuration next to its outputs.
"""

import dataclasses
from dataclasses import dataclass

from . import data as data_mod


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dataset source: a file path, or empty for the synthetic generator
    data: str = ""
    n_coarse: int = 5
    fines_per_coarse: int = 4
    instances_per_fine: int = 200
    eval_instances_per_fine: int = 50
    dim: int = 32
    spread_coarse: float = 1.0
    spread_fine: float = 0.25
    spread_instance: float = 0.05
    sigma_aug: float = -1.0          # < 0 resolves to spread_instance
    # model
    encoder_dims: str = "128,128"
    projector_dims: str = "128,32"
    curvature: float = 0.001
    # loss
    alpha: float = 800.0
    beta: float = 0.999
    # optimization
    batch_size: int = 64
    epochs: int = 60
    lr: float = 1e-3
    lr_decay_epochs: str = "36,48"
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    # margin machinery
    reinit_epochs: str = "36,48"
    memory_size: int = 256
    k_clusters: int = 0              # 0 resolves to 2 * fines_per_coarse
    recluster_every: int = 0         # optimizer steps; 0 = each epoch start
    kmeans_restarts: int = 4
    # ablation switches
    space: str = "hyperbolic"
    hcm: bool = True
    ahcd: bool = True
    # evaluation protocol
    episodes: int = 1000
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    eval_mode: str = "standard"
    metric: str = ""                 # "" resolves per space
    k_nn: int = 1
    # run
    seed: int = 0
    out_dir: str = "runs/default"

    # -- resolved views ------------------------------------------------------

    def encoder_dim_list(self, input_dim):
        return [int(input_dim)] + _int_list(self.encoder_dims)

    def projector_dim_list(self):
        enc = _int_list(self.encoder_dims)
        return [enc[-1]] + _int_list(self.projector_dims)

    def decay_epoch_set(self):
        return set(_int_list(self.lr_decay_epochs, allow_empty=True))

    def reinit_epoch_set(self):
        return set(_int_list(self.reinit_epochs, allow_empty=True))

    def resolved_sigma(self):
        return self.spread_instance if self.sigma_aug < 0.0 else self.sigma_aug

    def resolved_k_clusters(self):
        return self.k_clusters if self.k_clusters > 0 else 2 * self.fines_per_coarse

    def resolved_metric(self):
        if self.metric:
            return self.metric
        return "poincare" if self.space == "hyperbolic" else "cosine"

    def synthetic_spec(self):
        return data_mod.SyntheticSpec(
            n_coarse=self.n_coarse,
            fines_per_coarse=self.fines_per_coarse,
            instances_per_fine=self.instances_per_fine,
            dim=self.dim,
            spread_coarse=self.spread_coarse,
            spread_fine=self.spread_fine,
            spread_instance=self.spread_instance,
            eval_instances_per_fine=self.eval_instances_per_fine,
            seed=self.seed,
        )

    def episode_spec(self):
        from . import evaluation

        return evaluation.EpisodeSpec(
            n_way=self.n_way, k_shot=self.k_shot, n_query=self.n_query,
            mode=self.eval_mode, n_episodes=self.episodes)


def _int_list(text, allow_empty=False):
    text = text.strip()
    if not text:
        if allow_empty:
            return []
        raise ConfigError("expected a comma-separated integer list")
    try:
        return [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


_BOOL_WORDS = {"on": True, "off": False, "true": True, "false": False,
               "yes": True, "no": False, "1": True, "0": False}


def _parse_bool(text):
    try:
        return _BOOL_WORDS[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"bad boolean {text!r}, use on/off") from None


def _coerce(name, text, typ):
    text = text.strip()
    try:
        if typ is bool:
            return _parse_bool(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}
_FIELDS = {
    f.name: (_TYPE_NAMES[f.type] if isinstance(f.type, str) else f.type)
    for f in dataclasses.fields(RunConfig)
}


def assign(cfg, name, text):
    """Set one field from its textual form; unknown keys are errors."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    setattr(cfg, name, _coerce(name, text, _FIELDS[name]))


def parse_config_text(cfg, text, origin="<config>"):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}: line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        try:
            assign(cfg, key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}: line {lineno}: {exc}") from None
    return cfg


def load_config(path=None, assignments=()):
    """Defaults, then the file, then `key=value` assignments, in order."""
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            parse_config_text(cfg, fh.read(), origin=str(path))
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"bad assignment {item!r}, expected key=value")
        key, value = item.split("=", 1)
        assign(cfg, key.strip(), value)
    return cfg


def resolved_text(cfg):
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def _format_value(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def validate(cfg):
    if cfg.space not in ("hyperbolic", "euclidean"):
        raise ConfigError(f"space must be hyperbolic or euclidean, got {cfg.space!r}")
    if cfg.metric not in ("", "poincare", "cosine"):
        raise ConfigError(f"metric must be poincare or cosine, got {cfg.metric!r}")
    if cfg.space == "euclidean" and cfg.resolved_metric() == "poincare":
        raise ConfigError("the euclidean ablation cannot evaluate with the "
                          "poincare metric")
    if cfg.ahcd and not cfg.hcm:
        raise ConfigError("ahcd requires hcm to be on")
    if not cfg.curvature > 0.0:
        raise ConfigError("curvature must be positive")
    if cfg.alpha < 0.0:
        raise ConfigError("alpha must be nonnegative")
    if not 0.0 < cfg.beta < 1.0:
        raise ConfigError("beta must lie in (0, 1)")
    if cfg.batch_size < 2:
        raise ConfigError("batch_size must be at least 2")
    if cfg.epochs < 0:
        raise ConfigError("epochs must be nonnegative")
    if cfg.eval_mode not in ("standard", "all_way", "intra_class"):
        raise ConfigError(f"unknown eval_mode {cfg.eval_mode!r}")
    for name in ("lr", "memory_size", "k_nn", "episodes", "n_way", "k_shot", "n_query"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    _int_list(cfg.encoder_dims)
    _int_list(cfg.projector_dims)
    cfg.decay_epoch_set()
    cfg.reinit_epoch_set()
    if not cfg.data:
        cfg.synthetic_spec()
    return cfg
