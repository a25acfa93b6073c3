"""Run configuration: presets, overrides, and lossless JSON round-trips.

A RunConfig is the small, human-edited file; ``resolve`` expands it into a
fully concrete TrainSettings which is what gets archived next to the results.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import descriptor, mdp, scenegen
from .errors import ArchiveIOError, ConfigError
from .grasping import HandModel
from .qnet import DESK_NET, PAPER_NET, NetConfig, SgdConfig
from .trainer import TrainSchedule, TrainSettings

OUTPUT_ROOT_ENV = "DESCMDP_OUTPUT_ROOT"
SCHEDULE_PRESETS = ("desk", "paper")
CONFIG_VERSION = 1


@dataclass
class RunConfig:
    scenario: str = mdp.TWO_STEP_ISOLATION
    category: str = scenegen.BOTTLE
    descriptor: str = "standard"
    schedule: str = "desk"
    master_seed: int = 0
    eval_seed: int = 12345
    output_dir: str = "runs/default"
    reward_mode: str = mdp.BINARY
    deterministic: bool = True
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in mdp.SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {mdp.SCENARIOS}")
        if self.category not in scenegen.CATEGORIES:
            raise ConfigError(f"unknown category {self.category!r}")
        if self.descriptor not in descriptor.PRESETS:
            raise ConfigError(f"unknown descriptor preset {self.descriptor!r}")
        if self.schedule not in SCHEDULE_PRESETS:
            raise ConfigError(f"unknown schedule preset {self.schedule!r}")
        if self.reward_mode not in (mdp.BINARY, mdp.EXP_FALLOFF):
            raise ConfigError(f"unknown reward mode {self.reward_mode!r}")
        if not isinstance(self.overrides, dict):
            raise ConfigError("overrides must be a mapping of dotted keys to values")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**d)

    def with_overrides(self, **kv) -> "RunConfig":
        return replace(self, overrides={**self.overrides, **kv})

    def output_path(self) -> Path:
        """Relative output dirs are placed under $DESCMDP_OUTPUT_ROOT when it is set."""
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            return Path(root) / p
        return p

    def resolve(self) -> TrainSettings:
        try:
            return _resolve(self)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc


def _preset_settings(cfg: RunConfig) -> TrainSettings:
    multi = cfg.scenario == mdp.MULTI_STEP_ISOLATION
    if cfg.schedule == "paper":
        sched = TrainSchedule(n_rounds=150 if multi else 70, n_episodes=1000,
                              epsilon_decay_rounds=18, final_zero_rounds=5,
                              capacity=50_000 if multi else 25_000)
        sgd, net, m, n_eval = SgdConfig(iterations_per_round=5000), PAPER_NET, 100, 300
    else:
        if multi:
            sched = TrainSchedule(n_rounds=12, n_episodes=150, epsilon_decay_rounds=4,
                                  final_zero_rounds=1, capacity=50_000)
        else:
            sched = TrainSchedule(n_rounds=10, n_episodes=200, epsilon_decay_rounds=3,
                                  final_zero_rounds=1, capacity=25_000)
        sgd, net, m, n_eval = SgdConfig(iterations_per_round=1000), DESK_NET, 50, 100
    episode = mdp.EpisodeConfig(scenario=cfg.scenario, category=cfg.category,
                                reward_mode=cfg.reward_mode, m=m,
                                descriptor=descriptor.preset(cfg.descriptor, net.image_size))
    return TrainSettings(episode=episode, schedule=sched, sgd=sgd, net=net, n_eval=n_eval,
                         master_seed=cfg.master_seed, eval_seed=cfg.eval_seed,
                         deterministic=cfg.deterministic)


_SECTIONS = ("episode", "schedule", "sgd", "net")


def _apply_overrides(settings: TrainSettings, overrides: dict) -> TrainSettings:
    top, parts = {}, {s: {} for s in _SECTIONS}
    for key, value in overrides.items():
        head, _, tail = key.partition(".")
        if tail:
            if head not in parts:
                raise ConfigError(f"unknown override section {head!r} in {key!r}")
            parts[head][tail] = value
        else:
            top[key] = value
    for name, kv in parts.items():
        if not kv:
            continue
        obj = getattr(settings, name)
        valid = {f.name for f in fields(obj)}
        bad = sorted(set(kv) - valid)
        if bad:
            raise ConfigError(f"unknown {name} override keys {bad}")
        if name == "episode" and "descriptor" in kv and isinstance(kv["descriptor"], dict):
            kv["descriptor"] = descriptor.DescriptorConfig.from_dict(kv["descriptor"])
        if name == "net":
            kv = {k: (tuple(v) if isinstance(v, list) else v) for k, v in kv.items()}
        settings = replace(settings, **{name: replace(obj, **kv)})
    valid_top = {f.name for f in fields(TrainSettings)} - set(_SECTIONS)
    bad = sorted(set(top) - valid_top)
    if bad:
        raise ConfigError(f"unknown override keys {bad}")
    return replace(settings, **top)


def _resolve(cfg: RunConfig) -> TrainSettings:
    s = _apply_overrides(_preset_settings(cfg), cfg.overrides)
    # image size follows the network; place encoding follows the scenario's place set
    ep = s.episode
    desc = ep.descriptor
    if desc.image_size != s.net.image_size:
        desc = desc.with_image_size(s.net.image_size)
        ep = replace(ep, descriptor=desc)
    n_places = len(ep.place_set())
    net = replace(s.net, place_dim=n_places, channels=desc.n_channels)
    s = replace(s, episode=ep, net=net)
    if s.n_eval < 0:
        raise ConfigError("n_eval must be >= 0")
    if cfg.schedule == "paper":
        warnings.warn("paper preset: expect days of CPU time for one run", RuntimeWarning,
                      stacklevel=3)
    return s


# ---------------------------------------------------------------- settings <-> dict

def settings_to_dict(s: TrainSettings) -> dict:
    ep = s.episode
    return {
        "episode": {
            "scenario": ep.scenario, "category": ep.category, "max_time": ep.max_time,
            "reward_mode": ep.reward_mode, "n_objects": ep.n_objects, "m": ep.m,
            "descriptor": ep.descriptor.to_dict(), "hand": asdict(ep.hand),
            "mask_temp": ep.mask_temp, "tau": ep.tau, "falloff_start": ep.falloff_start,
            "max_clearance": ep.max_clearance, "penetration_tol": ep.penetration_tol,
            "max_tilt": ep.max_tilt,
        },
        "schedule": asdict(s.schedule),
        "sgd": asdict(s.sgd),
        "net": s.net.to_dict(),
        "n_eval": s.n_eval, "eval_every": s.eval_every, "master_seed": s.master_seed,
        "eval_seed": s.eval_seed, "deterministic": s.deterministic,
    }


def settings_from_dict(d: dict) -> TrainSettings:
    try:
        ep = dict(d["episode"])
        ep["descriptor"] = descriptor.DescriptorConfig.from_dict(ep["descriptor"])
        ep["hand"] = HandModel(**ep["hand"])
        rest = {k: v for k, v in d.items() if k not in _SECTIONS}
        return TrainSettings(episode=mdp.EpisodeConfig(**ep), schedule=TrainSchedule(**d["schedule"]),
                             sgd=SgdConfig(**d["sgd"]), net=NetConfig.from_dict(d["net"]), **rest)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid resolved settings: {exc}") from exc


# ---------------------------------------------------------------- files

def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ArchiveIOError(f"cannot read {path}: {exc.strerror}", path) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})", path) from exc


def _write_json(path, obj) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ArchiveIOError(f"cannot write {path}: {exc.strerror}", path) from exc


def load_config(path) -> RunConfig:
    d = _read_json(path)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping", path)
    return RunConfig.from_dict(d)


def save_config(cfg: RunConfig, path) -> None:
    _write_json(path, cfg.to_dict())


def load_settings(path) -> TrainSettings:
    return settings_from_dict(_read_json(path))


def save_settings(s: TrainSettings, path) -> None:
    _write_json(path, settings_to_dict(s))
