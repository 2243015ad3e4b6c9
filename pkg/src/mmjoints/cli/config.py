"""Pipeline configuration: presets, file and environment overrides, validation and hashing."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os

from ..latent import MODES, LatentHyperparams
from ..simulator import ACTIVITIES, KINDS, SPLIT_SCALES, RadarConfig, SimulationConfig

ENV_PREFIX = "MMJOINTS_"
PRESETS = ("desk", "paper")
SPLITS = tuple(SPLIT_SCALES)


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class MissingDependencyError(RuntimeError):
    """A prerequisite artifact or optional package is missing (exit code 3)."""


def _dataclass_defaults(cls, skip=()):
    return {f.name: copy.deepcopy(f.default) if f.default is not dataclasses.MISSING else f.default_factory()
            for f in dataclasses.fields(cls) if f.name not in skip}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def preset_defaults(preset="desk") -> dict:
    """Full default configuration tree for a preset."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    sim = _dataclass_defaults(SimulationConfig, skip=("seed", "activities"))
    latent = _dataclass_defaults(LatentHyperparams, skip=("seed",))
    cfg = {
        "preset": preset,
        "seed": 0,
        "simulation": sim,
        "radar": _dataclass_defaults(RadarConfig, skip=("seed",)),
        "latent": latent,
        "estimator": {"kind": "Trained", "window": latent["window"], "hidden": [64, 64], "head": [128],
                      "epochs": 40, "batch_size": 32, "lr": 2e-3, "lower_threshold": 6},
        "pipeline": {"upstream_split": "pretrain", "estimator_split": "pretrain", "head_split": "train"},
        "describe": {"splits": ["train", "test"], "mode": "pose+signal+refine"},
        "downstream": {"train_split": "train", "test_split": "test", "refine_epochs": 60, "activity_epochs": 40,
                       "activity_window": 5},
        "analysis": {"n_poses": 240, "n_samples": 32, "n_pairs": 2000, "n_boot": 200, "margin_triples": 2000},
    }
    if preset == "paper":
        cfg["latent"].update(pose_dim=32, signal_dim=64, n_clusters_max=64)
    return _plain(cfg)


def _merge(base: dict, override: dict, where=""):
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key != "clips_per_activity":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _plain(value)
    return base


def _parse_scalar(text: str):
    try:
        import yaml
    except ImportError:  # pragma: no cover - yaml is a declared dependency
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return yaml.safe_load(text)


def env_overrides(environ=None) -> dict:
    """``MMJOINTS_SECTION__KEY=value`` entries as a nested override tree (values parsed as YAML scalars)."""
    environ = os.environ if environ is None else environ
    tree = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__")]
        if not all(parts):
            raise ConfigError(f"malformed override variable {name}")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_scalar(environ[name])
    return tree


def read_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        data = json.loads(text)
    else:
        try:
            import yaml
        except ImportError as exc:
            raise MissingDependencyError("reading YAML configs needs the 'pyyaml' package") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return data


def resolve_config(path=None, preset=None, seed=None, environ=None) -> dict:
    """Preset defaults, then the config file, then environment overrides, then explicit flags."""
    file_cfg = read_config_file(path) if path else {}
    env_cfg = env_overrides(environ)
    chosen = preset or env_cfg.get("preset") or file_cfg.get("preset") or "desk"
    cfg = preset_defaults(chosen)
    _merge(cfg, {k: v for k, v in file_cfg.items() if k != "preset"})
    _merge(cfg, {k: v for k, v in env_cfg.items() if k != "preset"})
    cfg["preset"] = chosen
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    """Build every typed config object once so their own checks run; raise :class:`ConfigError`."""
    if not isinstance(cfg.get("seed"), int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    try:
        simulation_config(cfg)
        radar_config(cfg)
        h = latent_hyperparams(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    est = cfg["estimator"]
    if est["kind"] not in KINDS:
        raise ConfigError(f"estimator.kind must be one of {KINDS}")
    if est["window"] != h.window:
        raise ConfigError("estimator.window must equal latent.window")
    for key, split in cfg["pipeline"].items():
        if split not in SPLITS:
            raise ConfigError(f"pipeline.{key} must be one of {SPLITS}")
    bad = [s for s in cfg["describe"]["splits"] if s not in SPLITS]
    if bad:
        raise ConfigError(f"describe.splits has unknown splits {bad}")
    if cfg["describe"]["mode"] not in MODES:
        raise ConfigError(f"describe.mode must be one of {MODES}")
    d = cfg["downstream"]
    for key in ("train_split", "test_split"):
        if d[key] not in cfg["describe"]["splits"]:
            raise ConfigError(f"downstream.{key} must be one of describe.splits")
    for key, value in [(k, v) for k, v in list(d.items()) + list(cfg["analysis"].items()) if not k.endswith("_split")]:
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigError(f"{key} must be a positive integer")


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def simulation_config(cfg) -> SimulationConfig:
    sim = cfg["simulation"]
    if not isinstance(sim.get("clips_per_activity"), dict):
        raise ConfigError("simulation.clips_per_activity must be a mapping of split to count")
    return SimulationConfig(clips_per_activity=dict(sim["clips_per_activity"]), duration_s=float(sim["duration_s"]),
                            activities=ACTIVITIES, seed=cfg["seed"])


def radar_config(cfg) -> RadarConfig:
    r = dict(cfg["radar"])
    r["position"] = tuple(r["position"])
    return RadarConfig(**r, seed=cfg["seed"])


def latent_hyperparams(cfg) -> LatentHyperparams:
    return LatentHyperparams(**cfg["latent"], seed=cfg["seed"])


def estimator_kwargs(cfg) -> dict:
    e = cfg["estimator"]
    return {"kind": e["kind"], "window": e["window"], "hidden": tuple(e["hidden"]), "head": tuple(e["head"]),
            "epochs": e["epochs"], "batch_size": e["batch_size"], "lr": e["lr"], "lower_threshold": e["lower_threshold"],
            "random_state": cfg["seed"]}
