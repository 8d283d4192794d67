"""Nested pipeline configuration: defaults, YAML files, environment and ``--set`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import yaml

from ..data import FamilyConfig
from ..diffusion import DiffusionTrainConfig, LatentObjectiveTrainConfig
from ..errors import ConfigError
from ..pgvae import VAEConfig, VAETrainConfig
from ..refine import RefineConfig
from ..surrogate import DEFAULT_A_REF, GNNConfig, GNNTrainConfig

ENV_PREFIX = "INVFORGE_"


def _plain(obj):
    """Tuples become lists so the tree round-trips through YAML and JSON unchanged."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def default_config() -> dict:
    data = asdict(FamilyConfig())
    data["n_train"] = 32
    refine = asdict(RefineConfig())
    refine["objective"] = "gnn"  # or "oracle": refine against the analytic drag directly
    # against the learned surrogate a stiffer offset penalty keeps the lattice where the surrogate is trustworthy
    refine["lam_smooth"] = 0.3
    refine["steps"] = 50
    return _plain({
        "seed": 0,
        "threads": 1,
        "out": "run",
        "data": data,
        "flow": {"direction": [1.0, 0.0, 0.0], "a_ref": DEFAULT_A_REF},
        "vae": asdict(VAEConfig()),
        "vae_train": asdict(VAETrainConfig()),
        "encode": {"use_mean": True},  # posterior means (not samples) feed the latent models
        "diffusion": {"width": 64, "depth": 2, "heads": 4, "act": "silu", "T": 1000, "beta_1": 1e-4,
                      "beta_T": 0.02},
        "diffusion_train": {k: v for k, v in asdict(DiffusionTrainConfig()).items()
                            if k not in ("T", "beta_1", "beta_T")},
        "latent_obj": {"channels": 32, "act": "silu"},
        "latent_obj_train": asdict(LatentObjectiveTrainConfig()),
        "gnn": asdict(GNNConfig()),
        "gnn_train": asdict(GNNTrainConfig()),
        "design": {"n": 64, "method": "diffusion", "gamma": 1.0, "clip": 1.0, "grid_res": 32, "retries": 4,
                   "refine": True, "name": "design", "cem_iterations": 50, "gd_steps": 200, "gd_lr": 0.02},
        "refine": refine,
        "report": {"tau": None, "k": 1, "bootstrap_seed": 0},
    })


def _check_type(key: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    """Deep merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key} is a section; give a mapping")
            out[k] = merge(out[k], v, key + ".")
        else:
            out[k] = _check_type(key, out[k], v)
    return out


def dotted(key: str, value) -> dict:
    tree: dict = value
    for part in reversed(key.split(".")):
        tree = {part: tree}
    return tree


def parse_assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
    return key.strip(), value


def env_overrides(environ=None) -> list[tuple[str, object]]:
    """``INVFORGE_VAE_TRAIN__STEPS=200`` sets ``vae_train.steps``; sections are split on a double underscore."""
    environ = os.environ if environ is None else environ
    out = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out.append(parse_assignment(f"{key}={environ[name]}"))
    return out


def load_config(path: Path | None = None, sets: list[str] = (), environ=None) -> dict:
    """defaults < config file < environment < ``--set`` assignments."""
    cfg = default_config()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, loaded)
    for key, value in env_overrides(environ):
        cfg = merge(cfg, dotted(key, value))
    for item in sets:
        key, value = parse_assignment(item)
        cfg = merge(cfg, dotted(key, value))
    return cfg


def config_hash(tree) -> str:
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)
