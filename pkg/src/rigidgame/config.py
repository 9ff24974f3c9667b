"""Run configuration: YAML file (schema ``v1``) < environment < command-line flags."""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

ENV_PREFIX = "RIGIDGAME_"
SCHEMA_VERSION = "v1"

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "seed": None,
    "jobs": None,
    "output": "out",
    "figures": True,
    "input": None,
    "potential": {
        "kind": "contact",
        "path": None,
        "well_depth": 1.0,
        "contact_radius": 6.0,
        "repulsion_radius": 3.0,
        "repulsion_strength": 10.0,
    },
    "decoys": {"count": 20, "tr_scale": 5.0, "rot_mode": "uniform", "sigma": None},
    "training": {
        "datasets": [],
        "steps": 500,
        "lr": 1.0,
        "l2": 1e-4,
        "holdout_fraction": 0.25,
        "batch_size": 0,
        "n_bins": 32,
        "cutoff": 40.0,
        "restype_channels": False,
    },
    "schedule": {"sigma_min_tr": 0.01, "sigma_max_tr": 25.0, "sigma_min_rot": 0.01, "sigma_max_rot": 1.65},
    "game": {
        "steps": 60,
        "eta0": 1.0,
        "eta_exponent": 0.5,
        "lambda": 0.5,
        "d_ths": 5.0,
        "update_mode": "simultaneous",
        "grad_backend": "analytic",
        "convergence_tol": 1e-4,
        "backtracking": True,
        "n_games": 20,
        "init_tr_scale": 5.0,
        "init_rot_mode": "uniform",
        "cluster_radius": 2.0,
    },
    "sampler": {
        "n_steps": 50,
        "n_samples": 40,
        "noise_on_final_step": False,
        "modes": [],
        "weights": None,
        "cluster_radius": 2.0,
    },
    "metrics": {"predictions": [], "truth": None},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def env_overrides(environ=None) -> dict:
    """``RIGIDGAME_SEED=3`` or ``RIGIDGAME_GAME__STEPS=100`` (double underscore nests)."""
    environ = os.environ if environ is None else environ
    over = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX) :].lower().split("__")
        node = over
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = yaml.safe_load(raw)
    return over


def load_config(path=None, overrides=None, environ=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, doc)
        base_dir = path.parent
    cfg = _merge(cfg, env_overrides(environ))
    cfg = _merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    cfg["_base_dir"] = str(base_dir)
    validate(cfg)
    return cfg


def resolve(cfg, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base_dir"]) / p


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg):
    _need(cfg["version"] == SCHEMA_VERSION, f"unsupported config version {cfg['version']!r}")
    _need(isinstance(cfg["seed"], int) and not isinstance(cfg["seed"], bool), "an integer 'seed' is mandatory")
    _need(cfg["jobs"] is None or (isinstance(cfg["jobs"], int) and cfg["jobs"] >= 1), "jobs must be >= 1")
    pot = cfg["potential"]
    _need(pot["kind"] in ("contact", "surrogate"), f"unknown potential kind {pot['kind']!r}")
    _need(0 < pot["repulsion_radius"] < pot["contact_radius"], "need 0 < repulsion_radius < contact_radius")
    dec = cfg["decoys"]
    _need(isinstance(dec["count"], int) and dec["count"] >= 1, "decoys.count must be >= 1")
    _need(dec["tr_scale"] >= 0, "decoys.tr_scale must be >= 0")
    _need(dec["rot_mode"] in ("uniform", "igso3", "none"), f"unknown decoys.rot_mode {dec['rot_mode']!r}")
    _need(dec["rot_mode"] != "igso3" or (dec["sigma"] or 0) > 0, "decoys.sigma required for rot_mode igso3")
    g = cfg["game"]
    _need(isinstance(g["steps"], int) and g["steps"] >= 1, "game.steps must be >= 1")
    _need(g["eta0"] > 0, "game.eta0 must be positive")
    _need(g["lambda"] >= 0 and g["d_ths"] > 0, "need game.lambda >= 0 and game.d_ths > 0")
    _need(g["update_mode"] in ("simultaneous", "round_robin"), f"unknown game.update_mode {g['update_mode']!r}")
    _need(g["grad_backend"] in ("analytic", "finite_diff"), f"unknown game.grad_backend {g['grad_backend']!r}")
    _need(isinstance(g["n_games"], int) and g["n_games"] >= 1, "game.n_games must be >= 1")
    s = cfg["sampler"]
    _need(isinstance(s["n_steps"], int) and s["n_steps"] >= 1, "sampler.n_steps must be >= 1")
    _need(isinstance(s["n_samples"], int) and s["n_samples"] >= 1, "sampler.n_samples must be >= 1")
    sch = cfg["schedule"]
    _need(0 < sch["sigma_min_tr"] < sch["sigma_max_tr"], "need 0 < sigma_min_tr < sigma_max_tr")
    _need(0 < sch["sigma_min_rot"] < sch["sigma_max_rot"], "need 0 < sigma_min_rot < sigma_max_rot")
    t = cfg["training"]
    _need(0 <= t["holdout_fraction"] < 1, "training.holdout_fraction must be in [0, 1)")
    _need(isinstance(t["steps"], int) and t["steps"] >= 0, "training.steps must be >= 0")


def require_file(cfg, key_path: str):
    """Resolve a dotted config key to an existing file path."""
    node = cfg
    for k in key_path.split("."):
        node = node[k]
    _need(node is not None, f"config key {key_path!r} is required for this command")
    p = resolve(cfg, node)
    _need(p.exists(), f"{key_path}: file not found: {p}")
    return p
