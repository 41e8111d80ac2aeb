"""Run configuration: TOML files with a fixed schema and shipped presets.

Every key must appear in :data:`DEFAULTS`; anything else is an error. The
defaults are the sphere-dataset settings; presets override them.
"""

import copy
import math
import os
from importlib import resources

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

PRESETS = ("circle_uniform", "sphere_vmf", "so3_mixture", "dihedral_toy", "earth_flood_n100")


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


DEFAULTS = {
    "manifold": "sphere",
    "run": {"command": "", "out_dir": "runs/out", "seed": 0, "threads": 1, "wall_clock": False},
    "sphere": {"n": 3},
    "so": {"k": 3},
    "dihedral": {"atoms": 5, "indices": [0, 1, 2, 3], "phi0_deg": -70.0},
    "generic": {"factory": ""},
    "schedule": {"T": 4.0, "N": 400, "gamma_min": 0.01, "gamma_max": 1.0},
    "drift": {"kind": "zero", "kappa": 50.0, "reference_file": ""},
    "newton": {"tol": 1e-4, "max_steps": 10},
    "refine": {"target_tol": 1e-5, "dt": 0.1},
    "model": {"hidden": [512, 512, 512, 512, 512], "ema_decay": 0.999, "equivariant": False},
    "train": {
        "batch_size": 512, "epochs": 20000, "refresh_every": 1, "lr": 5e-4, "clip_norm": 10.0,
        "val_every": 0, "val_paths": 10, "max_attempts": 100,
    },
    "dataset": {
        "source": "uniform", "count": 2000, "path": "", "split_seed": 0,
        "fractions": [0.8, 0.1, 0.1], "bins": [60, 120], "isolated": True,
        "centers": [], "kappa": 20.0, "weights": [],
        "modes": 2, "y_std": 0.05, "reuse_patterns": True,
        "noise": 0.1,
    },
    "prior": {"kind": "uniform", "burn_steps": 2000},
    "generate": {"count": 1000, "steps": [0], "ckpt": ""},
    "nll": {"paths": 50, "split": "test", "ckpt": ""},
}

CHOICES = {
    ("manifold",): {"sphere", "so", "dihedral", "generic"},
    ("drift", "kind"): {"zero", "rmsd_harmonic"},
    ("dataset", "source"): {"csv", "so_mixture", "vmf", "uniform", "dihedral_toy", "points"},
    ("prior", "kind"): {"uniform", "forward_chain"},
    ("nll", "split"): {"train", "val", "test", "all"},
}


def _check_type(path, default, value):
    name = ".".join(path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"{name} must be finite")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
    return value


def _merge(base, override, path=()):
    for key, val in override.items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{'.'.join(here)} must be a table")
            _merge(base[key], val, here)
        else:
            base[key] = _check_type(here, base[key], val)
    return base


def preset_path(name: str) -> str:
    return str(resources.files("rddpm").joinpath("presets", f"{name}.toml"))


def resolve_path(spec: str) -> str:
    """A file path, or the name of a shipped preset."""
    if os.path.isfile(spec):
        return spec
    if spec in PRESETS:
        return preset_path(spec)
    raise FileNotFoundError(f"config {spec!r} is neither a file nor a preset ({', '.join(PRESETS)})")


def parse_config(text: str, base_dir: str = ".") -> dict:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    cfg = _merge(copy.deepcopy(DEFAULTS), raw)
    validate(cfg)
    cfg["_base_dir"] = base_dir
    return cfg


def load_config(spec: str, overrides: dict = None) -> dict:
    """Read, merge with defaults, apply ``overrides`` and validate."""
    path = resolve_path(spec)
    with open(path) as fh:
        text = fh.read()
    cfg = parse_config(text, os.path.dirname(os.path.abspath(path)))
    if overrides:
        base_dir = cfg.pop("_base_dir")
        cfg = _merge(cfg, overrides)
        validate(cfg)
        cfg["_base_dir"] = base_dir
    return cfg


def validate(cfg: dict) -> None:
    for path, allowed in CHOICES.items():
        node = cfg
        for p in path:
            node = node[p]
        if node not in allowed:
            raise ConfigError(f"{'.'.join(path)} must be one of {sorted(allowed)}, got {node!r}")
    s = cfg["schedule"]
    if s["T"] <= 0 or s["N"] < 0:
        raise ConfigError("schedule.T must be positive and schedule.N nonnegative")
    if not (0 < s["gamma_min"] <= s["gamma_max"]):
        raise ConfigError("need 0 < schedule.gamma_min <= schedule.gamma_max")
    nw = cfg["newton"]
    if not (1e-12 <= nw["tol"] <= 1e-2) or not (1 <= nw["max_steps"] <= 100):
        raise ConfigError("newton.tol must lie in [1e-12, 1e-2] and newton.max_steps in [1, 100]")
    t = cfg["train"]
    if t["batch_size"] < 1 or t["refresh_every"] < 1 or t["epochs"] < 0:
        raise ConfigError("train.batch_size and train.refresh_every must be >= 1, train.epochs >= 0")
    if t["lr"] <= 0 or t["clip_norm"] <= 0 or t["val_every"] < 0 or t["val_paths"] < 1:
        raise ConfigError("train.lr, train.clip_norm, train.val_paths must be positive")
    if cfg["run"]["threads"] < 1:
        raise ConfigError("run.threads must be at least 1")
    if not (0.0 <= cfg["model"]["ema_decay"] < 1.0):
        raise ConfigError("model.ema_decay must lie in [0, 1)")
    if any((not isinstance(w, int)) or w < 1 for w in cfg["model"]["hidden"]):
        raise ConfigError("model.hidden must be a list of positive integers")
    if cfg["drift"]["kind"] == "rmsd_harmonic" and cfg["drift"]["kappa"] <= 0:
        raise ConfigError("drift.kappa must be positive")
    if cfg["drift"]["kind"] == "rmsd_harmonic" and cfg["manifold"] != "dihedral":
        raise ConfigError("rmsd_harmonic drift needs point-cloud coordinates (manifold = dihedral)")
    d = cfg["dataset"]
    if d["count"] < 0:
        raise ConfigError("dataset.count must be nonnegative")
    fr = d["fractions"]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("dataset.fractions must be three nonnegative numbers summing to one")
    if len(d["bins"]) != 2 or any((not isinstance(b, int)) or b < 1 for b in d["bins"]):
        raise ConfigError("dataset.bins must be two positive integers")
    if d["source"] == "csv" and cfg["manifold"] != "sphere":
        raise ConfigError("dataset.source = csv reads lat/lon and needs manifold = sphere")
    if d["source"] in ("csv", "points") and not d["path"]:
        raise ConfigError(f"dataset.path is required for source {d['source']}")
    if d["source"] == "so_mixture" and cfg["manifold"] != "so":
        raise ConfigError("dataset.source = so_mixture needs manifold = so")
    if d["source"] == "vmf" and cfg["manifold"] != "sphere":
        raise ConfigError("dataset.source = vmf needs manifold = sphere")
    if d["source"] == "dihedral_toy" and cfg["manifold"] != "dihedral":
        raise ConfigError("dataset.source = dihedral_toy needs manifold = dihedral")
    if d["source"] == "vmf" and not d["centers"]:
        raise ConfigError("dataset.centers is required for source vmf")
    if cfg["manifold"] == "sphere" and cfg["sphere"]["n"] < 2:
        raise ConfigError("sphere.n must be at least 2")
    if cfg["manifold"] == "so" and cfg["so"]["k"] < 2:
        raise ConfigError("so.k must be at least 2")
    dh = cfg["dihedral"]
    if cfg["manifold"] == "dihedral":
        if len(dh["indices"]) != 4 or len(set(dh["indices"])) != 4:
            raise ConfigError("dihedral.indices must be four distinct atoms")
        if min(dh["indices"]) < 0 or max(dh["indices"]) >= dh["atoms"]:
            raise ConfigError("dihedral.indices out of range")
    if cfg["manifold"] == "generic" and ":" not in cfg["generic"]["factory"]:
        raise ConfigError("generic.factory must be 'module:function'")
    if cfg["generate"]["count"] < 0 or cfg["nll"]["paths"] < 1:
        raise ConfigError("generate.count must be >= 0 and nll.paths >= 1")
    if any((not isinstance(k, int)) or k < 0 or k > s["N"] for k in cfg["generate"]["steps"]):
        raise ConfigError("generate.steps must be integers in [0, schedule.N]")


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        r = repr(v)
        return r if any(c in r for c in ".en") else r + ".0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dump_config(cfg: dict) -> str:
    """TOML text of a resolved config (top-level scalars, then tables)."""
    lines = []
    for key, val in cfg.items():
        if not key.startswith("_") and not isinstance(val, dict):
            lines.append(f"{key} = {_toml_value(val)}")
    for key, val in cfg.items():
        if isinstance(val, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for k, v in val.items():
                lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"
