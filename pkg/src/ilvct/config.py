"""Structured text configuration: flat key=value pairs under sections.

Defaults cover the desk-scale training setup; every value can be overridden
from an INI-style file. Loading coerces values to the type of the default and
rejects unknown sections or keys, and the effective configuration can be
written back out for provenance.
"""

from __future__ import annotations

import configparser
import copy

from .geom import ConeBeamGeometry, equispaced_angles

__all__ = ["ConfigError", "default_config", "load_config", "save_config",
           "geometry_from_config"]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "geometry": {
        "dso": 1000.0,
        "dsd": 1500.0,
        "det_rows": 32,
        "det_cols": 32,
        "det_pixel": 1.575,
        "n_views": 8,
        "bbox_half": 16.0,
    },
    "model": {
        "patch": 8,
        "c_low": 16,
        "c_high": 16,
        "enc_layers": 1,
        "l_f": 8,
        "l_z": 8,
        "c_z": 16,
        "n_layers": 2,
        "n_groups": 8,
        "kv_reduce": 8,
    },
    "decoder": {
        "c_g": 8,
        "hidden": 16,
        "kernel": 2,
        "stride": 2,
    },
    "loss": {
        "l1": 1.0,
        "ssim": 0.2,
        "vol": 1.0,
        "refined": 1.0,
        "refine_activation_step": 500,
    },
    "train": {
        "steps": 2000,
        "warmup": 100,
        "base_lr": 1e-2,
        "weight_decay": 0.0,
        "seed": 0,
        "val_every": 100,
        "input_views": 4,
        "vol_dims": 32,
    },
}


def default_config():
    return copy.deepcopy(DEFAULTS)


def load_config(path=None):
    """Read a config file over the defaults; ``None`` returns pure defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            default = cfg[section][key]
            try:
                cfg[section][key] = type(default)(
                    float(raw) if isinstance(default, (int, float)) else raw)
            except ValueError as e:
                raise ConfigError(
                    f"bad value {raw!r} for [{section}] {key}") from e
    return cfg


def save_config(cfg, path):
    """Write the effective configuration in the same INI format."""
    parser = configparser.ConfigParser()
    for section, items in cfg.items():
        parser[section] = {k: repr(v) if not isinstance(v, str) else v
                           for k, v in items.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def geometry_from_config(cfg):
    g = cfg["geometry"]
    return ConeBeamGeometry(
        dso=float(g["dso"]),
        dsd=float(g["dsd"]),
        det_rows=int(g["det_rows"]),
        det_cols=int(g["det_cols"]),
        det_pixel=float(g["det_pixel"]),
        angles=equispaced_angles(int(g["n_views"])),
        bbox_half=float(g["bbox_half"]),
    )
