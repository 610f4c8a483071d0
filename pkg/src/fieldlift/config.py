"""Run configuration: strict JSON schema with materialized defaults.

A config validates before any work happens; unknown keys are rejected at
every level. All defaults are filled in and the result is snapshotted into
the run directory, so the snapshot alone reproduces the run.
"""

from __future__ import annotations

import json
import os

from .errors import ConfigError

SCHEMA_VERSION = 1

# (default, type) per key; nested dicts follow the same shape
_SCHEMA = {
    "schema_version": (SCHEMA_VERSION, int),
    "seed": (0, int),
    "out": ("run", str),
    "phantom": {
        "size": (64, int),
        "n_train": (200, int),
        "n_test": (20, int),
        "n_ellipses": ([4, 9], list),
        "class_intensities": ([0.3, 0.45, 0.6, 0.75, 0.9], list),
        "noise_std": (0.02, float),
        "degradation": {
            "remap": ([[0.0, 0.0], [0.25, 0.35], [0.75, 0.65], [1.0, 1.0]], list),
            "blur_std": (1.0, float),
            "noise_std": (0.06, float),
        },
    },
    "mri": {
        "coils": (4, int),
        "accel": (3.0, float),
        "acs": (8, int),
        "noise_std": (0.01, float),
    },
    "teacher": {
        "epochs": (8, int),
        "lr": (1e-3, float),
        "lr_decay": (0.95, float),
        "beta1": (0.5, float),
        "beta2": (0.999, float),
        "critic_steps": (5, int),
        "lambda_cost": (10.0, float),
        "map_channels": (24, int),
        "map_depth": (4, int),
        "critic_channels": (16, int),
        "critic_downs": (3, int),
        "dual_form": ("pushforward", str),
    },
    "student": {
        "mode": ("joint", str),
        "epochs": (40, int),
        "lr": (1e-3, float),
        "beta1": (0.9, float),
        "beta2": (0.999, float),
        "ema_decay": (0.999, float),
        "channels": (24, int),
        "depth": (4, int),
        "loss_form": ("standard", str),
        "schedule": {
            "eps1": (0.01, float),
            "epsL": (10.0, float),
            "levels": (64, int),
        },
    },
    "sampler": {
        "step": (15.0, float),
        "inner_steps": (10, int),
        "gamma": (None, (float, type(None))),  # None: use the acquisition sidecar
        "init": ("uniform", str),
        "final_denoise": (False, bool),
        "gamma_f": (0.1, float),
        "method": ("meta", str),
    },
    "theorem": {
        "duplicate_instances": (50, int),
        "monge_instances": (100, int),
        "exhaustive_n": (4, int),
        "monge_max_n": (8, int),
        "dim": (4, int),
    },
    "eval": {
        "methods": (["meta", "score-mri-baseline", "zero-filled"], list),
        "dataset_tag": ("synthetic", str),
    },
}


def _validate(node, schema, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    out = {}
    for key, value in node.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path + key!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            out[key] = _validate(value, spec, path + key + ".")
        else:
            default, types = spec
            if types is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if types is int and isinstance(value, bool):
                raise ConfigError(f"config key {path + key!r}: expected int, got bool")
            if not isinstance(value, types):
                raise ConfigError(
                    f"config key {path + key!r}: expected {types}, got {type(value).__name__}"
                )
            out[key] = value
    for key, spec in schema.items():
        if key in out:
            continue
        if isinstance(spec, dict):
            out[key] = _validate({}, spec, path + key + ".")
        else:
            out[key] = spec[0]
    return out


def validate_config(raw: dict) -> dict:
    """Validate and materialize defaults; raises ConfigError on any problem."""
    cfg = _validate(raw, _SCHEMA, "")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg['schema_version']}")
    if cfg["student"]["mode"] not in ("joint", "reference-only"):
        raise ConfigError(f"student.mode must be joint or reference-only")
    if cfg["teacher"]["dual_form"] not in ("pushforward", "literal"):
        raise ConfigError("teacher.dual_form must be pushforward or literal")
    if cfg["student"]["loss_form"] not in ("standard", "paper-literal"):
        raise ConfigError("student.loss_form must be standard or paper-literal")
    if cfg["sampler"]["method"] not in ("meta", "score-mri-baseline", "zero-filled"):
        raise ConfigError("sampler.method must be meta, score-mri-baseline or zero-filled")
    if cfg["sampler"]["init"] not in ("uniform", "adjoint"):
        raise ConfigError("sampler.init must be uniform or adjoint")
    if cfg["theorem"]["exhaustive_n"] > 6:
        raise ConfigError("theorem.exhaustive_n is bounded at 6 (N^N enumeration)")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(raw)


def snapshot_config(cfg: dict, run_dir) -> None:
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "config.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)
