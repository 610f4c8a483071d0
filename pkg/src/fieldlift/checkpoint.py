"""Checkpoint directories: one NPY file per named tensor plus a JSON manifest.

The manifest records tensor names/shapes/dtypes, optimizer and EMA scalars,
the schedule position, and the RNG state, so a training loop can resume
bit-exactly. Writes go to a temp name first and are renamed into place, so a
killed run never leaves a manifest that points at half-written tensors.
"""

from __future__ import annotations

import json
import os
import shutil

import numpy as np

from .arrays import load_array, save_array
from .errors import MissingPrerequisiteError
from .nn import AdamState, EmaState

__all__ = ["save_checkpoint", "load_checkpoint"]

MANIFEST_NAME = "manifest.json"


def _tensor_file(group: str, name: str) -> str:
    return f"{group}.{name}.npy"


def save_checkpoint(path, params: dict, adam: AdamState | None = None,
                    ema: EmaState | None = None, meta: dict | None = None) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)

    groups = {"params": params}
    if adam is not None:
        groups["adam.m"] = adam.m
        groups["adam.v"] = adam.v
    if ema is not None:
        groups["ema"] = ema.shadow

    tensors = []
    for group, tensdict in groups.items():
        for name, arr in tensdict.items():
            fname = _tensor_file(group, name)
            save_array(os.path.join(tmp, fname), np.asarray(arr, dtype=np.float64))
            tensors.append(
                {"group": group, "name": name, "file": fname,
                 "shape": list(arr.shape), "dtype": str(np.asarray(arr).dtype)}
            )

    manifest = {
        "schema_version": 1,
        "tensors": tensors,
        "adam": None if adam is None else {
            "t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2,
            "lr": adam.lr, "eps": adam.eps,
        },
        "ema": None if ema is None else {"decay": ema.decay},
        "meta": meta or {},
    }
    with open(os.path.join(tmp, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)

    if os.path.exists(path):
        shutil.rmtree(path)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Returns {"params", "adam", "ema", "meta"}; adam/ema are None if absent."""
    path = os.fspath(path)
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise MissingPrerequisiteError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    groups: dict[str, dict] = {}
    for entry in manifest["tensors"]:
        arr = load_array(os.path.join(path, entry["file"]))
        if list(arr.shape) != entry["shape"]:
            raise MissingPrerequisiteError(
                f"checkpoint tensor {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}"
            )
        groups.setdefault(entry["group"], {})[entry["name"]] = arr

    adam = None
    if manifest.get("adam") is not None:
        a = manifest["adam"]
        adam = AdamState(t=a["t"], m=groups.get("adam.m", {}), v=groups.get("adam.v", {}),
                         beta1=a["beta1"], beta2=a["beta2"], lr=a["lr"], eps=a["eps"])
    ema = None
    if manifest.get("ema") is not None:
        ema = EmaState(decay=manifest["ema"]["decay"], shadow=groups.get("ema", {}))

    return {"params": groups.get("params", {}), "adam": adam, "ema": ema,
            "meta": manifest.get("meta", {})}
