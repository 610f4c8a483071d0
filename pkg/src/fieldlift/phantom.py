"""Synthetic data plant: ellipse phantoms, a known ground-truth degradation,
and dataset assembly.

Stands in for scanner data. High-field-like references are piecewise-constant
overlapping-ellipse images plus a small reference noise; the declared
ground-truth degradation (monotone contrast remap, Gaussian blur, additive
noise) produces the low-field-like side. The degradation noise default is
calibrated so the measured SNR drops roughly threefold, the published
1.5T-to-0.5T figure.

Everything is regenerable bit-exactly from (seed, index), and a dataset
manifest records enough to rebuild every array.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .arrays import SeededRng, load_array, save_array

__all__ = [
    "PhantomSpec",
    "DegradationParams",
    "TheoremInstance",
    "make_phantom",
    "reference_image",
    "degrade",
    "build_dataset",
    "load_manifest",
    "load_split",
    "measure_snr",
    "background_mask",
    "make_theorem_instance",
    "assumption2_holds",
]

# rng derivation tags: one namespace per purpose so streams never collide
_TAG_GEOM = 1
_TAG_REFNOISE = 2
_TAG_DEGRADE = 3

DEFAULT_CLASSES = (0.3, 0.45, 0.6, 0.75, 0.9)
DEFAULT_REMAP = ((0.0, 0.0), (0.25, 0.35), (0.75, 0.65), (1.0, 1.0))


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    n_ellipses: tuple = (4, 9)  # inclusive range for total ellipse count
    class_intensities: tuple = DEFAULT_CLASSES
    noise_std: float = 0.02  # reference-image noise level
    seed: int = 0

    def __post_init__(self):
        if self.size < 32 or (self.size & (self.size - 1)) != 0:
            raise ValueError(f"size must be a power of two >= 32, got {self.size}")
        if any(not 0.0 <= v <= 1.0 for v in self.class_intensities):
            raise ValueError("class intensities must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class DegradationParams:
    """Monotone contrast remap + blur + additive noise; the declared ground truth."""

    remap: tuple = DEFAULT_REMAP  # (intensity_in, intensity_out) control points
    blur_std: float = 1.0
    noise_std: float = 0.06  # calibrated: measured SNR ratio ~3 against the references

    def __post_init__(self):
        xs = [p[0] for p in self.remap]
        ys = [p[1] for p in self.remap]
        if sorted(xs) != list(xs) or len(set(xs)) != len(xs):
            raise ValueError("remap control points must have strictly increasing inputs")
        if sorted(ys) != list(ys):
            raise ValueError("remap must be monotone non-decreasing")
        if self.blur_std < 0 or self.noise_std < 0:
            raise ValueError("blur_std and noise_std must be >= 0")


def _paint_ellipse(img, yy, xx, cy, cx, a, b, theta, value):
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = value


def make_phantom(spec: PhantomSpec, index: int) -> np.ndarray:
    """Piecewise-constant overlapping-ellipse image, values drawn from the
    class table, deterministic in (spec.seed, index)."""
    rng = SeededRng(spec.seed, (_TAG_GEOM, index))
    n = spec.size
    img = np.zeros((n, n))
    lo, hi = spec.n_ellipses
    count = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    if count == 0:
        return img
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")
    classes = spec.class_intensities
    # head outline first, then internal structures overwrite it
    _paint_ellipse(
        img, yy, xx,
        cy=float(rng.uniform(None, -0.04, 0.04)), cx=float(rng.uniform(None, -0.04, 0.04)),
        a=float(rng.uniform(None, 0.60, 0.72)), b=float(rng.uniform(None, 0.72, 0.86)),
        theta=float(rng.uniform(None, -0.15, 0.15)), value=classes[0],
    )
    for _ in range(count - 1):
        r = float(rng.uniform(None, 0.0, 0.42))
        ang = float(rng.uniform(None, 0.0, 2 * np.pi))
        value = classes[1 + int(rng.integers(0, len(classes) - 1))] if len(classes) > 1 else classes[0]
        _paint_ellipse(
            img, yy, xx,
            cy=r * np.sin(ang), cx=r * np.cos(ang),
            a=float(rng.uniform(None, 0.06, 0.30)), b=float(rng.uniform(None, 0.06, 0.30)),
            theta=float(rng.uniform(None, 0.0, np.pi)), value=value,
        )
    return img


def reference_image(spec: PhantomSpec, index: int) -> np.ndarray:
    """Phantom plus reference noise, clipped back into [0, 1]."""
    img = make_phantom(spec, index)
    if spec.noise_std > 0:
        rng = SeededRng(spec.seed, (_TAG_REFNOISE, index))
        img = img + spec.noise_std * rng.normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_remap(x: np.ndarray, params: DegradationParams) -> np.ndarray:
    xs = np.array([p[0] for p in params.remap])
    ys = np.array([p[1] for p in params.remap])
    return np.interp(x, xs, ys)


def degrade(x15: np.ndarray, params: DegradationParams, rng: SeededRng | None = None) -> np.ndarray:
    """Ground-truth degradation: remap -> Gaussian blur -> additive noise.

    Pass ``rng=None`` for the deterministic part only (no noise). Output is
    clipped to [0, 1.5]; the headroom above 1 exists only for noise spikes.
    """
    out = apply_remap(np.asarray(x15, dtype=np.float64), params)
    if params.blur_std > 0:
        out = ndimage.gaussian_filter(out, params.blur_std, mode="nearest")
    if rng is not None and params.noise_std > 0:
        out = out + params.noise_std * rng.normal(out.shape)
    return np.clip(out, 0.0, 1.5)


def background_mask(size: int) -> np.ndarray:
    """Corner region no ellipse can reach; used for noise estimation."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    return yy**2 + xx**2 > 0.95**2


def measure_snr(img: np.ndarray, signal_mask: np.ndarray, bg_mask: np.ndarray) -> float:
    """Mean over the signal mask divided by the noise stddev on the background."""
    noise = float(np.std(img[bg_mask]))
    if noise == 0.0:
        return float("inf")
    return float(np.mean(img[signal_mask])) / noise


# -- dataset assembly ---------------------------------------------------------

MANIFEST_VERSION = 1


def build_dataset(spec: PhantomSpec, params: DegradationParams, n_train: int, n_test: int,
                  out_dir, rng: SeededRng | None = None) -> dict:
    """Write unpaired training sets plus exactly aligned test pairs.

    Train low-field images are the degradations of the train references,
    shuffled so trainers see them unpaired; the shuffle permutation is
    recorded in the manifest (``train_x05[k]`` degrades reference
    ``permutation[k]``). Test pairs share the same seed path, so
    ``x05 = degrade(x15)`` holds exactly.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need n_train >= 1 and n_test >= 1")
    rng = rng if rng is not None else SeededRng(spec.seed)
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "train"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "test"), exist_ok=True)

    manifest = {
        "schema_version": MANIFEST_VERSION,
        "kind": "dataset",
        "phantom": asdict(spec),
        "degradation": asdict(params),
        "n_train": n_train,
        "n_test": n_test,
        "train_x15": [],
        "train_x05": [],
        "test_x15": [],
        "test_x05": [],
        "permutation": [],
    }

    for i in range(n_train):
        x15 = reference_image(spec, i)
        rel = f"train/x15_{i:04d}.npy"
        save_array(os.path.join(out_dir, rel), x15)
        manifest["train_x15"].append(rel)

    perm = rng.derive(_TAG_GEOM, n_train + n_test).permutation(n_train)
    manifest["permutation"] = [int(j) for j in perm]
    for k, j in enumerate(perm):
        x15 = reference_image(spec, int(j))
        x05 = degrade(x15, params, SeededRng(spec.seed, (_TAG_DEGRADE, int(j))))
        rel = f"train/x05_{k:04d}.npy"
        save_array(os.path.join(out_dir, rel), x05)
        manifest["train_x05"].append(rel)

    for i in range(n_test):
        idx = n_train + i
        x15 = reference_image(spec, idx)
        x05 = degrade(x15, params, SeededRng(spec.seed, (_TAG_DEGRADE, idx)))
        rel15, rel05 = f"test/x15_{i:04d}.npy", f"test/x05_{i:04d}.npy"
        save_array(os.path.join(out_dir, rel15), x15)
        save_array(os.path.join(out_dir, rel05), x05)
        manifest["test_x15"].append(rel15)
        manifest["test_x05"].append(rel05)

    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    manifest["_dir"] = os.path.abspath(out_dir)
    return manifest


def load_manifest(path) -> dict:
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["_dir"] = os.path.dirname(os.path.abspath(path))
    return manifest


def load_split(manifest: dict, key: str) -> list:
    base = manifest["_dir"]
    return [load_array(os.path.join(base, rel), expect="real") for rel in manifest[key]]


# -- theorem instances --------------------------------------------------------


@dataclass
class TheoremInstance:
    alpha: np.ndarray        # (n, d) distinct high-field atoms
    beta: np.ndarray         # (n, d) low-field atoms, beta[f_table[i]] = f(alpha[i])
    f_table: np.ndarray      # (n,) canonical index assignment of the ground-truth map
    cost: np.ndarray         # (n, n) Euclidean costs c[i, j] = ||beta[j] - alpha[i]||


def assumption2_holds(alpha: np.ndarray, f_values: np.ndarray) -> bool:
    """Exhaustive pairwise check: each atom is closest to its own degradation,
    strictly closer than to any *different* degraded value."""
    n = len(alpha)
    for i in range(n):
        own = np.linalg.norm(f_values[i] - alpha[i])
        for j in range(n):
            if j == i:
                continue
            other = np.linalg.norm(f_values[j] - alpha[i])
            if np.array_equal(f_values[j], f_values[i]):
                if other < own:
                    return False
            elif other <= own:
                return False
    return True


def make_theorem_instance(n: int, with_duplicates: bool, rng: SeededRng,
                          dim: int = 4, f_kind: str = "contract",
                          max_tries: int = 500) -> TheoremInstance:
    """Sample a discrete instance satisfying the similarity assumption.

    The ground-truth map contracts atoms toward the domain center (or is the
    identity); with ``with_duplicates`` two atoms share one degraded value,
    the configuration under which no low-to-high pushforward map can exist.
    """
    if n < 2:
        raise ValueError("need n >= 2 atoms")
    if f_kind not in ("contract", "identity"):
        raise ValueError(f"unknown f_kind {f_kind!r}")
    for attempt in range(max_tries):
        sub = rng.derive(attempt)
        alpha = sub.uniform((n, dim))
        if f_kind == "identity":
            f_values = alpha.copy()
            if with_duplicates:
                continue  # identity cannot duplicate distinct atoms
        else:
            f_values = 0.5 * alpha + 0.25 + 0.05 * sub.normal((n, dim))
            if with_duplicates:
                f_values[1] = f_values[0]
        # atoms must be pairwise distinct on the high-field side
        if len({a.tobytes() for a in alpha}) != n:
            continue
        if not assumption2_holds(alpha, f_values):
            continue
        perm = sub.permutation(n)
        beta = f_values[perm]
        f_table = _canonical_assignment(f_values, beta)
        cost = np.linalg.norm(beta[None, :, :] - alpha[:, None, :], axis=2)
        return TheoremInstance(alpha=alpha, beta=beta, f_table=f_table, cost=cost)
    raise RuntimeError(f"could not satisfy the similarity assumption in {max_tries} tries")


def _canonical_assignment(f_values: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Index map i -> j with beta[j] == f_values[i], duplicates resolved by
    pairing ascending source indices with ascending target indices (the
    lexicographically smallest optimal assignment)."""
    groups: dict[bytes, list[int]] = {}
    for j, b in enumerate(beta):
        groups.setdefault(b.tobytes(), []).append(j)
    taken = {k: 0 for k in groups}
    table = np.empty(len(f_values), dtype=np.int64)
    for i, v in enumerate(f_values):
        key = v.tobytes()
        table[i] = groups[key][taken[key]]
        taken[key] += 1
    return table
