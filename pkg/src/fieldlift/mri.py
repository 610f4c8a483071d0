"""Multi-coil Cartesian MRI encoding: A = mask * FFT * coil weighting.

Images stay real-valued (magnitude convention); the forward operator embeds
them into complex k-space per coil, and the adjoint projects back onto real
images. With the unitary FFT and sum-of-squares-normalized coils this makes
A's adjoint a literal conjugate transpose and bounds ||A|| by 1.

Undersampling uses line masks: whole phase-encode rows are kept or dropped,
with a fully sampled ACS block at the center.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .arrays import SeededRng, fft2, ifft2, load_array, save_array

__all__ = [
    "SenseMaps",
    "SamplingMask",
    "KSpaceData",
    "make_sense",
    "make_mask",
    "apply_A",
    "apply_AH",
    "simulate_acquisition",
    "operator_norm",
    "save_kspace",
    "load_kspace",
]


@dataclass
class SenseMaps:
    """C complex coil maps, sum-of-squares = 1 at every pixel."""

    maps: np.ndarray  # (C, H, W) complex

    @property
    def ncoils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple:
        return self.maps.shape[1:]


@dataclass
class SamplingMask:
    """Binary H x W mask, constant along each selected row; ACS rows at center."""

    mask: np.ndarray  # (H, W) float64 in {0, 1}
    accel: float
    acs: int

    @property
    def shape(self) -> tuple:
        return self.mask.shape


@dataclass
class KSpaceData:
    """Multi-coil k-space samples, identically zero off-mask."""

    data: np.ndarray  # (C, H, W) complex
    mask: SamplingMask
    noise_std: float  # gamma used in simulation (per real/imag component)


def make_sense(h: int, w: int, c: int, seed: int) -> SenseMaps:
    """Smooth complex coil maps: Gaussian magnitude lobes around the FOV with
    low-order polynomial phase, normalized so sum_c |S_c|^2 = 1 everywhere."""
    if c < 1:
        raise ValueError("need at least one coil")
    rng = SeededRng(seed, (ord("S"),))
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    maps = np.empty((c, h, w), dtype=complex)
    for k in range(c):
        angle = 2 * np.pi * k / c + float(rng.uniform(None, -0.2, 0.2))
        cy, cx = 1.15 * np.sin(angle), 1.15 * np.cos(angle)
        width = 1.1 + float(rng.uniform(None, -0.1, 0.1))
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        coeff = rng.uniform(3, -0.5, 0.5)
        phase = coeff[0] * xx + coeff[1] * yy + coeff[2] * xx * yy
        maps[k] = mag * np.exp(1j * phase)
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps /= sos[None]
    return SenseMaps(maps)


def make_mask(h: int, w: int, r: float, acs: int, seed: int) -> SamplingMask:
    """Uniform-random row selection outside the ACS block, hitting an overall
    sampled fraction of 1/R to within one line."""
    if not 1 <= acs < h:
        raise ValueError(f"acs must lie in [1, {h}), got {acs}")
    if r < 1:
        raise ValueError("acceleration must be >= 1")
    n_target = int(round(h / r))
    if acs > n_target:
        raise ValueError(f"acs={acs} alone exceeds the H/R={h / r:.1f} line budget")
    rows = np.zeros(h, dtype=bool)
    lo = (h - acs) // 2
    rows[lo : lo + acs] = True
    remaining = n_target - acs
    if remaining > 0:
        pool = np.flatnonzero(~rows)
        rng = SeededRng(seed, (ord("P"),))
        picks = rng.choice(len(pool), size=remaining, replace=False)
        rows[pool[np.sort(picks)]] = True
    mask = np.repeat(rows[:, None].astype(np.float64), w, axis=1)
    return SamplingMask(mask=mask, accel=float(r), acs=acs)


def _check_geometry(x: np.ndarray, sense: SenseMaps, mask: SamplingMask) -> None:
    if x.shape != sense.shape or x.shape != mask.shape:
        raise ValueError(
            f"geometry mismatch: image {x.shape}, coils {sense.shape}, mask {mask.shape}"
        )


def apply_A(x: np.ndarray, sense: SenseMaps, mask: SamplingMask) -> KSpaceData:
    """Forward encoding: per coil, y_c = mask * fft2(S_c * x)."""
    x = np.asarray(x, dtype=np.float64)
    _check_geometry(x, sense, mask)
    c = sense.ncoils
    out = np.empty((c,) + x.shape, dtype=complex)
    for k in range(c):
        out[k] = mask.mask * fft2(sense.maps[k] * x)
    return KSpaceData(data=out, mask=mask, noise_std=0.0)


def apply_AH(y: KSpaceData, sense: SenseMaps, mask: SamplingMask | None = None) -> np.ndarray:
    """Adjoint of :func:`apply_A` onto real images:
    x = Re( sum_c conj(S_c) * ifft2(mask * y_c) )."""
    m = mask if mask is not None else y.mask
    if y.data.shape[0] != sense.ncoils or y.data.shape[1:] != sense.shape:
        raise ValueError(f"geometry mismatch: k-space {y.data.shape}, coils {sense.maps.shape}")
    acc = np.zeros(sense.shape, dtype=complex)
    for k in range(sense.ncoils):
        acc += np.conj(sense.maps[k]) * ifft2(m.mask * y.data[k])
    return np.real(acc)


def simulate_acquisition(x05: np.ndarray, sense: SenseMaps, mask: SamplingMask,
                         gamma: float, rng: SeededRng) -> KSpaceData:
    """y = A x + n with complex Gaussian noise of per-component stddev gamma,
    added on sampled entries only."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    y = apply_A(x05, sense, mask)
    if gamma > 0:
        c = sense.ncoils
        noise = gamma * (rng.normal((c,) + x05.shape) + 1j * rng.normal((c,) + x05.shape))
        y.data += mask.mask[None] * noise
    y.noise_std = float(gamma)
    return y


def operator_norm(sense: SenseMaps, mask: SamplingMask, iters: int = 50, seed: int = 0) -> float:
    """||A|| estimated by power iteration on A^H A over real images."""
    rng = SeededRng(seed, (ord("N"),))
    v = rng.normal(sense.shape)
    v /= np.linalg.norm(v)
    sigma2 = 0.0
    for _ in range(iters):
        av = apply_AH(apply_A(v, sense, mask), sense)
        sigma2 = float(np.sum(v * av))
        n = np.linalg.norm(av)
        if n == 0:
            return 0.0
        v = av / n
    return float(np.sqrt(max(sigma2, 0.0)))


def save_kspace(prefix, y: KSpaceData) -> None:
    """One complex NPY for data + mask NPY + JSON sidecar (gamma, R, acs)."""
    save_array(str(prefix) + ".kspace.npy", y.data)
    save_array(str(prefix) + ".mask.npy", y.mask.mask)
    with open(str(prefix) + ".json", "w") as fh:
        json.dump(
            {"noise_std": y.noise_std, "accel": y.mask.accel, "acs": y.mask.acs},
            fh, indent=1, sort_keys=True,
        )


def load_kspace(prefix) -> KSpaceData:
    data = load_array(str(prefix) + ".kspace.npy", expect="complex")
    mask = load_array(str(prefix) + ".mask.npy", expect="real")
    with open(str(prefix) + ".json") as fh:
        side = json.load(fh)
    return KSpaceData(
        data=data,
        mask=SamplingMask(mask=mask, accel=side["accel"], acs=side["acs"]),
        noise_std=side["noise_std"],
    )
