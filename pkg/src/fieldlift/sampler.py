"""Score-based student, inference half: conditional annealed Langevin MCMC.

The chain anneals down a geometric noise ladder; at level i the step size is
``eta_i = step * (sigma_i / sigma_L)^2`` and each inner update is

    X <- X + eta/2 * (score(X, sigma_i) - data_term) + sqrt(eta) * z.

For the joint reconstruction the data-consistency gradient
``A^H(A x05 - y) / (gamma^2 + sigma_i^2)`` touches only the low-field
channel; the high-field channel is steered by the joint score alone. The
single-image baseline runs the same loop on one channel with the degradation
modeled as extra measurement noise (``gamma_f``), and the prior sampler drops
the data term entirely.

Score sources are callables ``f(X, sigma) -> score`` over batched states
(chains, C, H, W); adapters below wrap trained students, analytic mixtures,
and the zero score.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .arrays import SeededRng, save_array, write_pgm
from .errors import NumericalError
from .mri import KSpaceData, SenseMaps
from .score import GaussianMixture, NoiseSchedule, StudentModel

__all__ = [
    "SamplerConfig",
    "ReconResult",
    "langevin_recon",
    "score_mri_baseline",
    "prior_sample",
    "zero_filled",
    "student_score_source",
    "mixture_score_source",
    "zero_score_source",
    "save_recon",
]


@dataclass(frozen=True)
class SamplerConfig:
    step: float = 2e-5        # eta at the coarsest level
    inner_steps: int = 4      # updates per level
    gamma: float = 0.0        # measurement noise scale of the acquisition
    init: str = "uniform"     # "uniform" or "adjoint"
    final_denoise: bool = False
    gamma_f: float = 0.0      # baseline-only: degradation-as-noise scale
    seed: int = 0

    def __post_init__(self):
        if self.step <= 0 or self.inner_steps < 1 or self.gamma < 0 or self.gamma_f < 0:
            raise ValueError("invalid sampler configuration")
        if self.init not in ("uniform", "adjoint"):
            raise ValueError(f"unknown init mode {self.init!r}")


@dataclass
class ReconResult:
    x05: np.ndarray | None
    x15: np.ndarray
    diagnostics: list
    config: SamplerConfig


# -- score-source adapters -----------------------------------------------------


def student_score_source(model: StudentModel, use_ema: bool = True):
    def source(x, sigma):
        return np.stack([model.score(xi, sigma, use_ema=use_ema) for xi in x])

    return source


def mixture_score_source(mix: GaussianMixture):
    """Vectorized exact score of an eps-smoothed Gaussian mixture."""
    means = np.stack([np.asarray(m, dtype=np.float64).reshape(-1) for m in mix.means])
    weights = np.asarray(mix.weights)
    sigmas = np.asarray(mix.sigmas)

    def source(x, sigma):
        b = x.shape[0]
        flat = x.reshape(b, -1)
        d = flat.shape[1]
        var = sigmas**2 + sigma**2
        sq = ((flat[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)  # (B, K)
        logs = np.log(weights)[None] - 0.5 * sq / var[None] - 0.5 * d * np.log(2 * np.pi * var)[None]
        logs -= logs.max(axis=1, keepdims=True)
        resp = np.exp(logs)
        resp /= resp.sum(axis=1, keepdims=True)
        score = np.einsum("bk,bkd->bd", resp / var[None], means[None, :, :] - flat[:, None, :])
        return score.reshape(x.shape)

    return source


def zero_score_source():
    def source(x, sigma):
        return np.zeros_like(x)

    return source


# -- batched encoding helpers ----------------------------------------------------


def _fft2(a):
    return np.fft.fft2(a, norm="ortho", axes=(-2, -1))


def _ifft2(a):
    return np.fft.ifft2(a, norm="ortho", axes=(-2, -1))


def _batched_A(x, maps, mask):
    # x: (B, H, W) real -> (B, C, H, W) complex
    return mask[None, None] * _fft2(maps[None] * x[:, None])


def _batched_AH(y, maps, mask):
    # y: (B, C, H, W) complex -> (B, H, W) real
    return np.real(np.sum(np.conj(maps)[None] * _ifft2(mask[None, None] * y), axis=1))


def zero_filled(y: KSpaceData, sense: SenseMaps) -> np.ndarray:
    """Adjoint-only reconstruction, the weakest baseline."""
    return _batched_AH(y.data[None], sense.maps, y.mask.mask)[0]


# -- the annealing core ----------------------------------------------------------


def _anneal(score_source, schedule: NoiseSchedule, cfg: SamplerConfig, shape: tuple,
            data_term=None, data_residual=None, chains: int = 1, init_x05=None):
    """Shared annealed Langevin loop.

    ``data_term(x05_channel, sigma) -> (gradient, denominator)`` is applied to
    channel 0 only; ``data_residual(x05) -> scalar per chain`` feeds the
    diagnostics. Returns (state, diagnostics).
    """
    rng = SeededRng(cfg.seed, (ord("L"),))
    c, h, w = shape
    x = rng.uniform((chains, c, h, w))
    if cfg.init == "adjoint" and init_x05 is not None:
        x[:, 0] = init_x05[None]
    sig_top = schedule.sigma(len(schedule))
    diagnostics = []
    for level in range(len(schedule), 0, -1):
        sigma = schedule.sigma(level)
        eta = cfg.step * sigma**2 / sig_top**2
        denom = None
        score = np.zeros_like(x)
        for _ in range(cfg.inner_steps):
            z = rng.normal(x.shape)
            score = score_source(x, sigma)
            drift = score.copy()
            if data_term is not None:
                grad, denom = data_term(x[:, 0], sigma)
                drift[:, 0] -= grad
            x = x + 0.5 * eta * drift + np.sqrt(eta) * z
        row = {
            "level": level,
            "sigma": sigma,
            "eta": eta,
            "score_norm": float(np.mean(np.linalg.norm(score.reshape(chains, -1), axis=1))),
            "denominator": float(denom) if denom is not None else float("nan"),
            "dc_residual": float(np.mean(data_residual(x[:, 0]))) if data_residual else float("nan"),
        }
        diagnostics.append(row)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"sampler state diverged at level {level}: {row}")
    if cfg.final_denoise:
        sig1 = schedule.sigma(1)
        x = x + sig1**2 * score_source(x, sig1)
    return x, diagnostics


def langevin_recon(y: KSpaceData, sense: SenseMaps, schedule: NoiseSchedule,
                   score_source, cfg: SamplerConfig, chains: int = 1) -> ReconResult:
    """Joint conditional reconstruction of [x05, x15] from low-field k-space."""
    maps, mask = sense.maps, y.mask.mask
    h, w = sense.shape
    gamma2 = cfg.gamma**2

    def data_term(x05, sigma):
        denom = gamma2 + sigma**2
        resid = _batched_A(x05, maps, mask) - y.data[None]
        return _batched_AH(resid, maps, mask) / denom, denom

    def data_residual(x05):
        resid = _batched_A(x05, maps, mask) - y.data[None]
        return np.linalg.norm(resid.reshape(x05.shape[0], -1), axis=1)

    init_x05 = _batched_AH(y.data[None], maps, mask)[0] if cfg.init == "adjoint" else None
    x, diag = _anneal(score_source, schedule, cfg, (2, h, w), data_term, data_residual,
                      chains=chains, init_x05=init_x05)
    if chains == 1:
        return ReconResult(x05=x[0, 0], x15=x[0, 1], diagnostics=diag, config=cfg)
    return ReconResult(x05=x[:, 0], x15=x[:, 1], diagnostics=diag, config=cfg)


def score_mri_baseline(y: KSpaceData, sense: SenseMaps, schedule: NoiseSchedule,
                       score_source, cfg: SamplerConfig, chains: int = 1) -> ReconResult:
    """Single-image chain on the high-field channel with the degradation
    approximated as additive noise of scale ``gamma_f``."""
    maps, mask = sense.maps, y.mask.mask
    h, w = sense.shape
    gamma2 = cfg.gamma**2 + cfg.gamma_f**2

    def data_term(x15, sigma):
        denom = gamma2 + sigma**2
        resid = _batched_A(x15, maps, mask) - y.data[None]
        return _batched_AH(resid, maps, mask) / denom, denom

    def data_residual(x15):
        resid = _batched_A(x15, maps, mask) - y.data[None]
        return np.linalg.norm(resid.reshape(x15.shape[0], -1), axis=1)

    init_x05 = _batched_AH(y.data[None], maps, mask)[0] if cfg.init == "adjoint" else None
    x, diag = _anneal(score_source, schedule, cfg, (1, h, w), data_term, data_residual,
                      chains=chains, init_x05=init_x05)
    if chains == 1:
        return ReconResult(x05=None, x15=x[0, 0], diagnostics=diag, config=cfg)
    return ReconResult(x05=None, x15=x[:, 0], diagnostics=diag, config=cfg)


def prior_sample(score_source, schedule: NoiseSchedule, cfg: SamplerConfig,
                 shape: tuple, chains: int = 1):
    """Unconditional annealed Langevin over the learned (or analytic) prior."""
    x, diag = _anneal(score_source, schedule, cfg, shape, None, None, chains=chains)
    return (x[0] if chains == 1 else x), diag


# -- result serialization ---------------------------------------------------------


def save_recon(out_dir, result: ReconResult, tag: str = "recon") -> None:
    """NPY arrays + JSON diagnostics + per-level CSV + PGM previews."""
    os.makedirs(out_dir, exist_ok=True)
    save_array(os.path.join(out_dir, f"{tag}_x15.npy"), result.x15)
    write_pgm(os.path.join(out_dir, f"{tag}_x15.pgm"), result.x15)
    if result.x05 is not None:
        save_array(os.path.join(out_dir, f"{tag}_x05.npy"), result.x05)
        write_pgm(os.path.join(out_dir, f"{tag}_x05.pgm"), result.x05)
    with open(os.path.join(out_dir, f"{tag}_diagnostics.json"), "w") as fh:
        json.dump({"config": asdict(result.config), "levels": result.diagnostics},
                  fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, f"{tag}_levels.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.diagnostics[0]))
        writer.writeheader()
        writer.writerows(result.diagnostics)
