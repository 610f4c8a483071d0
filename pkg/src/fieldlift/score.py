"""Score-based student, learning half.

The student learns the joint distribution of pseudo-paired low/high-field
images: states are two-channel stacks X = [x05, x15] perturbed by a geometric
ladder of Gaussian noise scales, and one unconditional network is trained by
denoising score matching, its raw output divided by the noise scale at
evaluation time.

Two loss forms exist. The default ("standard") trains the net to predict
-z, so that raw/eps is the score of the eps-smoothed distribution, which is
what the Langevin sampler consumes. The "paper-literal" form divides the
noise target by eps as printed in the source equation; the two coincide at
eps = 1. See the analytic mixture score here for the closed-form oracle used
to test both the loss optimum and the sampler.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, asdict

import numpy as np

from .arrays import SeededRng
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NumericalError
from . import nn

__all__ = [
    "NoiseSchedule",
    "StudentConfig",
    "StudentModel",
    "GaussianMixture",
    "make_schedule",
    "dsm_loss",
    "train_student",
    "analytic_joint_score",
    "smoothed_log_density",
]

PAPER_SCHEDULE = (0.0066, 50.0, 266)  # published student ladder
LOSS_FORMS = ("standard", "paper-literal")


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric ladder eps_1 < ... < eps_L with constant ratio."""

    levels: tuple

    def __len__(self):
        return len(self.levels)

    @property
    def ratio(self) -> float:
        return self.levels[1] / self.levels[0]

    def sigma(self, i: int) -> float:
        """1-based level index, matching the ladder's subscripts."""
        return self.levels[i - 1]


def make_schedule(eps1: float, eps_l: float, n_levels: int) -> NoiseSchedule:
    if not 0 < eps1 < eps_l:
        raise ValueError(f"need 0 < eps1 < epsL, got ({eps1}, {eps_l})")
    if n_levels < 2:
        raise ValueError("need at least two levels")
    levels = np.geomspace(eps1, eps_l, n_levels)
    levels[0], levels[-1] = eps1, eps_l  # endpoints exact by construction
    return NoiseSchedule(levels=tuple(float(v) for v in levels))


def dsm_loss(net: nn.NetworkSpec, params: dict, schedule: NoiseSchedule, batch: list,
             level: int, z: list, form: str = "standard"):
    """Denoising-score-matching loss and parameter gradients at one level.

    ``batch`` is a list of clean states (C, H, W); ``z`` the matching list of
    standard-normal draws. Perturbs X = X0 + eps_i z and scores
    0.5 * mean((raw(X) + target)^2) per sample, averaged over the batch,
    where target is z (standard) or z/eps_i (paper-literal).
    """
    if form not in LOSS_FORMS:
        raise ValueError(f"unknown loss form {form!r}")
    sigma = schedule.sigma(level)
    total = 0.0
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    for x0, noise in zip(batch, z):
        if x0.shape != noise.shape:
            raise ValueError(f"noise shape {noise.shape} != sample shape {x0.shape}")
        x_tilde = x0 + sigma * noise
        raw = nn.forward(net, params, x_tilde)
        target = noise if form == "standard" else noise / sigma
        resid = raw + target
        total += 0.5 * float(np.mean(resid**2))
        g, _ = nn.backward(net, params, x_tilde, resid / resid.size)
        for k in grads:
            grads[k] += g[k] / len(batch)
    return total / len(batch), grads


@dataclass(frozen=True)
class StudentConfig:
    epochs: int = 30
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    ema_decay: float = 0.999
    channels: int = 32
    depth: int = 5
    loss_form: str = "standard"
    seed: int = 0


@dataclass
class StudentModel:
    net: nn.NetworkSpec
    params: dict
    ema: nn.EmaState
    schedule: NoiseSchedule
    config: StudentConfig

    @property
    def channels(self) -> int:
        return self.net.in_shape[0]

    def score(self, x: np.ndarray, sigma: float, use_ema: bool = True) -> np.ndarray:
        params = self.ema.shadow if use_ema else self.params
        return nn.forward(self.net, params, x, sigma=sigma)

    @classmethod
    def init(cls, channels: int, hw: int, schedule: NoiseSchedule, config: StudentConfig):
        net = nn.make_conv_net(channels, channels, hw, channels=config.channels,
                               depth=config.depth, activation="elu")
        rng = SeededRng(config.seed, (ord("S"), ord("t")))
        params = nn.init_params(net, rng)
        return cls(net=net, params=params, ema=nn.ema_init(params, config.ema_decay),
                   schedule=schedule, config=config)

    def save(self, path, meta: dict | None = None, adam: nn.AdamState | None = None) -> None:
        meta = dict(meta or {})
        meta["config"] = asdict(self.config)
        meta["schedule"] = list(self.schedule.levels)
        meta["channels"] = int(self.net.in_shape[0])
        meta["hw"] = int(self.net.in_shape[-1])
        save_checkpoint(path, self.params, adam=adam, ema=self.ema, meta=meta)

    @classmethod
    def load(cls, path) -> "StudentModel":
        ck = load_checkpoint(path)
        meta = ck["meta"]
        config = StudentConfig(**meta["config"])
        schedule = NoiseSchedule(levels=tuple(meta["schedule"]))
        model = cls.init(meta["channels"], meta["hw"], schedule, config)
        model.params = ck["params"]
        if ck["ema"] is not None:
            model.ema = ck["ema"]
        return model


def train_student(samples: list, schedule: NoiseSchedule, config: StudentConfig,
                  ckpt_dir=None, resume: bool = False, log_path=None):
    """Train the score network on clean states (joint pairs or single images).

    Per step: draw a sample, a uniform level, and fresh noise; one Adam step
    on :func:`dsm_loss`; EMA update. Levels and noise derive from
    (seed, epoch, step), so a resumed run reproduces the loss log bit-exactly.
    Returns (StudentModel, log rows).
    """
    if not samples:
        raise ValueError("training set must be nonempty")
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if samples[0].ndim != 3:
        raise ValueError("samples must be channel-stacked (C, H, W)")
    channels, hw = samples[0].shape[0], samples[0].shape[-1]
    model = StudentModel.init(channels, hw, schedule, config)
    adam = nn.adam_init(model.params, config.lr, config.beta1, config.beta2)
    n_levels = len(schedule)
    start_epoch = 0
    log: list[dict] = []

    if resume:
        if ckpt_dir is None:
            raise ValueError("resume requires a checkpoint directory")
        epochs_done = sorted(
            int(d.split("_")[1]) for d in os.listdir(ckpt_dir)
            if d.startswith("epoch_") and os.path.isdir(os.path.join(ckpt_dir, d))
        ) if os.path.isdir(ckpt_dir) else []
        if epochs_done:
            last = epochs_done[-1]
            ck = load_checkpoint(os.path.join(ckpt_dir, f"epoch_{last:04d}"))
            model.params, model.ema = ck["params"], ck["ema"]
            adam.t, adam.m, adam.v, adam.lr = ck["adam"].t, ck["adam"].m, ck["adam"].v, ck["adam"].lr
            start_epoch = last + 1
            log = _read_loss_log(log_path) if log_path and os.path.exists(log_path) else []
            log = [row for row in log if row["step"] < start_epoch * len(samples)]

    rng = SeededRng(config.seed, (ord("s"), ord("t")))
    global_step = start_epoch * len(samples)
    for epoch in range(start_epoch, config.epochs):
        erng = rng.derive(epoch)
        order = erng.permutation(len(samples))
        for k, idx in enumerate(order):
            srng = erng.derive(k)
            level = int(srng.integers(1, n_levels + 1))
            x0 = samples[int(idx)]
            z = srng.normal(x0.shape)
            loss, grads = dsm_loss(model.net, model.params, schedule, [x0], level, [z],
                                   form=config.loss_form)
            try:
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite student loss at step {global_step}")
                model.params, adam = nn.adam_step(adam, model.params, grads)
            except NumericalError:
                if ckpt_dir is not None:
                    model.save(os.path.join(ckpt_dir, f"diverged_epoch_{epoch:04d}"),
                               meta={"epoch": epoch, "step": global_step}, adam=adam)
                raise
            nn.ema_update(model.ema, model.params)
            log.append({"step": global_step, "level": level,
                        "sigma": schedule.sigma(level), "loss": loss})
            global_step += 1
        if ckpt_dir is not None:
            model.save(os.path.join(ckpt_dir, f"epoch_{epoch:04d}"),
                       meta={"epoch": epoch, "step": global_step}, adam=adam)
            if log_path:
                _write_loss_log(log_path, log)
    return model, log


def _write_loss_log(path, log):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "level", "sigma", "loss"])
        writer.writeheader()
        writer.writerows(log)
    os.replace(tmp, path)


def _read_loss_log(path):
    with open(path, newline="") as fh:
        return [
            {"step": int(r["step"]), "level": int(r["level"]),
             "sigma": float(r["sigma"]), "loss": float(r["loss"])}
            for r in csv.DictReader(fh)
        ]


# -- analytic scores for oracle-driven tests -----------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    """Finite isotropic Gaussian mixture over flattened states."""

    weights: tuple
    means: tuple   # each an array-like state
    sigmas: tuple  # per-component isotropic stddev

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if any(w <= 0 for w in self.weights):
            raise ValueError("mixture weights must be positive")


def _component_logpdfs(mix: GaussianMixture, x: np.ndarray, eps: float):
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    logs = []
    variances = []
    for w, mu, s in zip(mix.weights, mix.means, mix.sigmas):
        var = s * s + eps * eps
        if var <= 0:
            raise ValueError("degenerate covariance: sigma and eps both zero")
        mu = np.asarray(mu, dtype=np.float64)
        sq = float(np.sum((x - mu) ** 2))
        logs.append(np.log(w) - 0.5 * sq / var - 0.5 * d * np.log(2 * np.pi * var))
        variances.append(var)
    return np.array(logs), variances


def smoothed_log_density(mix: GaussianMixture, x: np.ndarray, eps: float) -> float:
    logs, _ = _component_logpdfs(mix, x, eps)
    m = logs.max()
    return float(m + np.log(np.sum(np.exp(logs - m))))


def analytic_joint_score(mix: GaussianMixture, x: np.ndarray, eps: float) -> np.ndarray:
    """Exact grad log p_eps(x) of the eps-smoothed mixture, via responsibilities."""
    x = np.asarray(x, dtype=np.float64)
    logs, variances = _component_logpdfs(mix, x, eps)
    m = logs.max()
    resp = np.exp(logs - m)
    resp /= resp.sum()
    out = np.zeros_like(x)
    for r, mu, var in zip(resp, mix.means, variances):
        out += r * (np.asarray(mu, dtype=np.float64) - x) / var
    return out
