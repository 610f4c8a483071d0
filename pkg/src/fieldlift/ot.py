"""Optimal-transport teacher.

Three layers of machinery around the same idea:

* exact discrete solvers (:func:`exact_monge`, :func:`pushforward_exists`)
  that verify combinatorially why low-to-high-field pushforward maps cannot
  exist once degradation collapses two images onto one, while the
  high-to-low direction has a unique cost-minimizing solution equal to the
  true degradation;
* a Kantorovich-dual estimator with a spectrally normalized critic;
* an adversarial trainer that learns the degradation map from unpaired
  image sets and emits pseudo-pairs for the score student.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import linear_sum_assignment

from .arrays import SeededRng, save_array
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NumericalError
from . import nn

__all__ = [
    "PushforwardResult",
    "TeacherConfig",
    "TeacherModel",
    "exact_monge",
    "pushforward_exists",
    "dual_objective",
    "kantorovich_dual_gap",
    "train_teacher",
    "gen_pairs",
    "write_pairs",
    "load_pairs",
]

ENUMERATION_LIMIT = 6  # N^N map enumeration is exhaustive only up to here


def _as_atoms(a) -> np.ndarray:
    atoms = np.asarray(a, dtype=np.float64)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    return atoms.reshape(atoms.shape[0], -1)


def _cost_matrix(alpha, beta, cost=None) -> np.ndarray:
    if cost is not None and not callable(cost):
        c = np.asarray(cost, dtype=np.float64)
        if c.shape != (len(alpha), len(beta)):
            raise ValueError(f"cost table shape {c.shape} != ({len(alpha)}, {len(beta)})")
        return c
    a, b = _as_atoms(alpha), _as_atoms(beta)
    if cost is None:
        return np.linalg.norm(b[None, :, :] - a[:, None, :], axis=2)
    return np.array([[cost(b[j], a[i]) for j in range(len(b))] for i in range(len(a))])


def exact_monge(alpha, beta, cost=None):
    """Exact minimum-cost assignment pushing the uniform measure on ``alpha``
    onto the uniform measure on ``beta``.

    Duplicates on the beta side are allowed (they simply occupy several
    columns). Among cost-equal optima the lexicographically smallest
    assignment is returned, so results are reproducible. Returns
    ``(assignment, total_cost)``.
    """
    a, b = _as_atoms(alpha), _as_atoms(beta)
    if len(a) != len(b):
        raise ValueError(f"atom counts differ: {len(a)} vs {len(b)}")
    c = _cost_matrix(alpha, beta, cost)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    n = len(a)

    def optimum(matrix):
        rows, cols = linear_sum_assignment(matrix)
        return float(matrix[rows, cols].sum())

    best = optimum(c)
    tol = 1e-9 * max(1.0, abs(best))
    # fix rows one by one to the smallest column that preserves optimality
    assign = np.empty(n, dtype=np.int64)
    free_cols = list(range(n))
    remaining = c
    fixed_cost = 0.0
    for i in range(n):
        for pos, j in enumerate(free_cols):
            candidate = fixed_cost + c[i, j]
            rest = np.delete(remaining[1:], pos, axis=1)
            if rest.size:
                candidate += optimum(rest)
            if candidate <= best + tol:
                assign[i] = j
                fixed_cost += c[i, j]
                free_cols.pop(pos)
                remaining = np.delete(remaining[1:], pos, axis=1)
                break
        else:
            raise RuntimeError("no column preserves optimality; numerical inconsistency")
    total = float(c[np.arange(n), assign].sum())
    return assign, total


@dataclass
class PushforwardResult:
    exists: bool
    witness: np.ndarray | None  # index map j -> target alpha index, when it exists
    enumerated: int             # value-consistent maps enumerated (0 if skipped)
    valid_count: int            # how many of them push beta onto alpha


def pushforward_exists(beta, alpha, enumerate_all: bool | None = None) -> PushforwardResult:
    """Can any function of the beta-atom *values* push beta onto alpha?

    Requires pairwise-distinct alpha atoms. The analytic answer (yes iff the
    beta atoms are pairwise distinct) is cross-checked by exhaustively
    enumerating every index map that is constant on duplicate beta values,
    whenever N <= 6 (or ``enumerate_all=True``).
    """
    a, b = _as_atoms(alpha), _as_atoms(beta)
    if len(a) != len(b):
        raise ValueError(f"atom counts differ: {len(a)} vs {len(b)}")
    n = len(a)
    if len({row.tobytes() for row in a}) != n:
        raise ValueError("alpha atoms must be pairwise distinct")

    keys = [row.tobytes() for row in b]
    groups: dict[bytes, list[int]] = {}
    for j, k in enumerate(keys):
        groups.setdefault(k, []).append(j)
    distinct = list(groups)
    exists = len(distinct) == n
    witness = np.arange(n, dtype=np.int64) if exists else None

    if enumerate_all is None:
        enumerate_all = n <= ENUMERATION_LIMIT
    enumerated = valid = 0
    if enumerate_all:
        if n > ENUMERATION_LIMIT:
            raise ValueError(f"exhaustive enumeration is bounded at N={ENUMERATION_LIMIT}")
        group_of = {k: idxs for k, idxs in groups.items()}
        for targets in itertools.product(range(n), repeat=n):
            enumerated += 1
            # a candidate map must be a function of beta *values*
            consistent = all(
                len({targets[j] for j in idxs}) == 1 for idxs in group_of.values()
            )
            if not consistent:
                continue
            hits = np.bincount(targets, minlength=n)
            if np.all(hits == 1):
                valid += 1
        if (valid > 0) != exists:
            raise AssertionError("enumeration contradicts the analytic existence rule")
    return PushforwardResult(exists=exists, witness=witness, enumerated=enumerated, valid_count=valid)


# -- Kantorovich dual with a spectrally normalized critic ----------------------


def _critic_net_for(sample: np.ndarray, channels: int = 16) -> nn.NetworkSpec:
    if sample.ndim == 3:
        c, h, w = sample.shape
        n_down = 3 if h >= 32 else max(1, int(np.log2(h)) - 1)
        return nn.make_critic_net(c, h, channels=channels, n_down=n_down)
    sizes = (sample.size, 4 * channels, 2 * channels, 1)
    return nn.make_dense_net(sizes, activation="lrelu")


def dual_objective(mapped: list, target: list, net: nn.NetworkSpec, params: dict) -> float:
    """mean critic(mapped) - mean critic(target); the W1 lower bound for a
    1-Lipschitz critic. Antisymmetric under swapping the two sides."""
    pos = float(np.mean([nn.forward(net, params, x).reshape(-1)[0] for x in mapped]))
    neg = float(np.mean([nn.forward(net, params, x).reshape(-1)[0] for x in target]))
    return pos - neg


def kantorovich_dual_gap(mapped: list, target: list, steps: int = 300, seed: int = 0,
                         channels: int = 16, batch: int = 8, lr: float = 1e-3,
                         net: nn.NetworkSpec | None = None):
    """Train a fresh critic to discriminate ``mapped`` from ``target`` and
    return ``(gap, net, params)`` with the final full-set dual objective."""
    def lift(x):
        x = np.asarray(x, dtype=np.float64)
        return x[None] if x.ndim == 2 else x  # bare images become one-channel

    mapped = [lift(x) for x in mapped]
    target = [lift(x) for x in target]
    rng = SeededRng(seed, (ord("D"),))
    if net is None:
        net = _critic_net_for(mapped[0], channels=channels)
    params = nn.init_params(net, rng)
    proj = nn.SpectralProjector(net)
    params = proj.project(params, iters=10)
    adam = nn.adam_init(params, lr=lr, beta1=0.5, beta2=0.999)
    m = min(batch, len(mapped), len(target))
    for step in range(steps):
        srng = rng.derive(step)
        grads = {k: np.zeros_like(p) for k, p in params.items()}
        for idx in srng.choice(len(mapped), m):
            g, _ = nn.backward(net, params, mapped[idx], np.ones(1))
            for k in grads:
                grads[k] += g[k] / m
        for idx in srng.choice(len(target), m):
            g, _ = nn.backward(net, params, target[idx], np.ones(1))
            for k in grads:
                grads[k] -= g[k] / m
        params, adam = nn.adam_step(adam, params, grads, scale=-1.0)  # ascent
        params = proj.project(params)
    params = proj.project(params, iters=10)
    return dual_objective(mapped, target, net, params), net, params


# -- adversarial teacher --------------------------------------------------------


@dataclass(frozen=True)
class TeacherConfig:
    epochs: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.95        # multiplied in once per epoch
    beta1: float = 0.5
    beta2: float = 0.999
    critic_steps: int = 5
    lambda_cost: float = 10.0     # weight of the transport-cost term
    map_channels: int = 24
    map_depth: int = 4
    critic_channels: int = 16
    critic_downs: int = 3
    dual_form: str = "pushforward"  # "literal" integrates the map against the low-field set
    seed: int = 0

    def __post_init__(self):
        if self.dual_form not in ("pushforward", "literal"):
            raise ValueError(f"unknown dual_form {self.dual_form!r}")


@dataclass
class TeacherModel:
    """Residual degradation map plus its critic. ``apply`` computes T(x)."""

    map_net: nn.NetworkSpec
    map_params: dict
    critic_net: nn.NetworkSpec
    critic_params: dict
    config: TeacherConfig

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x + nn.forward(self.map_net, self.map_params, x[None])[0]

    def checkpoint_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.map_params):
            h.update(name.encode())
            h.update(self.map_params[name].tobytes())
        return h.hexdigest()

    @classmethod
    def init(cls, hw: int, config: TeacherConfig) -> "TeacherModel":
        rng = SeededRng(config.seed, (ord("T"),))
        map_net = nn.make_conv_net(1, 1, hw, channels=config.map_channels,
                                   depth=config.map_depth, activation="elu")
        map_params = nn.init_params(map_net, rng)
        # zero the residual head: the map starts as the identity
        last = max(i for i, l in enumerate(map_net.layers) if l.kind == "conv3x3")
        map_params[f"layer{last:02d}.weight"] = np.zeros_like(map_params[f"layer{last:02d}.weight"])
        critic_net = nn.make_critic_net(1, hw, channels=config.critic_channels,
                                        n_down=config.critic_downs)
        critic_params = nn.init_params(critic_net, rng.derive(1))
        return cls(map_net, map_params, critic_net, critic_params, config)

    @classmethod
    def identity(cls, hw: int) -> "TeacherModel":
        """Identity-initialized teacher (zero residual); useful as a baseline."""
        return cls.init(hw, TeacherConfig(epochs=0))

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["config"] = asdict(self.config)
        meta["hw"] = int(self.map_net.in_shape[-1])
        save_checkpoint(os.path.join(path, "map"), self.map_params, meta=meta)
        save_checkpoint(os.path.join(path, "critic"), self.critic_params, meta={})

    @classmethod
    def load(cls, path) -> "TeacherModel":
        mp = load_checkpoint(os.path.join(path, "map"))
        cp = load_checkpoint(os.path.join(path, "critic"))
        config = TeacherConfig(**mp["meta"]["config"])
        hw = _infer_hw(mp["meta"])
        model = cls.init(hw, config)
        model.map_params = mp["params"]
        model.critic_params = cp["params"]
        return model


def _infer_hw(meta: dict) -> int:
    return int(meta["hw"])


def train_teacher(x15s: list, x05s: list, config: TeacherConfig,
                  ckpt_dir=None, resume: bool = False, log_path=None):
    """Alternating dual ascent / map descent on unpaired sets.

    Per map step: ``critic_steps`` critic ascents of
    mean critic(T(x15)) - mean critic(x05) under spectral normalization, then
    one descent step on the same dual term plus
    lambda * ||T(x) - x|| (the transport-cost term). Batch size 1, Adam,
    learning rate decayed once per epoch. Returns (model, loss_log).
    """
    if not x15s or not x05s:
        raise ValueError("training sets must be nonempty")
    hw = x15s[0].shape[-1]
    model = TeacherModel.init(hw, config)
    map_adam = nn.adam_init(model.map_params, config.lr, config.beta1, config.beta2)
    critic_adam = nn.adam_init(model.critic_params, config.lr, config.beta1, config.beta2)
    proj = nn.SpectralProjector(model.critic_net)
    start_epoch = 0
    log: list[dict] = []

    resumed = False
    if resume:
        if ckpt_dir is None:
            raise ValueError("resume requires a checkpoint directory")
        epochs_done = sorted(
            int(d.split("_")[1]) for d in os.listdir(ckpt_dir)
            if d.startswith("epoch_") and os.path.isdir(os.path.join(ckpt_dir, d))
        ) if os.path.isdir(ckpt_dir) else []
        if epochs_done:
            start_epoch = epochs_done[-1] + 1
            _load_teacher_state(ckpt_dir, epochs_done[-1], model, map_adam, critic_adam, proj)
            log = _read_loss_log(log_path) if log_path and os.path.exists(log_path) else []
            log = [row for row in log if row["epoch"] < start_epoch]
            resumed = True
    if not resumed:
        model.critic_params = proj.project(model.critic_params, iters=10)

    rng = SeededRng(config.seed, (ord("t"), ord("r")))
    for epoch in range(start_epoch, config.epochs):
        erng = rng.derive(epoch)
        order = erng.permutation(len(x15s))
        for step, i15 in enumerate(order):
            srng = erng.derive(step)
            x15 = x15s[int(i15)][None]
            # critic ascent
            critic_obj = 0.0
            for j in range(config.critic_steps):
                crng = srng.derive(j)
                a = x15s[int(crng.integers(0, len(x15s)))][None]
                b = x05s[int(crng.integers(0, len(x05s)))][None]
                pos_in, neg_in = _dual_sides(model, a, b, config.dual_form)
                gp, _ = nn.backward(model.critic_net, model.critic_params, pos_in, np.ones(1))
                gn, _ = nn.backward(model.critic_net, model.critic_params, neg_in, np.ones(1))
                grads = {k: gp[k] - gn[k] for k in gp}
                model.critic_params, critic_adam = nn.adam_step(
                    critic_adam, model.critic_params, grads, scale=-1.0
                )
                model.critic_params = proj.project(model.critic_params)
                critic_obj = float(
                    nn.forward(model.critic_net, model.critic_params, pos_in)[0]
                    - nn.forward(model.critic_net, model.critic_params, neg_in)[0]
                )
            # map descent
            if config.dual_form == "literal":
                src = x05s[int(srng.derive(977).integers(0, len(x05s)))][None]
            else:
                src = x15
            res = nn.forward(model.map_net, model.map_params, src)
            t_x = src + res
            _, dphi = nn.backward(model.critic_net, model.critic_params, t_x, np.ones(1))
            dual_val = float(nn.forward(model.critic_net, model.critic_params, t_x)[0])
            upstream = dphi
            cost_val = 0.0
            if config.dual_form == "pushforward":
                norm = float(np.linalg.norm(res))
                cost_val = norm
                if norm > 0:
                    upstream = upstream + config.lambda_cost * res / norm
            map_grads, _ = nn.backward(model.map_net, model.map_params, src, upstream)
            try:
                if not np.all(np.isfinite(t_x)):
                    raise NumericalError("teacher training diverged (non-finite map output)")
                model.map_params, map_adam = nn.adam_step(map_adam, model.map_params, map_grads)
            except NumericalError:
                if ckpt_dir is not None:
                    _save_teacher_state(ckpt_dir, epoch, hw, model, map_adam, critic_adam, proj,
                                        tag="diverged")
                raise
            log.append(
                {"epoch": epoch, "step": step, "critic_obj": critic_obj,
                 "map_dual": dual_val, "map_cost": cost_val}
            )
        map_adam.lr *= config.lr_decay
        critic_adam.lr *= config.lr_decay
        if ckpt_dir is not None:
            _save_teacher_state(ckpt_dir, epoch, hw, model, map_adam, critic_adam, proj)
            if log_path:
                _write_loss_log(log_path, log)
    return model, log


def _save_teacher_state(ckpt_dir, epoch, hw, model, map_adam, critic_adam, proj, tag=None):
    name = f"epoch_{epoch:04d}" if tag is None else f"{tag}_epoch_{epoch:04d}"
    base = os.path.join(ckpt_dir, name)
    meta = {"config": asdict(model.config), "hw": hw, "epoch": epoch}
    save_checkpoint(os.path.join(base, "map"), model.map_params, adam=map_adam, meta=meta)
    save_checkpoint(os.path.join(base, "critic"), model.critic_params, adam=critic_adam, meta={})
    save_checkpoint(os.path.join(base, "sn"), proj.export_state(), meta={})


def _load_teacher_state(ckpt_dir, epoch, model, map_adam, critic_adam, proj):
    base = os.path.join(ckpt_dir, f"epoch_{epoch:04d}")
    mp = load_checkpoint(os.path.join(base, "map"))
    cp = load_checkpoint(os.path.join(base, "critic"))
    model.map_params = mp["params"]
    model.critic_params = cp["params"]
    proj.load_state(load_checkpoint(os.path.join(base, "sn"))["params"])
    for dst, src in ((map_adam, mp["adam"]), (critic_adam, cp["adam"])):
        dst.t, dst.m, dst.v, dst.lr = src.t, src.m, src.v, src.lr


def _write_loss_log(path, log):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "step", "critic_obj", "map_dual", "map_cost"])
        writer.writeheader()
        writer.writerows(log)
    os.replace(tmp, path)


def _read_loss_log(path):
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append(
                {"epoch": int(row["epoch"]), "step": int(row["step"]),
                 "critic_obj": float(row["critic_obj"]), "map_dual": float(row["map_dual"]),
                 "map_cost": float(row["map_cost"])}
            )
        return rows


def _dual_sides(model, x15, x05, dual_form):
    """Critic inputs for the positive/negative sides of the dual objective."""
    if dual_form == "literal":
        return x05 + nn.forward(model.map_net, model.map_params, x05), x15
    return x15 + nn.forward(model.map_net, model.map_params, x15), x05


# -- pseudo-pair generation -----------------------------------------------------


def gen_pairs(teacher: TeacherModel, x15s: list) -> list:
    """Algorithmic core of the teacher stage: pair every high-field image with
    its mapped low-field counterpart."""
    return [(teacher.apply(x), x.copy()) for x in x15s]


def write_pairs(out_dir, pairs: list, teacher_hash: str) -> dict:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"schema_version": 1, "kind": "pairs", "teacher_hash": teacher_hash,
                "x05": [], "x15": []}
    for i, (x05, x15) in enumerate(pairs):
        rel05, rel15 = f"pair_{i:04d}_x05.npy", f"pair_{i:04d}_x15.npy"
        save_array(os.path.join(out_dir, rel05), x05)
        save_array(os.path.join(out_dir, rel15), x15)
        manifest["x05"].append(rel05)
        manifest["x15"].append(rel15)
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    manifest["_dir"] = os.path.abspath(out_dir)
    return manifest


def load_pairs(path) -> dict:
    from .phantom import load_manifest

    manifest = load_manifest(path)
    if manifest.get("kind") != "pairs":
        raise ValueError(f"{path} is not a pairs manifest")
    return manifest
