"""Command-line pipeline: seeded, resumable stages over one run directory.

Subcommands: gen-data, train-teacher, gen-pairs, train-student, reconstruct,
sample-prior, verify-theorem, eval, report. Exit codes: 0 success, 2 config
error, 3 missing prerequisite (or held lock), 4 numerical failure,
5 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import itertools
import json
import os
import sys

import numpy as np

from .arrays import SeededRng, load_array, save_array, write_pgm
from .config import load_config, snapshot_config, validate_config
from .errors import ConfigError, MissingPrerequisiteError, NumericalError, VerificationError
from . import metrics, mri, ot, phantom, sampler, score

STAGE_ACQ = 11  # rng namespace for simulated acquisitions


def _dataset_dir(cfg):
    return os.path.join(cfg["out"], "dataset")


def _require(path, what):
    if not os.path.exists(path):
        raise MissingPrerequisiteError(f"{what} not found at {path}; run the earlier stage first")
    return path


@contextlib.contextmanager
def run_lock(run_dir):
    os.makedirs(run_dir, exist_ok=True)
    lock = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise MissingPrerequisiteError(
            f"run directory is locked by another stage ({lock}); remove the stale lock if none is running"
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(lock)


def _phantom_spec(cfg):
    p = cfg["phantom"]
    return phantom.PhantomSpec(
        size=p["size"],
        n_ellipses=tuple(p["n_ellipses"]),
        class_intensities=tuple(p["class_intensities"]),
        noise_std=p["noise_std"],
        seed=cfg["seed"],
    )


def _degradation(cfg):
    d = cfg["phantom"]["degradation"]
    return phantom.DegradationParams(
        remap=tuple(tuple(pt) for pt in d["remap"]),
        blur_std=d["blur_std"],
        noise_std=d["noise_std"],
    )


def cmd_gen_data(cfg, args):
    spec = _phantom_spec(cfg)
    params = _degradation(cfg)
    manifest = phantom.build_dataset(
        spec, params, cfg["phantom"]["n_train"], cfg["phantom"]["n_test"], _dataset_dir(cfg)
    )
    print(f"dataset: {manifest['n_train']} train + {manifest['n_test']} test pairs -> {_dataset_dir(cfg)}")
    return 0


def cmd_train_teacher(cfg, args):
    manifest = phantom.load_manifest(_require(_dataset_dir(cfg), "dataset manifest"))
    x15s = phantom.load_split(manifest, "train_x15")
    x05s = phantom.load_split(manifest, "train_x05")
    t = cfg["teacher"]
    tcfg = ot.TeacherConfig(
        epochs=t["epochs"], lr=t["lr"], lr_decay=t["lr_decay"], beta1=t["beta1"],
        beta2=t["beta2"], critic_steps=t["critic_steps"], lambda_cost=t["lambda_cost"],
        map_channels=t["map_channels"], map_depth=t["map_depth"],
        critic_channels=t["critic_channels"], critic_downs=t["critic_downs"],
        dual_form=t["dual_form"], seed=cfg["seed"],
    )
    base = os.path.join(cfg["out"], "teacher")
    os.makedirs(base, exist_ok=True)
    model, log = ot.train_teacher(
        x15s, x05s, tcfg,
        ckpt_dir=os.path.join(base, "checkpoints"),
        resume=bool(getattr(args, "resume", False)),
        log_path=os.path.join(base, "loss.csv"),
    )
    model.save(os.path.join(base, "final"))
    print(f"teacher: {len(log)} map steps, checkpoint -> {os.path.join(base, 'final')}")
    return 0


def cmd_gen_pairs(cfg, args):
    teacher = ot.TeacherModel.load(_require(os.path.join(cfg["out"], "teacher", "final"),
                                            "teacher checkpoint"))
    manifest = phantom.load_manifest(_require(_dataset_dir(cfg), "dataset manifest"))
    x15s = phantom.load_split(manifest, "train_x15")
    pairs = ot.gen_pairs(teacher, x15s)
    out = os.path.join(cfg["out"], "pairs")
    ot.write_pairs(out, pairs, teacher.checkpoint_hash())
    print(f"pairs: {len(pairs)} pseudo-pairs -> {out}")
    return 0


def _student_dir(cfg, mode):
    return os.path.join(cfg["out"], "student_joint" if mode == "joint" else "student_reference")


def cmd_train_student(cfg, args):
    s = cfg["student"]
    mode = s["mode"]
    if mode == "joint":
        pairs = ot.load_pairs(_require(os.path.join(cfg["out"], "pairs"), "pairs manifest"))
        base_dir = pairs["_dir"]
        samples = [
            np.stack([load_array(os.path.join(base_dir, a)), load_array(os.path.join(base_dir, b))])
            for a, b in zip(pairs["x05"], pairs["x15"])
        ]
        seed = cfg["seed"]
    else:
        manifest = phantom.load_manifest(_require(_dataset_dir(cfg), "dataset manifest"))
        samples = [x[None] for x in phantom.load_split(manifest, "train_x15")]
        seed = cfg["seed"] + 1
    sched = score.make_schedule(s["schedule"]["eps1"], s["schedule"]["epsL"], s["schedule"]["levels"])
    scfg = score.StudentConfig(
        epochs=s["epochs"], lr=s["lr"], beta1=s["beta1"], beta2=s["beta2"],
        ema_decay=s["ema_decay"], channels=s["channels"], depth=s["depth"],
        loss_form=s["loss_form"], seed=seed,
    )
    base = _student_dir(cfg, mode)
    os.makedirs(base, exist_ok=True)
    model, log = score.train_student(
        samples, sched, scfg,
        ckpt_dir=os.path.join(base, "checkpoints"),
        resume=bool(getattr(args, "resume", False)),
        log_path=os.path.join(base, "loss.csv"),
    )
    model.save(os.path.join(base, "final"))
    print(f"student[{mode}]: {len(log)} steps, checkpoint -> {os.path.join(base, 'final')}")
    return 0


def _method_label(method):
    return {"meta": "meta", "score-mri-baseline": "baseline", "zero-filled": "zf"}[method]


def _acquire(cfg, x05, index):
    m = cfg["mri"]
    h, w = x05.shape
    sense = mri.make_sense(h, w, m["coils"], seed=cfg["seed"])
    mask = mri.make_mask(h, w, m["accel"], m["acs"], seed=cfg["seed"])
    rng = SeededRng(cfg["seed"], (STAGE_ACQ, index))
    y = mri.simulate_acquisition(x05, sense, mask, m["noise_std"], rng)
    return y, sense


def _sampler_cfg(cfg, gamma, index):
    s = cfg["sampler"]
    return sampler.SamplerConfig(
        step=s["step"], inner_steps=s["inner_steps"],
        gamma=(s["gamma"] if s["gamma"] is not None else gamma),
        init=s["init"], final_denoise=s["final_denoise"], gamma_f=s["gamma_f"],
        seed=cfg["seed"] * 1000003 + index,
    )


def _reconstruct_one(cfg, method, y, sense, index):
    if method == "zero-filled":
        x15 = sampler.zero_filled(y, sense)
        return sampler.ReconResult(x05=None, x15=x15, diagnostics=[
            {"level": 0, "sigma": 0.0, "eta": 0.0, "score_norm": 0.0,
             "denominator": float("nan"), "dc_residual": float("nan")}
        ], config=_sampler_cfg(cfg, y.noise_std, index))
    if method == "meta":
        model = score.StudentModel.load(
            _require(os.path.join(_student_dir(cfg, "joint"), "final"), "joint student checkpoint")
        )
        return sampler.langevin_recon(
            y, sense, model.schedule, sampler.student_score_source(model),
            _sampler_cfg(cfg, y.noise_std, index),
        )
    model = score.StudentModel.load(
        _require(os.path.join(_student_dir(cfg, "reference-only"), "final"),
                 "reference student checkpoint")
    )
    return sampler.score_mri_baseline(
        y, sense, model.schedule, sampler.student_score_source(model),
        _sampler_cfg(cfg, y.noise_std, index),
    )


def cmd_reconstruct(cfg, args):
    method = getattr(args, "method", None) or cfg["sampler"]["method"]
    if method not in ("meta", "score-mri-baseline", "zero-filled"):
        raise ConfigError(f"unknown reconstruction method {method!r}")
    label = _method_label(method)
    accel = cfg["mri"]["accel"]
    out = os.path.join(cfg["out"], "recon", f"R{accel:g}", label)
    os.makedirs(out, exist_ok=True)

    input_path = getattr(args, "input", None)
    if input_path:
        if input_path.endswith(".npy"):
            x05 = load_array(input_path, expect="real")
            y, sense = _acquire(cfg, x05, 0)
        else:
            y = mri.load_kspace(input_path)
            h, w = y.mask.shape
            sense = mri.make_sense(h, w, y.data.shape[0], seed=cfg["seed"])
        res = _reconstruct_one(cfg, method, y, sense, 0)
        sampler.save_recon(out, res, tag="input_0000")
        print(f"reconstruct[{method}]: 1 input -> {out}")
        return 0

    manifest = phantom.load_manifest(_require(_dataset_dir(cfg), "dataset manifest"))
    x05s = phantom.load_split(manifest, "test_x05")
    acq_dir = os.path.join(cfg["out"], "acquisitions", f"R{accel:g}")
    os.makedirs(acq_dir, exist_ok=True)
    for i, x05 in enumerate(x05s):
        y, sense = _acquire(cfg, x05, i)
        mri.save_kspace(os.path.join(acq_dir, f"test_{i:04d}"), y)
        res = _reconstruct_one(cfg, method, y, sense, i)
        sampler.save_recon(out, res, tag=f"test_{i:04d}")
    print(f"reconstruct[{method}]: {len(x05s)} test images -> {out}")
    return 0


def cmd_sample_prior(cfg, args):
    count = getattr(args, "count", 1) or 1
    model = score.StudentModel.load(
        _require(os.path.join(_student_dir(cfg, "joint"), "final"), "joint student checkpoint")
    )
    hw = model.net.in_shape[-1]
    out = os.path.join(cfg["out"], "prior_samples")
    os.makedirs(out, exist_ok=True)
    scfg = _sampler_cfg(cfg, 0.0, 0)
    samples, _ = sampler.prior_sample(
        sampler.student_score_source(model), model.schedule, scfg,
        (model.channels, hw, hw), chains=count,
    )
    samples = samples if count > 1 else samples[None]
    for i, s in enumerate(samples):
        for c, tag in enumerate(("x05", "x15")[: model.channels]):
            save_array(os.path.join(out, f"sample_{i:04d}_{tag}.npy"), s[c])
            write_pgm(os.path.join(out, f"sample_{i:04d}_{tag}.pgm"), s[c])
    print(f"prior samples: {count} -> {out}")
    return 0


def _brute_force_cost(cost):
    n = len(cost)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        c = float(cost[np.arange(n), list(perm)].sum())
        if c < best:
            best = c
    return best


def cmd_verify_theorem(cfg, args):
    t = cfg["theorem"]
    rng = SeededRng(cfg["seed"], (ord("V"),))
    checks = []

    # part 1: duplicate-atom instances admit no value map onto the references
    failures = []
    witnesses = []
    for k in range(t["duplicate_instances"]):
        n = 3 + k % max(1, t["exhaustive_n"] - 2)
        inst = phantom.make_theorem_instance(n, with_duplicates=True, rng=rng.derive(1, k),
                                             dim=t["dim"])
        res = ot.pushforward_exists(inst.beta, inst.alpha, enumerate_all=True)
        if res.exists or res.valid_count != 0 or res.enumerated != n**n:
            failures.append({"instance": k, "n": n, "exists": res.exists,
                             "valid_count": res.valid_count})
    checks.append({"name": "no_pushforward_with_duplicates",
                   "instances": t["duplicate_instances"], "failures": failures})

    # existence holds (with witness) once the degraded atoms are distinct
    failures = []
    for k in range(10):
        n = 3 + k % max(1, t["exhaustive_n"] - 2)
        inst = phantom.make_theorem_instance(n, with_duplicates=False, rng=rng.derive(2, k),
                                             dim=t["dim"])
        res = ot.pushforward_exists(inst.beta, inst.alpha, enumerate_all=True)
        if not res.exists or res.witness is None:
            failures.append({"instance": k, "n": n})
        else:
            witnesses.append({"instance": k, "n": n, "witness": [int(j) for j in res.witness]})
    checks.append({"name": "pushforward_exists_when_distinct", "instances": 10,
                   "failures": failures, "witnesses": witnesses})

    # part 2: the transport solver recovers the generating map, at oracle cost
    failures = []
    for k in range(t["monge_instances"]):
        n = 2 + k % (t["monge_max_n"] - 1)
        inst = phantom.make_theorem_instance(n, with_duplicates=bool(k % 3 == 0),
                                             rng=rng.derive(3, k), dim=t["dim"])
        assign, cost = ot.exact_monge(inst.alpha, inst.beta, cost=inst.cost)
        oracle = _brute_force_cost(inst.cost)
        if list(assign) != list(inst.f_table) or cost != oracle:
            failures.append({"instance": k, "n": n, "assign": [int(a) for a in assign],
                             "expected": [int(a) for a in inst.f_table],
                             "cost": cost, "oracle": oracle})
    checks.append({"name": "monge_recovers_degradation_map",
                   "instances": t["monge_instances"], "failures": failures})

    ok = all(not c["failures"] for c in checks)
    report = {"pass": ok, "checks": checks, "config": t, "seed": cfg["seed"]}
    out = os.path.join(cfg["out"], "theorem")
    os.makedirs(out, exist_ok=True)
    tmp = os.path.join(out, "report.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out, "report.json"))
    lines = [f"theorem verification: {'PASS' if ok else 'FAIL'}"]
    for c in checks:
        lines.append(f"  {c['name']}: {c['instances'] - len(c['failures'])}/{c['instances']} ok")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    if not ok:
        raise VerificationError("theorem verification failed; see report.json")
    return 0


def _load_recon_set(cfg, method, accel, n):
    label = _method_label(method)
    base = _require(os.path.join(cfg["out"], "recon", f"R{accel:g}", label),
                    f"reconstructions for {method}")
    return [load_array(os.path.join(base, f"test_{i:04d}_x15.npy")) for i in range(n)]


def cmd_eval(cfg, args):
    manifest = phantom.load_manifest(_require(_dataset_dir(cfg), "dataset manifest"))
    refs = phantom.load_split(manifest, "test_x15")
    accel = cfg["mri"]["accel"]
    methods = cfg["eval"]["methods"]
    if not methods:
        raise ConfigError("eval.methods is empty")
    runs = []
    for method in methods:
        recs = _load_recon_set(cfg, method, accel, len(refs))
        runs.append({
            "method": method,
            "dataset": f"{cfg['eval']['dataset_tag']}-R{accel:g}",
            "pairs": list(zip(refs, recs)),
        })
    rows = metrics.assemble_report(runs)
    out = os.path.join(cfg["out"], "reports")
    os.makedirs(out, exist_ok=True)
    prefix = os.path.join(out, f"metrics_R{accel:g}")
    metrics.write_report(prefix, rows)
    for row in rows:
        print(f"{row.method:20s} {row.dataset}: NMSE {row.nmse_mean:.4f}+/-{row.nmse_std:.4f} "
              f"PSNR {row.psnr_mean:.2f}+/-{row.psnr_std:.2f} dB")
    return 0


def cmd_report(cfg, args):
    out = os.path.join(cfg["out"], "reports")
    _require(out, "reports directory")
    merged = []
    for name in sorted(os.listdir(out)):
        if name.startswith("metrics_") and name.endswith(".json"):
            with open(os.path.join(out, name)) as fh:
                merged.extend(json.load(fh))
    if not merged:
        raise MissingPrerequisiteError(f"no metrics_*.json found in {out}")
    rows = []
    for entry in merged:
        row = metrics.MetricRow(
            method=entry["method"], dataset=entry["dataset"], n=entry["n"],
            nmse_mean=entry["nmse_mean"], nmse_std=entry["nmse_std"],
            psnr_mean=entry["psnr_mean"], psnr_std=entry["psnr_std"],
        )
        row._per_image = entry.get("per_image")
        rows.append(row)
    for dataset in {r.dataset for r in rows}:
        group = [r for r in rows if r.dataset == dataset]
        min(group, key=lambda r: r.nmse_mean).best_nmse = True
        max(group, key=lambda r: r.psnr_mean).best_psnr = True
    metrics.write_report(os.path.join(out, "report"), rows)
    print(f"report: {len(rows)} rows -> {os.path.join(out, 'report.csv')}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "gen-pairs": cmd_gen_pairs,
    "train-student": cmd_train_student,
    "reconstruct": cmd_reconstruct,
    "sample-prior": cmd_sample_prior,
    "verify-theorem": cmd_verify_theorem,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fieldlift",
                                     description="low-field to high-field-like MRI pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config path (defaults apply if omitted)")
        p.add_argument("--out", help="run directory (overrides config)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--resume", action="store_true", help="resume from the last checkpoint")
        if name == "reconstruct":
            p.add_argument("--method", choices=["meta", "score-mri-baseline", "zero-filled"])
            p.add_argument("--input", help="k-space prefix or full-image .npy")
        if name == "sample-prior":
            p.add_argument("--count", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else validate_config({})
        if args.out:
            cfg["out"] = args.out
        if args.seed is not None:
            cfg["seed"] = args.seed
        with run_lock(cfg["out"]):
            snapshot_config(cfg, cfg["out"])
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingPrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
