"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria A1-A6 are oracle- and property-based and run in seconds to minutes.
A7-A8 drive the full desk-scale pipeline through the CLI into a shared run
directory; A9 repeats that pipeline from the identical config and demands
bit-identical outputs. Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import itertools
import json
import os
import time

import numpy as np
import pytest

from fieldlift.arrays import SeededRng, fft2, load_array
from fieldlift.cli import main
from fieldlift.metrics import nmse
from fieldlift import mri, nn, ot, phantom, sampler, score

CRITERION_RESULTS = []


def report(criterion, ok, detail):
    line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    CRITERION_RESULTS.append(line)
    print("\n" + line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# A1 operator correctness


def test_a1_operator_correctness():
    t0 = time.monotonic()
    rng = SeededRng(101)
    worst_adj = 0.0
    for trial in range(100):
        h = w = 16
        c = int(rng.integers(1, 5))
        sense = mri.make_sense(h, w, c, seed=trial)
        mask = mri.make_mask(h, w, r=float(rng.integers(1, 4)), acs=2, seed=trial)
        x = rng.normal((h, w))
        y = mri.KSpaceData(
            data=mask.mask[None] * (rng.normal((c, h, w)) + 1j * rng.normal((c, h, w))),
            mask=mask, noise_std=0.0,
        )
        lhs = np.real(np.vdot(y.data, mri.apply_A(x, sense, mask).data))
        rhs = float(np.sum(x * mri.apply_AH(y, sense)))
        worst_adj = max(worst_adj, abs(lhs - rhs) / abs(rhs))
    worst_fft = 0.0
    for _ in range(100):
        z = rng.normal((32, 32)) + 1j * rng.normal((32, 32))
        worst_fft = max(worst_fft, abs(np.linalg.norm(fft2(z)) - np.linalg.norm(z)) / np.linalg.norm(z))
    elapsed = time.monotonic() - t0
    report("A1", worst_adj < 1e-8 and worst_fft < 1e-6 and elapsed < 10.0,
           f"adjoint max rel {worst_adj:.2e}, FFT unitarity {worst_fft:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# A2 gradient integrity


def finite_difference(net, params, x, g, h=1e-5):
    def loss(p):
        return float(np.sum(g * nn.forward(net, p, x)))

    out = {}
    for name, p in params.items():
        grad = np.zeros_like(p)
        flat, gf = p.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss(params)
            flat[i] = orig - h
            down = loss(params)
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
        out[name] = grad
    return out


def test_a2_gradient_integrity():
    t0 = time.monotonic()
    worst = 0.0
    for act in ("elu", "lrelu", "identity"):
        net = nn.NetworkSpec(
            (2, 8, 8),
            (
                nn.LayerSpec("conv3x3", 2, 3),
                nn.LayerSpec("activation", activation=act),
                nn.LayerSpec("conv3x3", 3, 2, stride=2),
                nn.LayerSpec("activation", activation=act),
                nn.LayerSpec("dense", 2 * 4 * 4, 3),
            ),
        )
        rng = SeededRng(202 + hash(act) % 97)
        params = nn.init_params(net, rng)
        x = rng.normal((2, 8, 8))
        g = rng.normal(3)
        analytic, _ = nn.backward(net, params, x, g)
        fd = finite_difference(net, params, x, g)
        for name in analytic:
            err = np.abs(analytic[name] - fd[name]) / (np.abs(analytic[name]) + 1e-8)
            worst = max(worst, float(err.max()))
    elapsed = time.monotonic() - t0
    report("A2", worst < 1e-4 and elapsed < 30.0,
           f"max rel gradient error {worst:.2e} over all layer kinds, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# A3 / A4 theorem checks


def enumerate_value_maps(beta, alpha):
    n = len(beta)
    keys = [np.asarray(b).tobytes() for b in beta]
    valid = 0
    for targets in itertools.product(range(n), repeat=n):
        consistent = True
        chosen = {}
        for j, k in enumerate(keys):
            if chosen.setdefault(k, targets[j]) != targets[j]:
                consistent = False
                break
        if consistent and sorted(targets) == list(range(n)):
            valid += 1
    return valid


def test_a3_no_pushforward_with_duplicates():
    t0 = time.monotonic()
    rng = SeededRng(303)
    for k in range(50):
        n = 3 + k % 4  # N in 3..6
        inst = phantom.make_theorem_instance(n, with_duplicates=True, rng=rng.derive(k))
        res = ot.pushforward_exists(inst.beta, inst.alpha, enumerate_all=True)
        assert not res.exists and res.valid_count == 0, f"instance {k}"
        assert res.enumerated == n**n
        assert enumerate_value_maps(inst.beta, inst.alpha) == 0, f"oracle disagrees at {k}"
    elapsed = time.monotonic() - t0
    report("A3", elapsed < 60.0, f"50 duplicate-atom instances, zero witnesses, {elapsed:.1f}s")


def brute_force_assignment(cost):
    n = len(cost)
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = float(cost[np.arange(n), list(perm)].sum())
        if c < best_cost:
            best_cost, best_perm = c, perm
    return np.array(best_perm), best_cost


def test_a4_monge_recovers_degradation():
    t0 = time.monotonic()
    rng = SeededRng(404)
    for k in range(100):
        n = 2 + k % 7  # N in 2..8
        inst = phantom.make_theorem_instance(n, with_duplicates=bool(k % 3 == 0), rng=rng.derive(k))
        assign, cost = ot.exact_monge(inst.alpha, inst.beta, cost=inst.cost)
        oracle_assign, oracle_cost = brute_force_assignment(inst.cost)
        assert list(assign) == list(inst.f_table), f"instance {k}: map mismatch"
        assert cost == oracle_cost, f"instance {k}: cost {cost} != oracle {oracle_cost}"
    elapsed = time.monotonic() - t0
    report("A4", elapsed < 60.0, f"100 instances: assignment = true map, cost = oracle, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# A5 schedule fidelity


def test_a5_schedule_fidelity():
    sched = score.make_schedule(0.0066, 50.0, 266)
    levels = np.array(sched.levels)
    ratios = levels[1:] / levels[:-1]
    const = float(np.max(np.abs(ratios - sched.ratio)) / sched.ratio)
    ok = levels[0] == 0.0066 and levels[-1] == 50.0 and len(levels) == 266 and const <= 1e-9
    report("A5", ok, f"endpoints ({levels[0]}, {levels[-1]}), 266 levels, ratio constancy {const:.1e}")


# ---------------------------------------------------------------------------
# A6 sampler calibration (conjugate-Gaussian oracle)


def test_a6_sampler_calibration():
    t0 = time.monotonic()
    h = w = 8
    sense = mri.make_sense(h, w, 2, seed=5)
    mask = mri.make_mask(h, w, r=2, acs=2, seed=5)
    rng = SeededRng(42)
    sig_p, gamma = 1.0, 0.3
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    mu05 = 0.5 + 0.3 * np.sin(2 * np.pi * xx)
    mu15 = 0.5 + 0.3 * np.cos(2 * np.pi * yy)
    x_true = mu05 + sig_p * rng.normal((h, w))
    y = mri.simulate_acquisition(x_true, sense, mask, gamma, rng.derive(1))

    d = h * w
    m_op = np.zeros((d, d))
    for k in range(d):
        e = np.zeros((h, w))
        e.flat[k] = 1.0
        m_op[:, k] = mri.apply_AH(mri.apply_A(e, sense, mask), sense).ravel()
    cov = np.linalg.inv(np.eye(d) / sig_p**2 + m_op / gamma**2)
    m_post = cov @ (mu05.ravel() / sig_p**2 + mri.apply_AH(y, sense).ravel() / gamma**2)
    v_post = np.diag(cov)

    mix = score.GaussianMixture(weights=(1.0,), means=(np.stack([mu05, mu15]),), sigmas=(sig_p,))
    cfg = sampler.SamplerConfig(step=5.0, inner_steps=60, gamma=gamma, seed=7)
    res = sampler.langevin_recon(y, sense, score.make_schedule(0.03, 3.0, 32),
                                 sampler.mixture_score_source(mix), cfg, chains=800)
    mean_rel = float(np.linalg.norm(res.x05.mean(axis=0).ravel() - m_post) / np.linalg.norm(m_post))
    var_rel = float(np.mean(np.abs(res.x05.var(axis=0, ddof=1).ravel() - v_post) / v_post))
    elapsed = time.monotonic() - t0
    report("A6", mean_rel < 0.05 and var_rel < 0.15 and elapsed < 300.0,
           f"800 chains: posterior mean rel {mean_rel:.3f} (<5%), per-pixel var rel {var_rel:.3f} (<15%), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# A7-A9: the desk-scale pipeline, run twice through the CLI

ACCEPTANCE_CONFIG = {
    "seed": 0,
    "phantom": {"size": 64, "n_train": 200, "n_test": 20},
    "mri": {"coils": 4, "accel": 3.0, "acs": 8, "noise_std": 0.01},
    "teacher": {"epochs": 20, "lr_decay": 0.97, "lambda_cost": 0.05,
                "map_channels": 16, "map_depth": 4,
                "critic_channels": 16, "critic_downs": 3},
    "student": {"epochs": 25, "channels": 24, "depth": 4, "lr": 1e-3,
                "schedule": {"eps1": 0.01, "epsL": 10.0, "levels": 64}},
    "sampler": {"step": 15.0, "inner_steps": 10, "gamma_f": 0.1},
}

METHODS = ("zero-filled", "score-mri-baseline", "meta")


def run_pipeline(out_dir, cfg_dir):
    """Full pipeline via the CLI at both accelerations; returns stage timings."""
    cfg3 = dict(json.loads(json.dumps(ACCEPTANCE_CONFIG)))
    cfg1 = dict(json.loads(json.dumps(ACCEPTANCE_CONFIG)))
    cfg1["mri"] = {**cfg1["mri"], "accel": 1.0}
    ref = dict(json.loads(json.dumps(ACCEPTANCE_CONFIG)))
    ref["student"] = {**ref["student"], "mode": "reference-only"}
    paths = {}
    for name, cfg in (("r3", cfg3), ("r1", cfg1), ("ref", ref)):
        p = os.path.join(cfg_dir, f"{name}.json")
        with open(p, "w") as fh:
            json.dump(cfg, fh, sort_keys=True)
        paths[name] = p

    timings = {}

    def stage(tag, argv):
        t0 = time.monotonic()
        code = main(argv)
        timings[tag] = time.monotonic() - t0
        assert code == 0, f"stage {tag} failed with exit {code}"

    stage("gen-data", ["gen-data", "--config", paths["r3"], "--out", out_dir])
    stage("train-teacher", ["train-teacher", "--config", paths["r3"], "--out", out_dir])
    stage("gen-pairs", ["gen-pairs", "--config", paths["r3"], "--out", out_dir])
    stage("train-student", ["train-student", "--config", paths["r3"], "--out", out_dir])
    stage("train-student-ref", ["train-student", "--config", paths["ref"], "--out", out_dir])
    for accel, cfgname in (("3", "r3"), ("1", "r1")):
        for method in METHODS:
            stage(f"recon-{method}-R{accel}",
                  ["reconstruct", "--config", paths[cfgname], "--out", out_dir, "--method", method])
        stage(f"eval-R{accel}", ["eval", "--config", paths[cfgname], "--out", out_dir])
    stage("report", ["report", "--config", paths["r3"], "--out", out_dir])
    return timings


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    runs = {}
    for rep in ("run1", "run2"):
        out = str(base / rep)
        cfg_dir = str(base / f"{rep}_cfg")
        os.makedirs(cfg_dir, exist_ok=True)
        timings = run_pipeline(out, cfg_dir)
        runs[rep] = {"out": out, "timings": timings}
    return runs


def load_rows(out_dir):
    with open(os.path.join(out_dir, "reports", "report.json")) as fh:
        rows = json.load(fh)
    return {(r["method"], r["dataset"]): r for r in rows}


@pytest.mark.slow
def test_a7_teacher_efficacy(desk_runs):
    out = desk_runs["run1"]["out"]
    manifest = phantom.load_manifest(os.path.join(out, "dataset"))
    spec_cfg = manifest["degradation"]
    params = phantom.DegradationParams(
        remap=tuple(tuple(p) for p in spec_cfg["remap"]),
        blur_std=spec_cfg["blur_std"], noise_std=spec_cfg["noise_std"],
    )
    test_x = phantom.load_split(manifest, "test_x15")
    test_f = [phantom.degrade(x, params, None) for x in test_x]
    teacher = ot.TeacherModel.load(os.path.join(out, "teacher", "final"))

    id_nmse = float(np.mean([nmse(f, x) for x, f in zip(test_x, test_f)]))
    t_nmse = float(np.mean([nmse(f, teacher.apply(x)) for x, f in zip(test_x, test_f)]))

    x15s = phantom.load_split(manifest, "train_x15")[:100]
    x05s = phantom.load_split(manifest, "train_x05")[:100]
    gap_trained, _, _ = ot.kantorovich_dual_gap([teacher.apply(x) for x in x15s], x05s,
                                                steps=150, seed=3)
    gap_identity, _, _ = ot.kantorovich_dual_gap([x.copy() for x in x15s], x05s,
                                                 steps=150, seed=3)
    elapsed = desk_runs["run1"]["timings"]["train-teacher"]
    ok = (t_nmse < 0.5 * id_nmse) and (gap_trained < gap_identity) and elapsed < 1800
    report("A7", ok,
           f"NMSE ratio {t_nmse / id_nmse:.3f} (<0.5), dual gap {gap_trained:.3f} < {gap_identity:.3f}, "
           f"teacher stage {elapsed:.0f}s (<30min)")


@pytest.mark.slow
def test_a8_end_to_end_ordering(desk_runs):
    rows = load_rows(desk_runs["run1"]["out"])
    timings = desk_runs["run1"]["timings"]
    details = []
    ok = True
    for accel in ("1", "3"):
        tag = f"synthetic-R{accel}"
        meta = rows[("meta", tag)]
        base = rows[("score-mri-baseline", tag)]
        zf = rows[("zero-filled", tag)]
        nmse_order = meta["nmse_mean"] < base["nmse_mean"] < zf["nmse_mean"]
        psnr_order = meta["psnr_mean"] > base["psnr_mean"] > zf["psnr_mean"]
        gap1 = meta["psnr_mean"] - base["psnr_mean"]
        gap2 = base["psnr_mean"] - zf["psnr_mean"]
        ok = ok and nmse_order and psnr_order and gap1 >= 0.5 and gap2 >= 0.5
        details.append(
            f"R={accel}: NMSE {meta['nmse_mean']:.4f}<{base['nmse_mean']:.4f}<{zf['nmse_mean']:.4f}, "
            f"PSNR {meta['psnr_mean']:.2f}>{base['psnr_mean']:.2f}>{zf['psnr_mean']:.2f} "
            f"(gaps {gap1:.2f}/{gap2:.2f} dB)"
        )
    total = sum(timings.values())
    ok = ok and total < 7200
    report("A8", ok, "; ".join(details) + f"; pipeline {total:.0f}s (<2h)")


@pytest.mark.slow
def test_a9_determinism(desk_runs):
    a, b = desk_runs["run1"]["out"], desk_runs["run2"]["out"]
    mismatches = []
    for rel in ("reports/report.csv", "reports/metrics_R3.csv", "reports/metrics_R1.csv"):
        if open(os.path.join(a, rel), "rb").read() != open(os.path.join(b, rel), "rb").read():
            mismatches.append(rel)
    for accel in ("R1", "R3"):
        for method_dir in ("meta", "baseline", "zf"):
            d1 = os.path.join(a, "recon", accel, method_dir)
            for name in sorted(os.listdir(d1)):
                if name.endswith(".npy"):
                    x1 = load_array(os.path.join(d1, name))
                    x2 = load_array(os.path.join(b, "recon", accel, method_dir, name))
                    if x1.tobytes() != x2.tobytes():
                        mismatches.append(f"recon/{accel}/{method_dir}/{name}")
    report("A9", not mismatches,
           "bit-identical reports and reconstructions across repeated runs"
           if not mismatches else f"mismatches: {mismatches[:5]}")


def test_zz_summary():
    print("\n" + "=" * 72)
    for line in CRITERION_RESULTS:
        print(line)
    print("=" * 72)
