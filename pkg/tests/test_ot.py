import itertools

import numpy as np
import pytest

from fieldlift.arrays import SeededRng
from fieldlift.phantom import DegradationParams, PhantomSpec, degrade, make_theorem_instance, reference_image
from fieldlift import nn, ot


def brute_force_assignment(cost):
    """Permutation-enumeration oracle; lexicographically first optimum."""
    n = len(cost)
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = float(cost[np.arange(n), list(perm)].sum())
        if c < best_cost:
            best_cost, best_perm = c, perm
    return np.array(best_perm), best_cost


def enumerate_value_maps(beta, alpha):
    """Independent oracle: count value-consistent index maps pushing beta onto alpha."""
    n = len(beta)
    keys = [np.asarray(b).tobytes() for b in beta]
    valid = 0
    for targets in itertools.product(range(n), repeat=n):
        by_value = {}
        ok = True
        for j, k in enumerate(keys):
            if by_value.setdefault(k, targets[j]) != targets[j]:
                ok = False
                break
        if ok and sorted(targets) == list(range(n)):
            valid += 1
    return valid


class TestExactMonge:
    def test_identity_on_matching_atoms(self):
        assign, cost = ot.exact_monge(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
        assert list(assign) == [0, 1]
        assert cost == 0.0

    def test_matches_brute_force_on_random_3x3(self):
        rng = SeededRng(0)
        for _ in range(30):
            c = rng.uniform((3, 3))
            assign, cost = ot.exact_monge(np.zeros((3, 1)), np.zeros((3, 1)), cost=c)
            oracle_assign, oracle_cost = brute_force_assignment(c)
            assert cost == oracle_cost
            assert list(assign) == list(oracle_assign)

    def test_matches_brute_force_up_to_n8(self):
        rng = SeededRng(1)
        for trial in range(25):
            n = int(rng.integers(2, 9))
            a = rng.normal((n, 3))
            b = rng.normal((n, 3))
            assign, cost = ot.exact_monge(a, b)
            c = np.linalg.norm(b[None, :, :] - a[:, None, :], axis=2)
            _, oracle_cost = brute_force_assignment(c)
            assert abs(cost - oracle_cost) <= 1e-9 * max(1.0, abs(oracle_cost))

    def test_recovers_true_map_on_theorem_instances(self):
        rng = SeededRng(2)
        for k in range(30):
            inst = make_theorem_instance(3 + k % 6, with_duplicates=bool(k % 3 == 0), rng=rng.derive(k))
            assign, _ = ot.exact_monge(inst.alpha, inst.beta, cost=inst.cost)
            assert list(assign) == list(inst.f_table)

    def test_lexicographic_tiebreak_on_duplicate_columns(self):
        # two identical beta atoms: both assignments are optimal, the smaller
        # column must go to the smaller row
        alpha = np.array([[0.0], [1.0]])
        beta = np.array([[0.5], [0.5]])
        assign, _ = ot.exact_monge(alpha, beta)
        assert list(assign) == [0, 1]

    def test_unequal_counts_rejected(self):
        with pytest.raises(ValueError):
            ot.exact_monge(np.zeros((2, 1)), np.zeros((3, 1)))


class TestPushforwardExists:
    def test_duplicate_beta_no_map_n3(self):
        alpha = np.array([[0.0], [1.0], [2.0]])
        beta = np.array([[0.5], [0.5], [2.5]])
        res = ot.pushforward_exists(beta, alpha)
        assert not res.exists and res.witness is None
        assert res.enumerated == 27 and res.valid_count == 0
        assert enumerate_value_maps(beta, alpha) == 0

    def test_distinct_beta_has_bijection_witness(self):
        alpha = np.array([[0.0], [1.0], [2.0]])
        beta = np.array([[0.1], [1.1], [2.1]])
        res = ot.pushforward_exists(beta, alpha)
        assert res.exists
        assert sorted(res.witness) == [0, 1, 2]
        assert res.valid_count == enumerate_value_maps(beta, alpha) > 0

    def test_single_atom_pair(self):
        res = ot.pushforward_exists(np.array([[3.0]]), np.array([[1.0]]))
        assert res.exists

    def test_alpha_duplicates_rejected(self):
        with pytest.raises(ValueError):
            ot.pushforward_exists(np.array([[1.0], [2.0]]), np.array([[0.0], [0.0]]))

    def test_enumeration_bound(self):
        a = np.arange(7, dtype=float).reshape(7, 1)
        with pytest.raises(ValueError):
            ot.pushforward_exists(a, a, enumerate_all=True)

    def test_matches_enumeration_oracle_on_random_instances(self):
        rng = SeededRng(3)
        for k in range(20):
            n = int(rng.integers(2, 5))
            dup = bool(k % 2)
            inst = make_theorem_instance(n, with_duplicates=dup, rng=rng.derive(k))
            res = ot.pushforward_exists(inst.beta, inst.alpha)
            assert res.exists == (not dup)
            assert (res.valid_count > 0) == (enumerate_value_maps(inst.beta, inst.alpha) > 0)


class TestDualGap:
    def test_equal_multisets_gap_near_zero(self):
        rng = SeededRng(4)
        atoms = [rng.normal(4) for _ in range(6)]
        shuffled = [atoms[i] for i in [3, 1, 5, 0, 2, 4]]
        gap, _, _ = ot.kantorovich_dual_gap(atoms, shuffled, steps=50, seed=0)
        assert abs(gap) <= 1e-3

    def test_beats_fixed_lipschitz_test_function(self):
        rng = SeededRng(5)
        mapped = [np.array([1.0, 1.0]) + 0.02 * rng.normal(2) for _ in range(16)]
        target = [np.array([0.0, 0.0]) + 0.02 * rng.normal(2) for _ in range(16)]
        x0 = target[0]
        fixed_bound = float(
            np.mean([np.linalg.norm(u - x0) for u in mapped])
            - np.mean([np.linalg.norm(v - x0) for v in target])
        )
        gap, _, _ = ot.kantorovich_dual_gap(mapped, target, steps=500, seed=1, lr=5e-3)
        assert gap >= fixed_bound * 0.9
        # 1-Lipschitz critic cannot exceed W1 by more than the SN slack
        w1_upper = float(np.mean([np.linalg.norm(u - v) for u, v in zip(mapped, target)]))
        assert gap <= 1.1 * w1_upper

    def test_antisymmetry_under_swap(self):
        rng = SeededRng(6)
        u = [rng.normal(3) for _ in range(5)]
        v = [rng.normal(3) for _ in range(5)]
        gap, net, params = ot.kantorovich_dual_gap(u, v, steps=40, seed=2)
        assert ot.dual_objective(u, v, net, params) == pytest.approx(gap)
        assert ot.dual_objective(v, u, net, params) == pytest.approx(-gap)


def tiny_image_sets(n=6, hw=32, seed=7):
    spec = PhantomSpec(size=hw, seed=seed)
    params = DegradationParams()
    x15s = [reference_image(spec, i) for i in range(n)]
    x05s = [degrade(x15s[i], params, SeededRng(seed, (3, i))) for i in np.random.default_rng(0).permutation(n)]
    return x15s, x05s


class TestTeacherTraining:
    def test_cost_term_alone_keeps_identity(self):
        # dual term disabled (0 critic influence via lambda >> and zero critic steps):
        # minimizing the transport cost alone keeps T at the identity
        x15s, x05s = tiny_image_sets()
        cfg = ot.TeacherConfig(epochs=1, critic_steps=0, lambda_cost=10.0, seed=0,
                               map_channels=8, map_depth=2, critic_channels=4, critic_downs=2)
        model, _ = ot.train_teacher(x15s, x05s, cfg)
        x = x15s[0]
        assert np.linalg.norm(model.apply(x) - x) / np.linalg.norm(x) < 0.02

    def test_determinism_and_loss_log(self):
        x15s, x05s = tiny_image_sets()
        cfg = ot.TeacherConfig(epochs=2, seed=3, map_channels=8, map_depth=2,
                               critic_channels=4, critic_downs=2)
        m1, log1 = ot.train_teacher(x15s, x05s, cfg)
        m2, log2 = ot.train_teacher(x15s, x05s, cfg)
        assert log1 == log2
        assert all(m1.map_params[k].tobytes() == m2.map_params[k].tobytes() for k in m1.map_params)

    def test_resume_reproduces_trajectory(self, tmp_path):
        x15s, x05s = tiny_image_sets()
        cfg = ot.TeacherConfig(epochs=3, seed=4, map_channels=8, map_depth=2,
                               critic_channels=4, critic_downs=2)
        full, full_log = ot.train_teacher(x15s, x05s, cfg, ckpt_dir=tmp_path / "full",
                                          log_path=tmp_path / "full.csv")

        short_cfg = ot.TeacherConfig(**{**cfg.__dict__, "epochs": 2})
        ot.train_teacher(x15s, x05s, short_cfg, ckpt_dir=tmp_path / "part",
                         log_path=tmp_path / "part.csv")
        resumed, resumed_log = ot.train_teacher(x15s, x05s, cfg, ckpt_dir=tmp_path / "part",
                                                log_path=tmp_path / "part.csv", resume=True)
        assert resumed_log == full_log
        assert all(
            full.map_params[k].tobytes() == resumed.map_params[k].tobytes()
            for k in full.map_params
        )

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            ot.train_teacher([], [], ot.TeacherConfig())


class TestGenPairs:
    def test_identity_teacher_produces_x_x(self):
        x15s, _ = tiny_image_sets(n=3)
        teacher = ot.TeacherModel.identity(32)
        pairs = ot.gen_pairs(teacher, x15s)
        assert len(pairs) == 3
        for (x05, x15), src in zip(pairs, x15s):
            assert np.array_equal(x05, src)
            assert np.array_equal(x15, src)

    def test_roundtrip_manifest(self, tmp_path):
        x15s, _ = tiny_image_sets(n=4)
        teacher = ot.TeacherModel.identity(32)
        pairs = ot.gen_pairs(teacher, x15s)
        manifest = ot.write_pairs(tmp_path / "pairs", pairs, teacher.checkpoint_hash())
        loaded = ot.load_pairs(tmp_path / "pairs")
        assert loaded["teacher_hash"] == teacher.checkpoint_hash()
        assert len(loaded["x05"]) == 4

    def test_regeneration_identical(self):
        x15s, x05s = tiny_image_sets(n=3)
        cfg = ot.TeacherConfig(epochs=1, seed=5, map_channels=8, map_depth=2,
                               critic_channels=4, critic_downs=2)
        model, _ = ot.train_teacher(x15s, x05s, cfg)
        p1 = ot.gen_pairs(model, x15s)
        p2 = ot.gen_pairs(model, x15s)
        assert all(np.array_equal(a[0], b[0]) for a, b in zip(p1, p2))


class TestTeacherSaveLoad:
    def test_save_load_roundtrip(self, tmp_path):
        x15s, x05s = tiny_image_sets(n=3)
        cfg = ot.TeacherConfig(epochs=1, seed=6, map_channels=8, map_depth=2,
                               critic_channels=4, critic_downs=2)
        model, _ = ot.train_teacher(x15s, x05s, cfg)
        model.save(tmp_path / "teacher")
        loaded = ot.TeacherModel.load(tmp_path / "teacher")
        assert loaded.checkpoint_hash() == model.checkpoint_hash()
        x = x15s[0]
        assert np.array_equal(loaded.apply(x), model.apply(x))
