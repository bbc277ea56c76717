import numpy as np
import pytest

from fedrbn.adversary import AttackConfig
from fedrbn.datagen import LabeledDataset
from fedrbn.detector import ConstantDetector
from fedrbn.errors import ArgumentError, DimensionError
from fedrbn.federation import (FederationConfig, UserState, aggregate,
                               clean_and_robust_accuracy, count_flops,
                               load_checkpoint, load_params, local_train_round,
                               model_flops, restore_best_models,
                               run_federated_training, save_checkpoint,
                               trainable_snapshot)
from fedrbn.nn import build_mlp, clone_model


def make_dataset(rng, n, dim=4, classes=3):
    x = rng.uniform(0.0, 1.0, size=(n, dim))
    # labels depend on the inputs so there is something to learn
    y = (x.sum(axis=1) * classes / dim).astype(np.int64) % classes
    return LabeledDataset(x=x, y=y)


def make_user(rng, uid=0, q=0.0, n_train=64, dim=4, classes=3, domain=0,
              hidden=(8,)):
    model = build_mlp(dim, list(hidden), classes, rng)
    return UserState(user_id=uid, domain_id=domain, q=q,
                     train=make_dataset(rng, n_train, dim, classes),
                     val=make_dataset(rng, 16, dim, classes),
                     test=make_dataset(rng, 16, dim, classes),
                     model=model, seed=7)


def fast_cfg(**kw):
    kw.setdefault("rounds", 2)
    kw.setdefault("batch_size", 8)
    kw.setdefault("attack", AttackConfig(steps=2))
    return FederationConfig(**kw)


class TestConfigAndState:
    def test_config_validation(self):
        with pytest.raises(ArgumentError):
            FederationConfig(rounds=-1)
        with pytest.raises(ArgumentError):
            FederationConfig(batch_size=1)
        with pytest.raises(ArgumentError):
            FederationConfig(lr=0.0)
        with pytest.raises(ArgumentError):
            FederationConfig(aggregation_mode="avg")
        with pytest.raises(ArgumentError):
            FederationConfig(local_epochs=0)

    def test_user_q_validation(self, rng):
        with pytest.raises(ArgumentError):
            make_user(rng, q=0.3)

    def test_user_rng_is_keyed(self, rng):
        u = make_user(rng, uid=5)
        a = u.rng(3).integers(0, 1000, 4)
        b = u.rng(3).integers(0, 1000, 4)
        c = u.rng(4).integers(0, 1000, 4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestFlops:
    def test_hand_counts(self):
        assert count_flops(("linear", 3, 5), 2) == 60
        assert count_flops(("dbn", 4), 2) == 48
        assert count_flops(("relu",), 2) == 0
        assert count_flops(("linear", 3, 5), 2, "backward") == 120

    def test_errors(self):
        with pytest.raises(ArgumentError):
            count_flops(("linear", 3, 5), 0)
        with pytest.raises(ArgumentError):
            count_flops(("conv", 3), 1)
        with pytest.raises(ArgumentError):
            count_flops(("linear", 3, 5), 1, "sideways")

    def test_model_flops_sums_layers(self, rng):
        m = build_mlp(4, [8], 3, rng)
        expect = 2 * 2 * 4 * 8 + 6 * 2 * 8 + 0 + 2 * 2 * 8 * 3
        assert model_flops(m, 2) == expect


class TestLocalTraining:
    def test_loss_decreases(self, rng):
        u = make_user(rng, n_train=128)
        cfg = fast_cfg(rounds=1, lr=0.1)
        _, first = local_train_round(u, None, cfg, 0)
        for r in range(1, 15):
            _, last = local_train_round(u, None, cfg, r)
        assert last < first

    def test_st_flops_hand_count(self, rng):
        u = make_user(rng, n_train=32)
        cfg = fast_cfg(batch_size=8)
        local_train_round(u, None, cfg, 0)
        # 4 batches of 8, each one forward + backward pass (3x forward cost)
        assert u.train_flops == 4 * 3 * model_flops(u.model, 8)

    def test_at_flops_include_attack_and_adv_pass(self, rng):
        u = make_user(rng, q=0.5, n_train=16)
        cfg = fast_cfg(batch_size=8, attack=AttackConfig(steps=3))
        local_train_round(u, None, cfg, 0)
        per_batch = 3 * model_flops(u.model, 8) * (2 + 3)
        assert u.train_flops == 2 * per_batch

    def test_st_user_never_touches_noise_stats(self, rng):
        u = make_user(rng, q=0.0)
        before = {k: (st.noise_mean.copy(), st.noise_var.copy())
                  for k, st in u.model.dbn_states.items()}
        local_train_round(u, None, fast_cfg(), 0)
        for k, st in u.model.dbn_states.items():
            assert np.array_equal(st.noise_mean, before[k][0])
            assert np.array_equal(st.noise_var, before[k][1])

    def test_at_user_updates_noise_stats(self, rng):
        u = make_user(rng, q=0.5)
        before = {k: st.noise_mean.copy()
                  for k, st in u.model.dbn_states.items()}
        local_train_round(u, None, fast_cfg(), 0)
        changed = any(not np.array_equal(st.noise_mean, before[k])
                      for k, st in u.model.dbn_states.items())
        assert changed

    def test_at_without_dbn_routes_adv_to_clean_path(self, rng):
        u = make_user(rng, q=0.5)
        local_train_round(u, None, fast_cfg(use_dbn=False), 0)
        for st in u.model.dbn_states.values():
            assert np.array_equal(st.noise_mean, np.zeros(st.channels))

    def test_deterministic_per_seed(self, rng):
        u1 = make_user(rng, n_train=32)
        u2 = UserState(user_id=u1.user_id, domain_id=0, q=0.0,
                       train=u1.train, val=u1.val, test=u1.test,
                       model=clone_model(u1.model), seed=u1.seed)
        cfg = fast_cfg()
        _, l1 = local_train_round(u1, None, cfg, 0)
        _, l2 = local_train_round(u2, None, cfg, 0)
        assert l1 == l2
        for k in u1.model.params:
            assert np.array_equal(u1.model.params[k], u2.model.params[k])

    def test_iters_per_round_caps_batches(self, rng):
        u = make_user(rng, n_train=64)
        cfg = fast_cfg(batch_size=8, iters_per_round=3)
        local_train_round(u, None, cfg, 0)
        assert u.train_flops == 3 * 3 * model_flops(u.model, 8)

    def test_model_left_in_eval_clean_mode(self, rng):
        u = make_user(rng, q=0.5)
        local_train_round(u, None, fast_cfg(), 0)
        assert not u.model.training and u.model.bn_mode == 0


class TestAggregation:
    def test_size_weighted_hand_example(self, rng):
        u1 = make_user(rng, uid=0, n_train=32)
        u2 = make_user(rng, uid=1, n_train=96)
        out = aggregate([u1, u2], "fedbn")
        for k in u1.model.params:
            expect = 0.25 * u1.model.params[k] + 0.75 * u2.model.params[k]
            assert np.allclose(out[k], expect, atol=1e-15)

    def test_fedbn_excludes_all_dbn_state(self, rng):
        out = aggregate([make_user(rng, uid=0), make_user(rng, uid=1)], "fedbn")
        assert not any(".clean_" in k or ".noise_" in k or k.endswith(".w")
                       or ".weight" in k for k in out)

    def test_fedavg_includes_dbn_state(self, rng):
        users = [make_user(rng, uid=0), make_user(rng, uid=1)]
        users[0].model.dbn_states["dbn1"].noise_mean[:] = 2.0
        users[1].model.dbn_states["dbn1"].noise_mean[:] = 4.0
        out = aggregate(users, "fedavg")
        assert np.allclose(out["dbn1.noise_mean"], 3.0, atol=1e-15)

    def test_load_params_fedbn_keeps_local_bn(self, rng):
        u = make_user(rng)
        st = u.model.dbn_states["dbn1"]
        st.clean_mean[:] = 5.0
        gp = aggregate([u, make_user(rng, uid=1)], "fedbn")
        load_params(u.model, gp, "fedbn")
        assert np.all(st.clean_mean == 5.0)

    def test_errors(self, rng):
        with pytest.raises(ArgumentError):
            aggregate([], "fedbn")
        u1 = make_user(rng, uid=0, hidden=(8,))
        u2 = make_user(rng, uid=1, hidden=(6,))
        with pytest.raises(DimensionError):
            aggregate([u1, u2], "fedbn")

    def test_snapshot_includes_dbn_affine(self, rng):
        snap = trainable_snapshot(make_user(rng).model)
        assert "dbn1.w" in snap and "dbn1.b" in snap and "lin0.W" in snap


class TestTrainingLoop:
    def make_fleet(self, rng, n=3):
        users = [make_user(rng, uid=i, q=0.5 if i == 0 else 0.0, n_train=32)
                 for i in range(n)]
        return users

    def test_history_shape_and_columns(self, rng):
        users = self.make_fleet(rng)
        users, hist = run_federated_training(users, fast_cfg(rounds=2))
        assert len(hist) == 2 * 3
        row = hist[0]
        assert set(row) == {"round", "user_id", "domain_id", "group", "loss",
                            "SA", "RA", "flops"}
        assert {r["group"] for r in hist} == {"AT", "ST"}

    def test_worker_count_does_not_change_results(self, rng):
        seed_users = self.make_fleet(rng)
        clones = [UserState(user_id=u.user_id, domain_id=u.domain_id, q=u.q,
                            train=u.train, val=u.val, test=u.test,
                            model=clone_model(u.model), seed=u.seed)
                  for u in seed_users]
        cfg = fast_cfg(rounds=2)
        _, h1 = run_federated_training(seed_users, cfg, workers=1)
        _, h2 = run_federated_training(clones, cfg, workers=3)
        assert h1 == h2

    def test_models_converge_under_fedavg(self, rng):
        users = self.make_fleet(rng)
        users, _ = run_federated_training(
            users, fast_cfg(rounds=1, aggregation_mode="fedavg"))
        ref = users[0].model
        for u in users[1:]:
            for k in ref.params:
                assert np.array_equal(u.model.params[k], ref.params[k])
            for name, st in ref.dbn_states.items():
                assert np.array_equal(u.model.dbn_states[name].clean_mean,
                                      st.clean_mean)

    def test_best_model_tracking_and_restore(self, rng):
        users = self.make_fleet(rng)
        users, hist = run_federated_training(users, fast_cfg(rounds=3),
                                             select_best=True)
        for u in users:
            assert u.best_model is not None
            best = max(r["RA" if u.q > 0 else "SA"] for r in hist
                       if r["user_id"] == u.user_id)
            assert u.best_metric == best
        restore_best_models(users)
        assert all(u.best_model is None for u in users)

    def test_zero_rounds(self, rng):
        users, hist = run_federated_training(self.make_fleet(rng),
                                             fast_cfg(rounds=0))
        assert hist == []

    def test_sa_ra_sane(self, rng):
        u = make_user(rng)
        sa, ra = clean_and_robust_accuracy(u.model, u.test.x, u.test.y,
                                           AttackConfig(steps=2))
        assert 0.0 <= sa <= 1.0 and 0.0 <= ra <= 1.0


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        users = [make_user(rng, uid=i, q=0.5 if i == 0 else 0.0)
                 for i in range(2)]
        users[0].detector = ConstantDetector(label=1)
        gp = aggregate(users, "fedbn")
        p = tmp_path / "ck.bin"
        save_checkpoint(p, 7, gp, users)
        back = load_checkpoint(p)
        assert back["round"] == 7
        for k, v in gp.items():
            assert np.array_equal(back["global_params"][k], v)
        rec = back["users"][0]
        assert rec["q"] == 0.5 and rec["domain_id"] == 0
        snap = trainable_snapshot(users[0].model)
        for k, v in snap.items():
            assert np.array_equal(rec["params"][k], v)
        assert rec["detector"].label == 1
        assert back["users"][1]["detector"] is None
        stats = rec["stats"]
        from fedrbn.dual_bn import export_stats
        for (c1, n1), (c2, n2) in zip(export_stats(users[0].model), stats):
            assert np.array_equal(c1[0], c2[0])
            assert np.array_equal(n1[1], n2[1])

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"XXXXXXXXXX")
        with pytest.raises(ArgumentError):
            load_checkpoint(p)
