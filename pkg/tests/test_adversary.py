import numpy as np
import pytest

from conftest import randomized_model
from fedrbn.adversary import AttackConfig, pgd_attack
from fedrbn.errors import ArgumentError, ContractError
from fedrbn.nn import forward, loss_and_grad, one_hot


def attack(**kw):
    return AttackConfig(**kw)


class TestConfig:
    def test_defaults(self):
        cfg = AttackConfig()
        assert cfg.epsilon == pytest.approx(8.0 / 255.0)
        assert cfg.steps == 7
        assert cfg.step_size == pytest.approx(2.0 / 255.0)
        assert cfg.random_start is False
        assert cfg.box == (0.0, 1.0)

    def test_validation(self):
        with pytest.raises(ArgumentError):
            attack(epsilon=-0.1)
        with pytest.raises(ArgumentError):
            attack(steps=-1)
        with pytest.raises(ArgumentError):
            attack(steps=3, step_size=0.0)
        with pytest.raises(ArgumentError):
            attack(box=(1.0, 0.0))


class TestPgd:
    def test_ball_and_box_feasible(self, rng):
        m = randomized_model(rng).set_mode(h=0, training=False)
        x = rng.uniform(0.0, 1.0, size=(32, 5))
        y = rng.integers(0, 3, 32)
        cfg = attack()
        x_adv = pgd_attack(m, x, y, cfg)
        assert np.max(np.abs(x_adv - x)) <= cfg.epsilon + 1e-12
        assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0

    def test_zero_steps_is_identity(self, rng):
        m = randomized_model(rng).set_mode(h=0, training=False)
        x = rng.uniform(0.2, 0.8, size=(4, 5))
        x_adv = pgd_attack(m, x, rng.integers(0, 3, 4), attack(steps=0))
        assert np.array_equal(x_adv, x)

    def test_zero_epsilon_is_identity(self, rng):
        m = randomized_model(rng).set_mode(h=0, training=False)
        x = rng.uniform(0.2, 0.8, size=(4, 5))
        x_adv = pgd_attack(m, x, rng.integers(0, 3, 4), attack(epsilon=0.0))
        assert np.allclose(x_adv, x, atol=1e-15)

    def test_loss_does_not_decrease(self, rng):
        m = randomized_model(rng, dim=8, hidden=(12,), classes=4)
        m.set_mode(h=0, training=False)
        x = rng.uniform(0.2, 0.8, size=(16, 8))
        y = rng.integers(0, 4, 16)
        y_oh = one_hot(y, 4)
        l0, _, _ = loss_and_grad(m, x, y_oh)
        x_adv = pgd_attack(m, x, y, attack(epsilon=0.1, steps=10,
                                           step_size=0.02))
        l1, _, _ = loss_and_grad(m, x_adv, y_oh)
        assert l1 >= l0 - 1e-10

    def test_single_step_matches_hand_fgsm(self, rng):
        # one step of size >= eps is FGSM clipped to the ball
        m = randomized_model(rng).set_mode(h=0, training=False)
        x = rng.uniform(0.3, 0.7, size=(6, 5))
        y = rng.integers(0, 3, 6)
        eps = 0.05
        _, _, gx = loss_and_grad(m, x, one_hot(y, 3))
        expect = np.clip(np.clip(x + eps * np.sign(gx),
                                 x - eps, x + eps), 0.0, 1.0)
        got = pgd_attack(m, x, y, attack(epsilon=eps, steps=1, step_size=eps))
        assert np.allclose(got, expect, atol=1e-15)

    def test_training_mode_rejected(self, rng):
        m = randomized_model(rng).set_mode(h=0, training=True)
        with pytest.raises(ContractError):
            pgd_attack(m, rng.uniform(size=(2, 5)), np.array([0, 1]), attack())

    def test_deterministic_without_random_start(self, rng):
        m = randomized_model(rng).set_mode(h=0, training=False)
        x = rng.uniform(size=(8, 5))
        y = rng.integers(0, 3, 8)
        a = pgd_attack(m, x, y, attack())
        b = pgd_attack(m, x, y, attack())
        assert np.array_equal(a, b)

    def test_random_start_needs_rng_and_is_seeded(self, rng):
        m = randomized_model(rng).set_mode(h=0, training=False)
        x = rng.uniform(0.2, 0.8, size=(8, 5))
        y = rng.integers(0, 3, 8)
        cfg = attack(random_start=True)
        with pytest.raises(ArgumentError):
            pgd_attack(m, x, y, cfg)
        a = pgd_attack(m, x, y, cfg, np.random.default_rng(3))
        b = pgd_attack(m, x, y, cfg, np.random.default_rng(3))
        c = pgd_attack(m, x, y, cfg, np.random.default_rng(4))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert np.max(np.abs(a - x)) <= cfg.epsilon + 1e-12

    def test_input_not_mutated(self, rng):
        m = randomized_model(rng).set_mode(h=0, training=False)
        x = rng.uniform(size=(4, 5))
        keep = x.copy()
        pgd_attack(m, x, rng.integers(0, 3, 4), attack())
        assert np.array_equal(x, keep)

    def test_running_stats_untouched(self, rng):
        m = randomized_model(rng).set_mode(h=0, training=False)
        before = {k: (st.clean_mean.copy(), st.clean_var.copy())
                  for k, st in m.dbn_states.items()}
        pgd_attack(m, rng.uniform(size=(8, 5)), rng.integers(0, 3, 8), attack())
        for k, st in m.dbn_states.items():
            assert np.array_equal(st.clean_mean, before[k][0])
            assert np.array_equal(st.clean_var, before[k][1])

    def test_attack_degrades_accuracy(self, rng):
        # a fit model should lose accuracy under a white-box attack
        from fedrbn.nn import build_mlp, predict, sgd_step

        m = build_mlp(4, [16], 2, rng)
        x = rng.uniform(0.0, 1.0, size=(256, 4))
        y = (x.sum(axis=1) > 2.0).astype(np.int64)
        y_oh = one_hot(y, 2)
        m.set_mode(h=0, training=True)
        for _ in range(300):
            _, grads, _ = loss_and_grad(m, x, y_oh)
            sgd_step(m, grads, 0.5)
        m.set_mode(h=0, training=False)
        acc_clean = np.mean(predict(m, x) == y)
        x_adv = pgd_attack(m, x, y, attack(epsilon=0.15, steps=10,
                                           step_size=0.03))
        acc_adv = np.mean(predict(m, x_adv) == y)
        assert acc_clean > 0.9
        assert acc_adv < acc_clean - 0.2
