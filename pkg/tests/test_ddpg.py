import logging
import math

import numpy as np
import pytest

from conftest import small_settings
from splitcom.config.settings import DdpgConfig
from splitcom.control.controller import build_controller
from splitcom.control.ddpg import (
    SKIPPED, UPDATED, DdpgAgent, OuNoise, ReplayBuffer, Transition, clamp_action, ou_noise_step, ou_sigma,
    reward)
from splitcom.control.state import EpochFeedback
from splitcom.errors import ConfigError, ShapeError
from splitcom.kernel.rng import Rng

STATE = np.ones(3, dtype=np.float32)


def small_cfg(**kw):
    values = dict(hidden1=16, hidden2=16, minibatch=4, replay_capacity=50)
    values.update(kw)
    return DdpgConfig(**values)


class TestReward:
    def test_formula(self):
        assert reward(2.0, 1.0, 30, 100, False, False, alpha=2.0, beta=1.0) == pytest.approx(-4.3)

    def test_penalties(self):
        r = reward(1.0, 1.0, 0, 100, True, False, alpha=1.0, beta=1.0, p_zero=5.0)
        assert r == pytest.approx(-6.0)
        r = reward(1.0, 1.0, 100, 100, False, True, alpha=1.0, beta=1.0, p_full=0.5)
        assert r == pytest.approx(-2.5)

    @pytest.mark.parametrize('loss, comm, zero_flag, expected', [
        (0.5, 0.2, False, -1.2),
        (0.5, 0.2, True, -2.2),
        (1.0, 1.0, False, -3.0),
    ])
    def test_reference_values(self, loss, comm, zero_flag, expected):
        r = reward(loss, 1.0, comm, 1.0, zero_flag, False, alpha=2.0, beta=1.0, p_zero=1.0)
        assert r == pytest.approx(expected)

    def test_non_positive_baseline(self):
        with pytest.raises(ConfigError):
            reward(1.0, 0.0, 1, 1, False, False, 1.0, 1.0)


class TestNoise:
    def test_zero_sigma_decays_toward_mu(self):
        noise = OuNoise(mu=0.0, theta=0.15, value=1.0)
        assert ou_noise_step(noise, 0.0, Rng(1)) == pytest.approx(0.85)

    def test_seeded(self):
        a = ou_noise_step(OuNoise(), 0.1, Rng(4, 'n'))
        assert a == ou_noise_step(OuNoise(), 0.1, Rng(4, 'n'))
        assert a != 0.0

    def test_sigma_schedule(self):
        assert ou_sigma(0.002, 0.98, 0) == 0.002
        assert ou_sigma(0.002, 0.98, 10) == pytest.approx(0.002 * 0.98 ** 10)
        assert ou_sigma(0.002, 0.98, 3) == pytest.approx(0.0018824, abs=5e-8)

    def test_agent_sigma_after_three_epochs(self):
        agent = DdpgAgent(3, small_cfg(), 0.002, seed=1)
        for _ in range(3):
            agent.end_epoch()
        assert agent.sigma == pytest.approx(0.001882384, rel=1e-9)

    def test_long_run_mean_and_spread(self):
        sigma, theta, n = 0.002, 0.15, 100_000
        noise, rng = OuNoise(mu=0.0, theta=theta), Rng(9, 'ou')
        samples = np.array([ou_noise_step(noise, sigma, rng) for _ in range(n)])
        # consecutive samples are correlated (lag-1 = 1 - theta), so the mean's
        # standard error is sigma / (theta * sqrt(n)), not stationary_std / sqrt(n)
        assert abs(samples.mean()) <= 3 * sigma / (theta * math.sqrt(n))
        stationary = sigma / math.sqrt(2 * theta - theta ** 2)
        assert samples[1000:].std() == pytest.approx(stationary, rel=0.05)

    def test_clamp(self):
        assert clamp_action(1.3) == 1.0
        assert clamp_action(-0.2) == 0.0


def test_replay_evicts_oldest():
    buffer = ReplayBuffer(3)
    for i in range(5):
        buffer.add(Transition(STATE, i / 10, 0.0, STATE))
    assert len(buffer) == 3
    assert [t.action for t in buffer.items()] == [0.2, 0.3, 0.4]
    assert len(buffer.sample(2, Rng(1))) == 2


class TestAgent:
    def test_action_range_and_state_length(self):
        agent = DdpgAgent(3, small_cfg(), 0.5, seed=1)
        for _ in range(20):
            assert 0.0 <= agent.act(STATE, explore=True) <= 1.0
        with pytest.raises(ShapeError):
            agent.act(np.ones(4))

    def test_update_skipped_until_minibatch(self):
        agent = DdpgAgent(3, small_cfg(), 0.0, seed=1)
        agent.remember(STATE, 0.5, -1.0, STATE)
        assert agent.update().status == SKIPPED
        for _ in range(3):
            agent.remember(STATE, 0.5, -1.0, STATE)
        result = agent.update()
        assert result.status == UPDATED
        assert math.isfinite(result.critic_loss)

    def test_critic_loss_decreases_on_fixed_batch(self):
        agent = DdpgAgent(3, small_cfg(gamma=0.0, critic_lr=1e-2), 0.0, seed=2)
        batch = [Transition(STATE * s, a, -(a - 0.7) ** 2, STATE)
                 for s, a in ((1.0, 0.1), (0.5, 0.4), (1.5, 0.8), (2.0, 1.0))]
        losses = [agent.critic_step(batch) for _ in range(11)]
        assert losses[-1] < losses[0]

    def test_learn_runs_configured_updates(self):
        agent = DdpgAgent(3, small_cfg(updates_per_epoch=3), 0.0, seed=1)
        for _ in range(4):
            agent.remember(STATE, 0.5, -1.0, STATE)
        before = agent.actor_opt.state.step
        assert agent.learn().status == UPDATED
        assert agent.actor_opt.state.step == before + 3

    def test_converges_on_scripted_reward(self):
        # reward -(theta - 0.7)^2 with a constant state; exploration wide enough
        # for the critic to see the curvature, decaying to ~0.003 by the last epochs
        cfg = small_cfg(hidden1=64, hidden2=48, gamma=0.0, minibatch=16, replay_capacity=200,
                        updates_per_epoch=10, actor_lr=3e-4, critic_lr=3e-3, soft_update=0.05)
        agent = DdpgAgent(3, cfg, 0.1, seed=1)
        thetas = []
        for _ in range(200):
            theta = agent.act(STATE, explore=True)
            agent.remember(STATE, theta, -(theta - 0.7) ** 2, STATE)
            agent.learn()
            agent.end_epoch()
            thetas.append(theta)
        assert all(abs(theta - 0.7) <= 0.1 for theta in thetas[-20:])

    def test_save_and_load(self, tmp_path):
        agent = DdpgAgent(3, small_cfg(), 0.0, seed=1)
        other = DdpgAgent(3, small_cfg(), 0.0, seed=2)
        assert agent.act(STATE) != other.act(STATE)
        other.load(agent.save(str(tmp_path / 'agent.scmd')))
        assert agent.act(STATE) == other.act(STATE)


class TestController:
    def feedback(self, epoch, loss, gated):
        return EpochFeedback(epoch=epoch, total_epochs=5, val_ppl=math.exp(loss), val_loss=loss,
                             similarity={'f2s': {0: 0.99, 1: 0.98}}, gated_bytes=gated, baseline_bytes=1000)

    def run(self, settings, epochs=4):
        controller = build_controller(settings, 7)
        thetas = []
        for epoch in range(1, epochs + 1):
            thetas.append(controller.observe(self.feedback(epoch, 2.0 - 0.1 * epoch, 1000 // epoch))['f2s'])
        return controller, thetas

    def test_observe_emits_valid_thresholds(self, caplog):
        settings = small_settings(control__policy='ddpg')
        with caplog.at_level(logging.WARNING):
            controller, thetas = self.run(settings)
        assert all(0.0 <= t <= 1.0 for t in thetas)
        agent = controller.policy.agents['f2s']
        assert len(agent.buffer) == 3
        assert agent.state_dim == settings.federation.clients + 4
        assert "update skipped" in caplog.text

    def test_same_seed_same_trace(self):
        settings = small_settings(control__policy='ddpg')
        assert self.run(settings)[1] == self.run(settings)[1]

    def test_ushape_weights(self):
        policy = build_controller(small_settings(control__policy='ddpg', protocol__topology='ushape'), 7).policy
        assert (policy.alpha, policy.beta) == (1.5, 2.0)
        assert policy.agents['t2s'].sigma0 == 0.005
        assert len(policy.agents) == 4
