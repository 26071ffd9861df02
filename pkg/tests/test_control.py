import math

import pytest

from conftest import small_settings
from splitcom.config.settings import BbcConfig
from splitcom.control.controller import build_controller
from splitcom.control.rules import BbcController, FixedController, bbc_next, fixed_next
from splitcom.control.state import ControllerState, EpochFeedback
from splitcom.errors import ConfigError

LOW, HIGH = 0.98, 0.995


def feedback(epoch, ppl, similarity=None, gated=50, baseline=100):
    return EpochFeedback(epoch=epoch, total_epochs=10, val_ppl=ppl, val_loss=math.log(ppl),
                         similarity=similarity or {}, gated_bytes=gated, baseline_bytes=baseline)


class TestFixed:
    def test_in_range(self):
        assert fixed_next(0.98) == 0.98
        assert fixed_next(-1.0) == -1.0

    @pytest.mark.parametrize('theta', [1.01, -1.5, float('nan')])
    def test_out_of_range(self, theta):
        with pytest.raises(ConfigError):
            fixed_next(theta)

    def test_bypass_values_allowed_when_configured(self):
        assert FixedController({'f2s': 1.01, 's2f': -1.01}).thetas == {'f2s': 1.01, 's2f': -1.01}
        with pytest.raises(ConfigError):
            fixed_next(float('nan'), bypass=True)


@pytest.mark.parametrize('history, previous, tolerance, expected', [
    ([10.0, 10.3], LOW, 0.02, HIGH),               # 10.3 > 10.2
    ([10.0, 9.5, 9.1], HIGH, 0.02, LOW),           # two consecutive decreases
    ([10.0, 10.1, 10.15], LOW, 0.02, HIGH),        # rose over the whole window, no single jump
    ([10.0], LOW, 0.02, LOW),
    ([10.0], HIGH, 0.02, HIGH),
    ([10.0, 10.1], LOW, 0.02, LOW),                # small rise, window not yet full
    ([10.0, 9.9], HIGH, 0.02, HIGH),               # one decrease is not enough
    ([10.0, 9.9, 9.95], HIGH, 0.02, HIGH),
    ([10.0, 10.0, 10.0], LOW, 0.02, LOW),
    ([10.0, 10.0, 10.0], HIGH, 0.02, HIGH),
    ([9.0, 10.0, 9.8, 9.7], HIGH, 0.02, LOW),      # only the last two epochs count
    ([10.0, 9.0, 9.1, 9.2], LOW, 0.02, HIGH),
    ([8.0, 10.0], LOW, 0.25, LOW),                 # exactly ppl * (1 + tolerance) holds
    ([8.0, 10.0], HIGH, 0.25, HIGH),
    ([8.0, 10.5], LOW, 0.25, HIGH),
])
def test_bbc_rules(history, previous, tolerance, expected):
    assert bbc_next(BbcConfig(tolerance=tolerance), history, previous) == expected


class TestBbcController:
    def test_switches_all_interfaces_together(self):
        policy = BbcController(BbcConfig(), ('f2s', 's2f'), pairs={'s2f': (0.9, 0.99)})
        state = ControllerState(('f2s', 's2f'), 2, policy.thetas)
        assert policy.thetas == {'f2s': LOW, 's2f': 0.9}
        for epoch, ppl in enumerate([10.0, 11.0], start=1):
            state.record(feedback(epoch, ppl))
            thetas = policy.observe(feedback(epoch, ppl), state)
        assert thetas == {'f2s': HIGH, 's2f': 0.99}

    def test_random_init_is_seeded(self):
        cfg = BbcConfig(random_init=True)
        draws = {BbcController(cfg, ('f2s',), seed=s).high for s in range(20)}
        assert draws == {True, False}
        assert BbcController(cfg, ('f2s',), seed=3).thetas == BbcController(cfg, ('f2s',), seed=3).thetas

    def test_invalid_pair(self):
        with pytest.raises(ConfigError):
            BbcController(BbcConfig(theta_low=0.99, theta_high=0.98), ('f2s',))


class TestControllerState:
    def test_ema_starts_from_first_observation(self):
        state = ControllerState(('f2s',), 2, {'f2s': 0.9}, ema_factor=0.9)
        assert state.ema['f2s'] == [1.0, 1.0]
        state.record(feedback(2, 10.0, {'f2s': {0: 0.5, 1: None}}))
        assert state.ema['f2s'] == [0.5, 1.0]
        state.record(feedback(3, 10.0, {'f2s': {0: 1.0}}))
        assert state.ema['f2s'][0] == pytest.approx(0.55)

    def test_trends_and_vector(self):
        state = ControllerState(('f2s',), 3, {'f2s': 0.9})
        state.record(feedback(1, 10.0, gated=100))
        state.record(feedback(2, 11.0, gated=40))
        assert state.ppl_trend() == pytest.approx(0.1)
        assert state.comm_trend() == pytest.approx(-0.6)
        vector = state.vector('f2s')
        assert len(vector) == 3 + 4
        assert vector[-2:] == [0.9, 0.2]


class TestBuildController:
    def test_fixed_with_override(self):
        settings = small_settings(protocol__topology='bidirectional', control__theta_overrides='s2f=-1.01')
        controller = build_controller(settings, 7)
        assert controller.thetas == {'f2s': 0.98, 's2f': -1.01}

    def test_override_on_inactive_interface(self):
        with pytest.raises(ConfigError):
            build_controller(small_settings(control__theta_overrides='s2f=0.5'), 7)

    def test_ushape_has_four_interfaces(self):
        controller = build_controller(small_settings(protocol__topology='ushape', control__policy='bbc'), 7)
        assert set(controller.thetas) == {'f2s', 's2t', 't2s', 's2f'}

    def test_thresholds_change_only_on_observe(self):
        controller = build_controller(small_settings(control__policy='bbc'), 7)
        before = controller.thetas
        controller.observe(feedback(1, 10.0))
        controller.observe(feedback(2, 12.0))
        assert controller.thetas['f2s'] == HIGH != before['f2s']
        assert len(controller.trace) == 3

    def test_ddpg_start_is_clamped(self):
        controller = build_controller(small_settings(control__policy='ddpg', control__theta=1.01), 7)
        assert controller.thetas == {'f2s': 1.0}
