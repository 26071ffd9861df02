"""
Fixed and bang-bang threshold policies.
"""

import logging
import math

from splitcom.errors import ConfigError
from splitcom.kernel.rng import Rng

logger = logging.getLogger(__name__)


def fixed_next(theta0, bypass=False):
    """Constant threshold

    Args:
        theta0: Threshold in [-1, 1]
        bypass: Also accept the gate-bypass values beyond +/-1
            (> 1 always sends, < -1 always reuses)
    """
    theta0 = float(theta0)
    if math.isnan(theta0) or (not bypass and not -1.0 <= theta0 <= 1.0):
        raise ConfigError(f"fixed threshold {theta0} outside [-1, 1]")
    return theta0


def bbc_next(cfg, ppl_history, previous):
    """Next bang-bang threshold from the validation-PPL history

    Switches to theta_high when PPL jumps by more than the tolerance or rose
    over each of the last ``window`` epochs, to theta_low after
    ``consecutive`` strict decreases, and otherwise holds ``previous``.
    """
    h = list(ppl_history)
    if len(h) < 2:
        return previous
    if h[-1] > h[-2] * (1.0 + cfg.tolerance):
        return cfg.theta_high
    if len(h) > cfg.window and all(h[-i] > h[-i - 1] for i in range(1, cfg.window + 1)):
        return cfg.theta_high
    if len(h) > cfg.consecutive and all(h[-i] < h[-i - 1] for i in range(1, cfg.consecutive + 1)):
        return cfg.theta_low
    return previous


class FixedController:
    def __init__(self, thetas):
        self.thetas = {name: fixed_next(theta, bypass=True) for name, theta in thetas.items()}

    def observe(self, feedback, state):
        return dict(self.thetas)


class BbcController:
    """One (theta_low, theta_high) pair per interface, switched together"""

    def __init__(self, cfg, interfaces, seed=0, pairs=None):
        cfg.validate()
        self.cfg = cfg
        self.pairs = {name: (cfg.theta_low, cfg.theta_high) for name in interfaces}
        self.pairs.update(pairs or {})
        self.high = False
        if cfg.random_init:
            self.high = Rng(seed, 'bbc').random_bool()
        self.thetas = self._emit()

    def _emit(self):
        return {name: pair[1] if self.high else pair[0] for name, pair in self.pairs.items()}

    def observe(self, feedback, state):
        previous = self.cfg.theta_high if self.high else self.cfg.theta_low
        level = bbc_next(self.cfg, state.ppl_history, previous)
        if (level == self.cfg.theta_high) != self.high:
            logger.info("BBC switch to %s at epoch %d (ppl history tail %s)",
                        'theta_high' if not self.high else 'theta_low', feedback.epoch,
                        [round(p, 4) for p in state.ppl_history[-3:]])
        self.high = level == self.cfg.theta_high
        self.thetas = self._emit()
        return dict(self.thetas)
