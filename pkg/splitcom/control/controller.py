"""
ThresholdController: per-interface thresholds driven by one policy.
"""

import logging

from splitcom.control.ddpg import DdpgController
from splitcom.control.rules import BbcController, FixedController
from splitcom.control.state import ControllerState
from splitcom.errors import ConfigError

logger = logging.getLogger(__name__)


class ThresholdController:
    """Holds theta for every active interface; updated only at epoch boundaries"""

    def __init__(self, policy, interfaces, clients, ema_factor=0.9):
        self.policy = policy
        self.interfaces = tuple(interfaces)
        self.state = ControllerState(self.interfaces, clients, policy.thetas, ema_factor)
        self.trace = [dict(policy.thetas)]

    @property
    def thetas(self):
        return dict(self.state.thetas)

    def theta(self, interface):
        return self.state.thetas[interface]

    def observe(self, feedback):
        """Consume one epoch of feedback and return the thresholds for the next epoch"""
        self.state.record(feedback)
        thetas = self.policy.observe(feedback, self.state)
        self.state.thetas.update(thetas)
        self.trace.append(dict(thetas))
        return self.thetas


def build_controller(settings, seed):
    """Controller for the configured policy over the topology's gated interfaces"""
    interfaces = settings.active_interfaces()
    control = settings.control
    overrides = control.overrides()
    unknown = set(overrides) - set(interfaces)
    if unknown:
        raise ConfigError(f"theta override for inactive interface(s) {sorted(unknown)}")
    initial = {name: overrides.get(name, control.theta) for name in interfaces}
    if control.policy == 'fixed':
        policy = FixedController(initial)
    elif control.policy == 'bbc':
        policy = BbcController(settings.bbc, interfaces, seed)
    elif control.policy == 'ddpg':
        start = {name: min(1.0, max(0.0, theta)) for name, theta in initial.items()}
        policy = DdpgController(settings.ddpg, interfaces, settings.federation.clients,
                                settings.protocol.topology == 'ushape', start, seed)
    else:
        raise ConfigError(f"unknown policy {control.policy!r}")
    logger.info("Threshold policy %s on %s, initial %s", control.policy, ', '.join(interfaces), policy.thetas)
    return ThresholdController(policy, interfaces, settings.federation.clients, control.ema_factor)
