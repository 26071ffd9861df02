"""
Threshold policies: fixed, bang-bang and DDPG.
"""

from splitcom.control.controller import ThresholdController, build_controller
from splitcom.control.ddpg import (
    DdpgAgent, DdpgController, OuNoise, ReplayBuffer, clamp_action, ddpg_act, ddpg_update,
    ou_noise_step, ou_sigma, reward)
from splitcom.control.rules import BbcController, FixedController, bbc_next, fixed_next
from splitcom.control.state import ControllerState, EpochFeedback

__all__ = [
    'BbcController', 'ControllerState', 'DdpgAgent', 'DdpgController', 'EpochFeedback',
    'FixedController', 'OuNoise', 'ReplayBuffer', 'ThresholdController', 'bbc_next',
    'build_controller', 'clamp_action', 'ddpg_act', 'ddpg_update', 'fixed_next',
    'ou_noise_step', 'ou_sigma', 'reward',
]
