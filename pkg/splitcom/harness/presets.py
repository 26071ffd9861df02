"""
Named experiment presets: {topology}-{baseline|fixed|bbc|ddpg}[-q].

The names are stable; they key golden files and run directories.
"""

from splitcom.config.settings import TOPOLOGIES, Settings
from splitcom.errors import ConfigError

POLICY_PRESETS = {
    'baseline': {'control.policy': 'fixed', 'control.theta': 1.01},
    'fixed': {'control.policy': 'fixed', 'control.theta': 0.98},
    'bbc': {'control.policy': 'bbc'},
    'ddpg': {'control.policy': 'ddpg', 'control.theta': 0.98},
}


def preset_names():
    names = []
    for topology in TOPOLOGIES:
        for policy in POLICY_PRESETS:
            names.append(f"{topology}-{policy}")
            names.append(f"{topology}-{policy}-q")
    return names


def preset_overrides(name):
    """Config overrides for a preset name"""
    parts = name.split('-')
    quantized = parts[-1] == 'q'
    if quantized:
        parts = parts[:-1]
    if len(parts) != 2 or parts[0] not in TOPOLOGIES or parts[1] not in POLICY_PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    overrides = {'protocol.topology': parts[0], 'compression.quantize_int8': quantized, 'run.preset': name}
    overrides.update(POLICY_PRESETS[parts[1]])
    return overrides


def baseline_of(name):
    """The fp32 baseline preset a preset's ratios refer to"""
    return f"{name.split('-')[0]}-baseline"


def preset_settings(name, overrides=None, base=None):
    """Settings for a preset, then ``overrides`` on top"""
    settings = base.copy() if base is not None else Settings()
    settings.apply_overrides(preset_overrides(name))
    if overrides:
        settings.apply_overrides(overrides)
    return settings.validate()
