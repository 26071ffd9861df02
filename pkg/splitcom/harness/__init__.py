"""
Presets, run orchestration and run comparison.
"""

from splitcom.harness.compare import compare_runs, write_comparison
from splitcom.harness.presets import preset_names, preset_overrides, preset_settings
from splitcom.harness.runner import RunResult, run_preset, run_settings

__all__ = [
    'RunResult', 'compare_runs', 'preset_names', 'preset_overrides', 'preset_settings',
    'run_preset', 'run_settings', 'write_comparison',
]
