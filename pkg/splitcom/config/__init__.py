"""
Configuration module for splitcom
"""

from splitcom.config.settings import INTERFACES, POLICIES, TOPOLOGIES, Settings

__all__ = ['INTERFACES', 'POLICIES', 'TOPOLOGIES', 'Settings']
