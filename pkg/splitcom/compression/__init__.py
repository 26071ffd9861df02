"""
Temporal compression: projection, similarity gate, caches and INT8 codec.
"""

from splitcom.compression.cache import (
    CacheKey, ComparisonCache, GateDecision, ReuseCache, cache_memory_report,
    check_coherence, commit_transmission, gate)
from splitcom.compression.projection import IdentityProjection, ProjectionMatrix, cosine, make_projection, project
from splitcom.compression.quantize import QuantizedTensor, dequantize, quantize_int8, wire_roundtrip

__all__ = [
    'CacheKey', 'ComparisonCache', 'GateDecision', 'IdentityProjection', 'ProjectionMatrix',
    'QuantizedTensor', 'ReuseCache', 'cache_memory_report', 'check_coherence',
    'commit_transmission', 'cosine', 'dequantize', 'gate', 'make_projection', 'project',
    'quantize_int8', 'wire_roundtrip',
]
