"""
Adapter aggregation (FedAvg) and broadcast.
"""

from splitcom.federation.aggregate import broadcast, client_weights, decode_adapters, encode_adapters, fedavg

__all__ = ['broadcast', 'client_weights', 'decode_adapters', 'encode_adapters', 'fedavg']
