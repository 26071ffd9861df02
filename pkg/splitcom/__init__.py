"""
splitcom - split-federated LoRA fine-tuning with temporal compression of
cut-layer activations and gradients.
"""
__version__ = '0.1.0'
