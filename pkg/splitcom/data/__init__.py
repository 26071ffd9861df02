"""
Synthetic corpus and run-directory artifacts.
"""

from splitcom.data.corpus import MarkovChain, Split, SyntheticCorpus, corpus_for, generate_corpus
from splitcom.data.data_manager import METRICS_HEADER, DataManager, load_run, metrics_row

__all__ = [
    'METRICS_HEADER', 'DataManager', 'MarkovChain', 'Split', 'SyntheticCorpus', 'corpus_for',
    'generate_corpus', 'load_run', 'metrics_row',
]
