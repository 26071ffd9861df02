"""
Split transformer with LoRA adapters, AdamW and the tensor container format.
"""

from splitcom.model.checkpoint import decode_container, encode_container, load_checkpoint, save_checkpoint
from splitcom.model.lora import LoraAdapterSet
from splitcom.model.optimizer import AdamW, LinearWarmupSchedule, optimizer_step
from splitcom.model.transformer import (
    SegmentResult, SplitModel, backward_segment, build_model, forward_frontend,
    forward_server_with_loss, forward_tail_and_loss, forward_trunk)

__all__ = [
    'AdamW', 'LinearWarmupSchedule', 'LoraAdapterSet', 'SegmentResult', 'SplitModel',
    'backward_segment', 'build_model', 'decode_container', 'encode_container',
    'forward_frontend', 'forward_server_with_loss', 'forward_tail_and_loss', 'forward_trunk',
    'load_checkpoint', 'optimizer_step', 'save_checkpoint',
]
