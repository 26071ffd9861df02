"""
Bit-exact framing of split-training messages.

Frame (little endian):
    magic "SFC1" | type u8 | client_id u16 | epoch u32 | step u32 | payload length u64 | payload

Tensor payload:
    dtype u8 (0 = float32, 1 = int64, 2 = int8) | ndim u8 | dims u32... | data
    int8 data is a float32 scale followed by the codes.

Sample payloads (uploads and gradient returns):
    count u16 | sample ids u32 x count | tensor [count, ...]

Skip notices:
    interface u8 | batch size u16 | bitmap ceil(batch / 8) bytes, bit i set = sample i reused
"""

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from splitcom.compression.quantize import QuantizedTensor, dequantize, quantize_int8
from splitcom.errors import ProtocolError
from splitcom.kernel.tensor import DTYPE

MAGIC = b"SFC1"
HEADER = struct.Struct('<4sBHIIQ')
HEADER_SIZE = HEADER.size


class MessageType(IntEnum):
    ACTIVATION_UPLOAD = 0x01
    SKIP_NOTICE = 0x02
    GRADIENT_DOWN = 0x03
    GRADIENT_SKIP = 0x04
    ADAPTER_UPLOAD = 0x05
    ADAPTER_BROADCAST = 0x06
    TRUNK_ACTIVATION_DOWN = 0x07
    TAIL_GRADIENT_UP = 0x08
    FRONT_GRADIENT_DOWN = 0x09
    LABEL_BLOCK = 0x0A
    EVAL_REPORT = 0x0B
    SESSION_HELLO = 0x0C


INTERFACE_CODES = {'f2s': 0, 's2t': 1, 't2s': 2, 's2f': 3}
INTERFACE_NAMES = {code: name for name, code in INTERFACE_CODES.items()}

# Message types whose payloads carry cut tensors, by interface
PAYLOAD_TYPES = {
    'f2s': MessageType.ACTIVATION_UPLOAD,
    's2t': MessageType.TRUNK_ACTIVATION_DOWN,
    't2s': MessageType.TAIL_GRADIENT_UP,
}
UPLINK_INTERFACES = ('f2s', 't2s')

# Payload types that carry label values
LABEL_TYPES = frozenset({MessageType.LABEL_BLOCK})


def payload_type(interface, topology):
    """Message type that carries the tensor for ``interface``"""
    if interface == 's2f':
        return MessageType.FRONT_GRADIENT_DOWN if topology == 'ushape' else MessageType.GRADIENT_DOWN
    return PAYLOAD_TYPES[interface]


def skip_type(interface):
    """Activation interfaces use SkipNotice, gradient interfaces GradientSkip"""
    return MessageType.SKIP_NOTICE if interface in ('f2s', 's2t') else MessageType.GRADIENT_SKIP


def direction_of(interface):
    return 'up' if interface in UPLINK_INTERFACES else 'down'


@dataclass
class Frame:
    type: MessageType
    client_id: int
    epoch: int
    step: int
    payload: bytes = b""

    def encode(self):
        return encode_frame(self)

    @property
    def size(self):
        return HEADER_SIZE + len(self.payload)


def encode_frame(frame):
    return HEADER.pack(MAGIC, int(frame.type), frame.client_id, frame.epoch, frame.step,
                       len(frame.payload)) + frame.payload


def decode_frame(buffer, offset=0):
    """Parse one frame at ``offset``

    Returns:
        (Frame, next offset), or (None, offset) if the buffer holds an incomplete frame
    """
    if len(buffer) - offset < HEADER_SIZE:
        return None, offset
    magic, type_byte, client_id, epoch, step, length = HEADER.unpack_from(buffer, offset)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    try:
        msg_type = MessageType(type_byte)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{type_byte:02x}") from None
    end = offset + HEADER_SIZE + length
    if len(buffer) < end:
        return None, offset
    payload = bytes(buffer[offset + HEADER_SIZE:end])
    return Frame(msg_type, client_id, epoch, step, payload), end


class FrameDecoder:
    """Reassembles frames from an arbitrary chunking of the byte stream"""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data):
        self._buffer.extend(data)
        frames = []
        offset = 0
        while True:
            frame, offset_next = decode_frame(self._buffer, offset)
            if frame is None:
                break
            frames.append(frame)
            offset = offset_next
        del self._buffer[:offset]
        return frames

    @property
    def pending(self):
        return len(self._buffer)


# -- tensor payloads ------------------------------------------------------

def encode_tensor(value, quantize=False):
    if isinstance(value, QuantizedTensor):
        q = value
    elif quantize:
        q = quantize_int8(value)
    else:
        q = None
    if q is not None:
        head = struct.pack('<BB', 2, len(q.dims)) + struct.pack(f'<{len(q.dims)}I', *q.dims)
        return head + struct.pack('<f', float(q.scale)) + q.codes.astype(np.int8).tobytes()
    value = np.asarray(value)
    if value.dtype == np.int64:
        code, raw = 1, value.astype('<i8').tobytes()
    else:
        code, raw = 0, np.ascontiguousarray(value, dtype='<f4').tobytes()
    return struct.pack('<BB', code, value.ndim) + struct.pack(f'<{value.ndim}I', *value.shape) + raw


def decode_tensor(payload, offset=0):
    """Returns (array, next offset); int8 payloads come back dequantized"""
    code, ndim = struct.unpack_from('<BB', payload, offset)
    offset += 2
    dims = struct.unpack_from(f'<{ndim}I', payload, offset)
    offset += 4 * ndim
    n = int(np.prod(dims, dtype=np.int64))
    if code == 0:
        data = np.frombuffer(payload, dtype='<f4', count=n, offset=offset).astype(DTYPE)
        offset += 4 * n
    elif code == 1:
        data = np.frombuffer(payload, dtype='<i8', count=n, offset=offset).astype(np.int64)
        offset += 8 * n
    elif code == 2:
        (scale,) = struct.unpack_from('<f', payload, offset)
        codes = np.frombuffer(payload, dtype=np.int8, count=n, offset=offset + 4).copy()
        data = dequantize(QuantizedTensor(tuple(dims), DTYPE(scale), codes))
        offset += 4 + n
    else:
        raise ProtocolError(f"unknown tensor dtype code {code}")
    return data.reshape(dims), offset


def encode_samples(sample_ids, tensor, quantize=False):
    ids = list(sample_ids)
    head = struct.pack('<H', len(ids)) + struct.pack(f'<{len(ids)}I', *ids)
    return head + encode_tensor(tensor, quantize)


def decode_samples(payload):
    (count,) = struct.unpack_from('<H', payload, 0)
    ids = list(struct.unpack_from(f'<{count}I', payload, 2))
    tensor, end = decode_tensor(payload, 2 + 4 * count)
    if end != len(payload):
        raise ProtocolError(f"{len(payload) - end} trailing payload bytes")
    if tensor.shape[0] != count:
        raise ProtocolError(f"{count} sample ids for a tensor of {tensor.shape[0]} rows")
    return ids, tensor


def samples_payload_size(count, row_dims, quantize=False):
    """Size of encode_samples for ``count`` rows of ``row_dims`` without encoding"""
    n = count * int(np.prod(row_dims, dtype=np.int64))
    head = 2 + 4 * count + 2 + 4 * (1 + len(row_dims))
    return head + (4 + n if quantize else 4 * n)


def encode_skip(interface, reused_mask):
    mask = np.asarray(reused_mask, dtype=bool)
    bitmap = np.packbits(mask, bitorder='little').tobytes()
    return struct.pack('<BH', INTERFACE_CODES[interface], mask.size) + bitmap


def decode_skip(payload):
    code, n = struct.unpack_from('<BH', payload, 0)
    if code not in INTERFACE_NAMES:
        raise ProtocolError(f"unknown interface code {code}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=3), bitorder='little')
    return INTERFACE_NAMES[code], bits[:n].astype(bool)


def encode_eval_report(loss_sum, tokens):
    return struct.pack('<dQ', float(loss_sum), int(tokens))


def decode_eval_report(payload):
    return struct.unpack('<dQ', payload)


def encode_hello(config_hash, seed, projection_seeds):
    parts = [bytes(config_hash).ljust(16, b'\0')[:16], struct.pack('<QB', seed, len(projection_seeds))]
    for interface, value in projection_seeds.items():
        parts.append(struct.pack('<BQ', INTERFACE_CODES[interface], value))
    return b"".join(parts)


def decode_hello(payload):
    config_hash = payload[:16]
    seed, n = struct.unpack_from('<QB', payload, 16)
    seeds = {}
    offset = 25
    for _ in range(n):
        code, value = struct.unpack_from('<BQ', payload, offset)
        seeds[INTERFACE_NAMES[code]] = value
        offset += 9
    return config_hash, seed, seeds
