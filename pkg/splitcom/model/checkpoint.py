"""
Versioned binary tensor container.

Layout (little endian):
    b"SCMD" | u32 version | u32 config length | config text (utf-8)
    | u32 tensor count | per tensor:
        u16 name length | name | u8 dtype | u8 ndim | u32 dims... | raw data

dtype codes: 0 = float32, 1 = int64, 2 = int8.
The same encoding carries adapter sets inside AdapterUpload/AdapterBroadcast
messages.
"""

import struct

import numpy as np

from splitcom.errors import ProtocolError

MAGIC = b"SCMD"
VERSION = 1

_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<i8'), 2: np.dtype('i1')}
_CODES = {np.dtype('float32'): 0, np.dtype('int64'): 1, np.dtype('int8'): 2}


def encode_container(tensors, config_text=""):
    """Serialize {name: array} plus an optional config text"""
    config_bytes = config_text.encode('utf-8')
    parts = [MAGIC, struct.pack('<II', VERSION, len(config_bytes)), config_bytes,
             struct.pack('<I', len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        code = _CODES.get(value.dtype)
        if code is None:
            raise ProtocolError(f"tensor {name}: unsupported dtype {value.dtype}")
        name_bytes = name.encode('utf-8')
        parts.append(struct.pack('<H', len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack('<BB', code, value.ndim))
        parts.append(struct.pack(f'<{value.ndim}I', *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_container(blob):
    """Parse a container

    Returns:
        (config text, {name: array})
    """
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ProtocolError("not a SCMD container")
    version, config_len = struct.unpack_from('<II', view, 4)
    if version != VERSION:
        raise ProtocolError(f"unsupported container version {version}")
    offset = 12
    config_text = bytes(view[offset:offset + config_len]).decode('utf-8')
    offset += config_len
    (count,) = struct.unpack_from('<I', view, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from('<H', view, offset)
        offset += 2
        name = bytes(view[offset:offset + name_len]).decode('utf-8')
        offset += name_len
        code, ndim = struct.unpack_from('<BB', view, offset)
        offset += 2
        dims = struct.unpack_from(f'<{ndim}I', view, offset)
        offset += 4 * ndim
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise ProtocolError(f"tensor {name}: unknown dtype code {code}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(view):
            raise ProtocolError(f"tensor {name}: truncated data")
        data = np.frombuffer(view[offset:offset + nbytes], dtype=dtype).reshape(dims)
        tensors[name] = data.astype(dtype.newbyteorder('='), copy=True)
        offset += nbytes
    if offset != len(view):
        raise ProtocolError(f"{len(view) - offset} trailing bytes after container")
    return config_text, tensors


def save_checkpoint(filename, tensors, config_text=""):
    """Write a container file

    Args:
        filename: Output path
        tensors: {name: array}
        config_text: Resolved configuration to embed

    Returns:
        The path written
    """
    with open(filename, 'wb') as f:
        f.write(encode_container(tensors, config_text))
    return filename


def load_checkpoint(filename):
    with open(filename, 'rb') as f:
        return decode_container(f.read())
